"""Training objectives.

All losses are mean-reduced over every element so their scale is independent
of batch size and resolution, and each is exactly zero at its fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import LatentPosterior


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective.

    lambda_kl scales the KL-to-prior regularizer, w_lc the latent-consistency
    term, w_dwt the Haar wavelet auxiliary term.  lc_detach_target blocks
    gradient flow through the ground-truth posterior inside the LC term only.
    """

    lambda_kl: float = 1e-6
    w_lc: float = 1.0
    w_dwt: float = 0.0
    lc_detach_target: bool = False

    def __post_init__(self):
        if self.lambda_kl < 0 or self.w_lc < 0 or self.w_dwt < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_l1(x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    _check_shapes(x, xhat)
    return (x - xhat).abs().mean()


def kl_to_prior(post: LatentPosterior) -> torch.Tensor:
    """Mean of 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2) against N(0, I)."""
    var = torch.exp(post.logvar)
    return 0.5 * (post.mu.pow(2) + var - 1.0 - post.logvar).mean()


def latent_consistency(z: LatentPosterior, zprime: LatentPosterior) -> torch.Tensor:
    """KL divergence of the ground-truth posterior z from the re-encoded one.

    Mean of 0.5 * [(mu_z - mu_z')^2 / var_z' + var_z / var_z' - 1
                   - log(var_z / var_z')].
    zprime is expected to come from re-encoding the reconstruction with the
    encoder's parameter gradients blocked; this function itself is
    differentiable with respect to both posteriors.
    """
    _check_shapes(z.mu, zprime.mu)
    log_ratio = z.logvar - zprime.logvar
    var_ratio = torch.exp(log_ratio)
    sq = (z.mu - zprime.mu).pow(2) * torch.exp(-zprime.logvar)
    return 0.5 * (sq + var_ratio - 1.0 - log_ratio).mean()


def haar_dwt_loss(x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    """L1 distance in a single-level orthonormal 2D Haar decomposition.

    Each frame is transformed per channel; the 1/2-per-2x2-block scaling makes
    the transform orthonormal, so coefficient energy equals pixel energy.
    """
    _check_shapes(x, xhat)
    return (haar_dwt2(x) - haar_dwt2(xhat)).abs().mean()


def haar_dwt2(x: torch.Tensor) -> torch.Tensor:
    """Stack (LL, LH, HL, HH) subbands of a (..., H, W) tensor along a new dim."""
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"spatial dims {tuple(x.shape[-2:])} must be even")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return torch.stack([ll, lh, hl, hh], dim=-3)


def total_loss(
    x: torch.Tensor,
    xhat: torch.Tensor,
    post: LatentPosterior,
    zprime_post: LatentPosterior | None,
    w: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the objective terms with a per-term breakdown.

    The latent-consistency term is included only when zprime_post is given.
    """
    terms: dict[str, float] = {}
    recon = recon_l1(x, xhat)
    total = recon
    terms["recon"] = float(recon.detach())

    kl = kl_to_prior(post)
    total = total + w.lambda_kl * kl
    terms["kl"] = float(kl.detach())

    if zprime_post is not None:
        target = post
        if w.lc_detach_target:
            target = LatentPosterior(post.mu.detach(), post.logvar.detach())
        lc = latent_consistency(target, zprime_post)
        total = total + w.w_lc * lc
        terms["lc"] = float(lc.detach())

    if w.w_dwt > 0:
        dwt = haar_dwt_loss(x, xhat)
        total = total + w.w_dwt * dwt
        terms["dwt"] = float(dwt.detach())

    terms["total"] = float(total.detach())
    return total, terms
