"""Two-phase training loop.

Phase 1 optimizes L1 reconstruction + KL with first-frame conditioning drawn
per clip at probability p.  The final lc_phase_iters iterations drop the
learning rate and add the latent-consistency loss, re-encoding the
reconstruction through the encoder with its parameter gradients blocked.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossWeights, total_loss
from .model import LatentPosterior, ModelConfig, VideoAutoencoder


class NonFiniteLossError(RuntimeError):
    """Raised when a step produces a non-finite loss; weights are unchanged."""


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 80_000
    lc_phase_iters: int = 10_000
    lr_main: float = 1e-4
    lr_final: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    p_condition: float = 0.5
    batch: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    clip_length_set: tuple[int, ...] | None = None
    grad_clip: float = 1.0
    checkpoint_every: int = 1000
    lc_stochastic: bool = False

    def __post_init__(self):
        if self.lc_phase_iters > self.total_iters:
            raise ValueError("lc_phase_iters must not exceed total_iters")
        if not 0.0 <= self.p_condition <= 1.0:
            raise ValueError("p_condition must lie in [0, 1]")

    def lr_at(self, iteration: int) -> float:
        """Step change at the phase boundary: lr_final inside the LC phase."""
        if iteration >= self.total_iters - self.lc_phase_iters:
            return self.lr_final
        return self.lr_main

    def lc_active(self, iteration: int) -> bool:
        return iteration >= self.total_iters - self.lc_phase_iters


@dataclass
class TrainState:
    model: VideoAutoencoder
    optimizer: torch.optim.AdamW
    generator: torch.Generator
    iteration: int = 0


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = VideoAutoencoder(model_cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr_main, betas=cfg.betas, weight_decay=0.0
    )
    generator = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model=model, optimizer=optimizer, generator=generator)


def _frozen_encode(model: VideoAutoencoder, x: torch.Tensor) -> LatentPosterior:
    """Encode with encoder parameters detached: gradients flow into x only."""
    params = {
        name: p.detach() for name, p in model.encoder.named_parameters()
    }
    post, _ = functional_call(model.encoder, params, (x,))
    return post


def draw_condition_mask(
    n: int, p: float, generator: torch.Generator
) -> torch.Tensor:
    """Per-clip Bernoulli(p) conditioning decisions; p = 0 and 1 draw nothing."""
    if p <= 0.0:
        return torch.zeros(n, dtype=torch.bool)
    if p >= 1.0:
        return torch.ones(n, dtype=torch.bool)
    return torch.rand(n, generator=generator) < p


def train_step(
    state: TrainState, batch: torch.Tensor, cfg: TrainConfig
) -> dict[str, float]:
    """One optimizer update on a (B, 3, T, H, W) batch; returns step metrics."""
    model = state.model
    lr = cfg.lr_at(state.iteration)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    lc = cfg.lc_active(state.iteration)

    mask = draw_condition_mask(batch.shape[0], cfg.p_condition, state.generator)

    capture = bool(mask.any())
    post, taps = model.encode(batch, capture_taps=capture)
    deterministic = lc and not cfg.lc_stochastic
    z = post.sample(deterministic=deterministic, generator=state.generator)

    xhat = torch.empty_like(batch)
    if capture:
        cond_taps = [tap[mask] for tap in taps]
        xhat[mask] = model.decode(z[mask], taps=cond_taps, clamp=False)
    if bool((~mask).any()):
        xhat[~mask] = model.decode(z[~mask], clamp=False)

    zprime = _frozen_encode(model, xhat) if lc else None
    loss, terms = total_loss(batch, xhat, post, zprime, cfg.weights)
    if not math.isfinite(terms["total"]):
        raise NonFiniteLossError(
            f"non-finite loss at iteration {state.iteration}: {terms}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.iteration += 1

    with torch.no_grad():
        mse = float((batch - xhat.clamp(0, 1)).pow(2).mean())
    metrics = {
        "iter": state.iteration,
        "loss_total": terms["total"],
        "loss_recon": terms["recon"],
        "loss_kl": terms["kl"],
        "loss_lc": terms.get("lc", 0.0),
        "lr": lr,
        "conditioned_fraction": float(mask.float().mean()),
        "psnr": math.inf if mse == 0 else -10.0 * math.log10(mse),
    }
    return metrics


def batch_iterator(
    clips: Sequence[np.ndarray],
    cfg: TrainConfig,
    f_t: int,
    generator: torch.Generator,
) -> Iterator[torch.Tensor]:
    """Draw batches of clips (uniform choice, optional temporal crop).

    All clips must share one shape.  When clip_length_set is given, each
    batch is cropped to a uniformly drawn valid length starting at a random
    frame offset.
    """
    tensors = [
        torch.from_numpy(np.ascontiguousarray(c)).permute(3, 0, 1, 2).float()
        for c in clips
    ]
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"clips must share one shape, got {sorted(shapes)}")
    full_t = tensors[0].shape[1]
    lengths = None
    if cfg.clip_length_set:
        lengths = [n for n in cfg.clip_length_set if n <= full_t]
        for n in lengths:
            if n != 1 and (n - 1) % f_t:
                raise ValueError(f"clip length {n} invalid for temporal factor {f_t}")
        if not lengths:
            raise ValueError("clip_length_set has no usable lengths")
    while True:
        idx = torch.randint(len(tensors), (cfg.batch,), generator=generator)
        batch = torch.stack([tensors[i] for i in idx.tolist()])
        if lengths is not None:
            n = lengths[int(torch.randint(len(lengths), (1,), generator=generator))]
            start = int(torch.randint(full_t - n + 1, (1,), generator=generator))
            batch = batch[:, :, start : start + n]
        yield batch


def run_training(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    clips: Sequence[np.ndarray],
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> TrainState:
    """Train to cfg.total_iters, writing metrics JSONL and periodic checkpoints.

    Deterministic under a fixed seed: every stochastic draw (batch choice,
    conditioning, reparameterization noise) uses one serialized generator.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    state = init_state(model_cfg, cfg)
    if resume is not None:
        state.iteration = load_checkpoint(
            resume, state.model, state.optimizer, state.generator
        )
    batches = batch_iterator(clips, cfg, model_cfg.compression[0], state.generator)
    log_path = out_dir / "logs" / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log:
        while state.iteration < cfg.total_iters:
            metrics = train_step(state, next(batches), cfg)
            log.write(json.dumps(metrics) + "\n")
            if (
                state.iteration % cfg.checkpoint_every == 0
                or state.iteration == cfg.total_iters
            ):
                save_checkpoint(
                    out_dir / "checkpoints" / f"iter_{state.iteration:08d}",
                    state.model,
                    state.optimizer,
                    state.iteration,
                    state.generator,
                )
    final = out_dir / "checkpoints" / "final"
    save_checkpoint(final, state.model, state.optimizer, state.iteration, state.generator)
    return state
