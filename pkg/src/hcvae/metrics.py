"""Reconstruction quality metrics: PSNR and SSIM on (T, H, W, C) clips."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    """Per-frame metric values plus their arithmetic mean.

    Frames with zero error report math.inf for PSNR; those sentinels are
    excluded from the mean and flagged via has_infinite.
    """

    clip_id: str
    frames: list[float] = field(default_factory=list)
    mean: float = 0.0
    has_infinite: bool = False


def _check_pair(x: np.ndarray, xhat: np.ndarray) -> None:
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")


def psnr(x: np.ndarray, xhat: np.ndarray, clip_id: str = "") -> MetricReport:
    """Per-frame -10*log10(MSE) on [0, 1] pixels."""
    _check_pair(x, xhat)
    values = []
    for t in range(x.shape[0]):
        mse = float(np.mean((x[t].astype(np.float64) - xhat[t].astype(np.float64)) ** 2))
        values.append(math.inf if mse == 0.0 else -10.0 * math.log10(mse))
    finite = [v for v in values if math.isfinite(v)]
    return MetricReport(
        clip_id=clip_id,
        frames=values,
        mean=float(np.mean(finite)) if finite else math.inf,
        has_infinite=len(finite) < len(values),
    )


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter2_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode 2D correlation via stride tricks (small windows only)."""
    k = win.shape[0]
    h, w = img.shape
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", view, win, optimize=True)


def ssim_frame(
    a: np.ndarray,
    b: np.ndarray,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean SSIM of one (H, W) channel pair with a Gaussian window."""
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"frame {a.shape} smaller than {window}x{window} window")
    win = _gaussian_window(window, sigma)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a = _filter2_valid(a, win)
    mu_b = _filter2_valid(b, win)
    var_a = _filter2_valid(a * a, win) - mu_a**2
    var_b = _filter2_valid(b * b, win) - mu_b**2
    cov = _filter2_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, xhat: np.ndarray, clip_id: str = "") -> MetricReport:
    """Per-frame SSIM, computed per channel then averaged."""
    _check_pair(x, xhat)
    values = []
    for t in range(x.shape[0]):
        per_channel = [
            ssim_frame(x[t, :, :, c], xhat[t, :, :, c]) for c in range(x.shape[-1])
        ]
        values.append(float(np.mean(per_channel)))
    return MetricReport(clip_id=clip_id, frames=values, mean=float(np.mean(values)))
