"""Neural building blocks for the causal video autoencoder.

All blocks operate on 5D tensors in (B, C, T, H, W) layout and are pure
functions of (input, weights): no internal state is mutated in forward.
Temporal causality is the central contract here: every 3D block's output at
frame t depends only on input frames <= t (scaled by the temporal stride).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


@dataclass(frozen=True)
class AttnConfig:
    """Configuration for block-causal 3D attention."""

    heads: int = 8
    rope_base: float = 10000.0
    qk_norm_eps: float = 1e-6


def build_block_causal_mask(
    t: int, l_h: int, l_w: int, device: torch.device | None = None
) -> torch.Tensor:
    """Boolean (N, N) mask over N = t*l_h*l_w flattened tokens.

    Entry (i, j) is True (allowed) iff token j belongs to the same or an
    earlier frame than token i, where each frame contributes a contiguous
    block of l_h*l_w tokens.
    """
    if t < 1 or l_h < 1 or l_w < 1:
        raise ValueError(f"mask dims must be >= 1, got ({t}, {l_h}, {l_w})")
    block = l_h * l_w
    frame = torch.arange(t * block, device=device) // block
    return frame[None, :] <= frame[:, None]


class PixelNorm(nn.Module):
    """Per-position channel RMS normalization (no learnable parameters)."""

    def __init__(self, eps: float = 1e-6):
        super().__init__()
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pixel_norm(x, self.eps)


def pixel_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Divide each position's channel vector by its RMS.

    y = x / sqrt(mean_c(x^2) + eps); channel dim is dim 1.
    """
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class CausalConv3d(nn.Module):
    """3D convolution, causal along time.

    The temporal axis is left-padded with k_t - 1 copies of the first frame
    (replicate padding), so a constant-in-time input stays constant and the
    output at frame t' never sees input frames beyond s_t * t'.  Spatial
    padding is symmetric k//2, which for odd kernels preserves H, W at
    stride 1 and halves them exactly at stride 2 (even dims required).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int, int] = (3, 3, 3),
        stride: tuple[int, int, int] = (1, 1, 1),
    ):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv3d(
            in_channels,
            out_channels,
            kernel,
            stride=stride,
            padding=(0, kernel[1] // 2, kernel[2] // 2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k_t, s_t = self.kernel[0], self.stride[0]
        t = x.shape[2]
        if t < 1 or (t - 1) % s_t != 0:
            raise ValueError(
                f"temporal length {t} invalid for stride {s_t}: need (T-1) % s_t == 0"
            )
        if k_t > 1:
            x = F.pad(x, (0, 0, 0, 0, k_t - 1, 0), mode="replicate")
        return self.conv(x)


class Conv2dVideo(nn.Module):
    """2D convolution applied to every frame independently."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
    ):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel, stride=stride, padding=kernel // 2
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # One conv2d call per frame (not a folded (b t) batch) so that whole-clip
        # and frame-sliced execution share the exact same reduction order.
        frames = [self.conv(x[:, :, t]) for t in range(x.shape[2])]
        return torch.stack(frames, dim=2)


def pixel_shuffle_3d(
    x: torch.Tensor,
    r_t: int,
    r_h: int,
    r_w: int,
    causal_trim: bool = False,
) -> torch.Tensor:
    """Rearrange channel groups into spatio-temporal positions.

    Channel index decomposes as c_out * (r_t*r_h*r_w) + ((dt*r_h) + dh)*r_w + dw,
    with (dt, dh, dw) the offset inside each upsampled cell (channel-major,
    matching the 2D torch convention).  With causal_trim the leading r_t - 1
    output frames are dropped so the first input frame maps to exactly one
    output frame: T_out = r_t*T - (r_t - 1).
    """
    r = r_t * r_h * r_w
    if x.shape[1] % r != 0:
        raise ValueError(f"channels {x.shape[1]} not divisible by {r}")
    y = rearrange(
        x,
        "b (c rt rh rw) t h w -> b c (t rt) (h rh) (w rw)",
        rt=r_t,
        rh=r_h,
        rw=r_w,
    )
    if causal_trim and r_t > 1:
        y = y[:, :, r_t - 1 :]
    return y


def pixel_unshuffle_3d(x: torch.Tensor, r_t: int, r_h: int, r_w: int) -> torch.Tensor:
    """Exact inverse of pixel_shuffle_3d with causal_trim off."""
    if x.shape[2] % r_t or x.shape[3] % r_h or x.shape[4] % r_w:
        raise ValueError(
            f"shape {tuple(x.shape[2:])} not divisible by factors ({r_t}, {r_h}, {r_w})"
        )
    return rearrange(
        x,
        "b c (t rt) (h rh) (w rw) -> b (c rt rh rw) t h w",
        rt=r_t,
        rh=r_h,
        rw=r_w,
    )


def rope_axis_dims(head_dim: int) -> tuple[int, int, int]:
    """Split a head dimension into (d_t, d_h, d_w) even-sized segments."""
    d_hw = 2 * (head_dim // 6)
    d_t = head_dim - 2 * d_hw
    if d_hw < 2 or d_t < 2 or d_t % 2:
        raise ValueError(f"head_dim {head_dim} too small or odd for 3-axis rotary")
    return d_t, d_hw, d_hw


def _axis_angles(positions: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    freqs = base ** (
        -torch.arange(0, dim, 2, dtype=torch.float32, device=positions.device) / dim
    )
    return positions[:, None].float() * freqs[None, :]


def rope_3d_angles(
    t: int, h: int, w: int, head_dim: int, base: float, device: torch.device | None = None
) -> torch.Tensor:
    """Per-token rotation angles for axial 3D rotary embedding.

    Tokens are flattened in (t, h, w) order; the head dimension is split into
    three contiguous segments rotated by the t, h and w coordinates.  Returns
    an (N, head_dim // 2) angle tensor.
    """
    d_t, d_h, d_w = rope_axis_dims(head_dim)
    grid = torch.stack(
        torch.meshgrid(
            torch.arange(t, device=device),
            torch.arange(h, device=device),
            torch.arange(w, device=device),
            indexing="ij",
        ),
        dim=-1,
    ).reshape(-1, 3)
    return torch.cat(
        [
            _axis_angles(grid[:, 0], d_t, base),
            _axis_angles(grid[:, 1], d_h, base),
            _axis_angles(grid[:, 2], d_w, base),
        ],
        dim=-1,
    )


def apply_rope(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate pairs (x_even, x_odd) of the last dim by per-token angles.

    x: (..., N, D), angles: (N, D // 2).  Norm-preserving by construction.
    """
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(angles), torch.sin(angles)
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class QKNorm(nn.Module):
    """Per-head RMS normalization of queries/keys with a learnable scale."""

    def __init__(self, head_dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(head_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * rms * self.scale


class CausalAttention3d(nn.Module):
    """Block-causal multi-head self-attention over flattened video tokens.

    Input (B, C, T, H, W) is flattened to (B, T*H*W, C); queries and keys are
    RMS-normalized then rotated by axial 3D RoPE; scores are masked so every
    token attends only to its own and earlier frames.
    """

    def __init__(self, width: int, cfg: AttnConfig):
        super().__init__()
        if width % cfg.heads:
            raise ValueError(f"width {width} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.heads = cfg.heads
        self.head_dim = width // cfg.heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.q_norm = QKNorm(self.head_dim, cfg.qk_norm_eps)
        self.k_norm = QKNorm(self.head_dim, cfg.qk_norm_eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t, h, w = x.shape
        tokens = rearrange(x, "b c t h w -> b (t h w) c")
        q, k, v = rearrange(
            self.qkv(tokens), "b n (three hd d) -> three b hd n d", three=3, hd=self.heads
        )
        q, k = self.q_norm(q), self.k_norm(k)
        angles = rope_3d_angles(t, h, w, self.head_dim, self.cfg.rope_base, x.device)
        q, k = apply_rope(q, angles), apply_rope(k, angles)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        mask = build_block_causal_mask(t, h, w, device=x.device)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = self.proj(rearrange(out, "b hd n d -> b n (hd d)"))
        return rearrange(out, "b (t h w) c -> b c t h w", t=t, h=h, w=w)


class TransformerBlock3d(nn.Module):
    """Pre-norm transformer block: block-causal attention plus optional MLP."""

    def __init__(
        self,
        width: int,
        cfg: AttnConfig,
        mlp_ratio: float = 4.0,
        use_mlp: bool = True,
    ):
        super().__init__()
        self.norm1 = PixelNorm()
        self.attn = CausalAttention3d(width, cfg)
        self.use_mlp = use_mlp
        if use_mlp:
            hidden = int(width * mlp_ratio)
            self.norm2 = PixelNorm()
            self.fc1 = nn.Linear(width, hidden)
            self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        if self.use_mlp:
            y = rearrange(self.norm2(x), "b c t h w -> b t h w c")
            y = self.fc2(F.silu(self.fc1(y)))
            x = x + rearrange(y, "b t h w c -> b c t h w")
        return x


class ResidualBlock(nn.Module):
    """norm -> act -> conv, twice, with an identity skip.

    The second conv is zero-initialized so a fresh block is the identity.
    The 2D variant applies its convolutions per frame; the 3D variant uses
    causal 3D convolutions.  In/out channel counts are equal by contract.
    """

    def __init__(self, channels: int, variant: str = "3d"):
        super().__init__()
        if variant not in ("2d", "3d"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        conv = Conv2dVideo if variant == "2d" else CausalConv3d
        self.norm1 = PixelNorm()
        self.conv1 = conv(channels, channels)
        self.norm2 = PixelNorm()
        self.conv2 = conv(channels, channels)
        inner = self.conv2.conv
        nn.init.zeros_(inner.weight)
        nn.init.zeros_(inner.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv1(F.silu(self.norm1(x)))
        y = self.conv2(F.silu(self.norm2(y)))
        return x + y
