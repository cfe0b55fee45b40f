"""Two-stage causal video autoencoder.

The encoder and decoder are mirrored stacks of stages.  High-resolution
stages use frame-local 2D convolutions (enabling sliced, frame-by-frame
decoding); the spatio-temporal stages use causal 3D convolutions, and an
optional transformer stage with block-causal attention sits at the
bottleneck.  Downsampling is by strided causal convolution, upsampling by
convolution followed by spatio-temporal pixel shuffle with a causal trim on
the temporal axis.

Tensors flow in (B, C, T, H, W) layout; pixel clips at the API boundary are
(T, H, W, C) arrays in [0, 1] (see hcvae.data).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    AttnConfig,
    CausalConv3d,
    Conv2dVideo,
    ResidualBlock,
    TransformerBlock3d,
    pixel_norm,
    pixel_shuffle_3d,
)

Stride = tuple[int, int, int]


@dataclass(frozen=True)
class StageSpec:
    """One encoder/decoder stage: channel width and residual block count."""

    width: int
    num_blocks: int
    stride: Stride = (2, 2, 2)


@dataclass(frozen=True)
class AttnStageSpec:
    """Bottleneck transformer stage."""

    width: int
    num_blocks: int
    heads: int = 8
    stride: Stride = (2, 2, 2)


@dataclass(frozen=True)
class ModelConfig:
    """Fully determines the autoencoder network.

    compression is the (f_t, f_h, f_w) pixel-to-latent factor and must equal
    the product of all stage strides.  Spatial stages always stride (1, 2, 2).
    """

    compression: Stride
    spatial_stages: tuple[StageSpec, ...]
    st_stages: tuple[StageSpec, ...]
    attn: Optional[AttnStageSpec]
    latent_channels: int
    width_multiplier: float = 1.0
    fuse_mode: str = "first_slice"  # or "broadcast"
    attn_mlp: bool = True

    def __post_init__(self):
        if self.fuse_mode not in ("first_slice", "broadcast"):
            raise ValueError(f"unknown fuse_mode {self.fuse_mode!r}")
        strides = [s.stride for s in self.spatial_stages + self.st_stages]
        if self.attn is not None:
            strides.append(self.attn.stride)
        total = [1, 1, 1]
        for s in strides:
            for i in range(3):
                total[i] *= s[i]
        if tuple(total) != tuple(self.compression):
            raise ValueError(
                f"stage strides compose to {tuple(total)}, expected {self.compression}"
            )
        for s in self.spatial_stages:
            if s.stride != (1, 2, 2):
                raise ValueError("spatial stages must stride (1, 2, 2)")
        if self.attn is not None and self.scaled(self.attn.width) % self.attn.heads:
            raise ValueError("attention width (after multiplier) must divide heads")

    def scaled(self, width: int) -> int:
        return max(1, round(width * self.width_multiplier))

    @property
    def stage_widths(self) -> list[int]:
        """Scaled widths of all stages, encoder order."""
        ws = [self.scaled(s.width) for s in self.spatial_stages + self.st_stages]
        if self.attn is not None:
            ws.append(self.scaled(self.attn.width))
        return ws

    @property
    def num_stages(self) -> int:
        return len(self.spatial_stages) + len(self.st_stages) + (self.attn is not None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        d = dict(d)
        d["compression"] = tuple(d["compression"])
        d["spatial_stages"] = tuple(
            StageSpec(s["width"], s["num_blocks"], tuple(s["stride"]))
            for s in d["spatial_stages"]
        )
        d["st_stages"] = tuple(
            StageSpec(s["width"], s["num_blocks"], tuple(s["stride"]))
            for s in d["st_stages"]
        )
        if d.get("attn") is not None:
            a = d["attn"]
            d["attn"] = AttnStageSpec(
                a["width"], a["num_blocks"], a["heads"], tuple(a["stride"])
            )
        return cls(**d)


PRESETS = {
    "f4x16x16": ModelConfig(
        compression=(4, 16, 16),
        spatial_stages=(StageSpec(32, 2, (1, 2, 2)), StageSpec(64, 2, (1, 2, 2))),
        st_stages=(StageSpec(128, 2), StageSpec(256, 8)),
        attn=None,
        latent_channels=128,
    ),
    "f8x32x32": ModelConfig(
        compression=(8, 32, 32),
        spatial_stages=(StageSpec(32, 2, (1, 2, 2)), StageSpec(64, 2, (1, 2, 2))),
        st_stages=(StageSpec(128, 2), StageSpec(256, 6)),
        attn=AttnStageSpec(512, 8),
        latent_channels=256,
    ),
    "f8x64x64": ModelConfig(
        compression=(8, 64, 64),
        spatial_stages=(StageSpec(32, 2, (1, 2, 2)), StageSpec(64, 2, (1, 2, 2))),
        st_stages=(StageSpec(128, 2), StageSpec(256, 6), StageSpec(512, 8)),
        attn=AttnStageSpec(512, 8, stride=(1, 2, 2)),
        latent_channels=256,
    ),
}


def latent_frames(t: int, f_t: int) -> int:
    """Number of latent frames for a T-frame causal clip: 1 + (T-1)/f_t."""
    if t < 1 or (t != 1 and (t - 1) % f_t != 0):
        raise ValueError(
            f"invalid clip length {t}: need T == 1 or (T-1) % {f_t} == 0"
        )
    return 1 + (t - 1) // f_t


def validate_clip_shape(shape: tuple[int, ...], cfg: ModelConfig) -> None:
    """Check a (B, C, T, H, W) pixel tensor shape against a config."""
    b, c, t, h, w = shape
    f_t, f_h, f_w = cfg.compression
    if c != 3:
        raise ValueError(f"expected 3 input channels, got {c}")
    latent_frames(t, f_t)
    if h % f_h or w % f_w:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by ({f_h}, {f_w})")


@dataclass
class LatentPosterior:
    """Diagonal Gaussian over the latent grid: (B, |z|, T_z, H_z, W_z)."""

    mu: torch.Tensor
    logvar: torch.Tensor

    LOGVAR_RANGE = (-30.0, 20.0)

    def clamped(self) -> "LatentPosterior":
        lo, hi = self.LOGVAR_RANGE
        return LatentPosterior(self.mu, self.logvar.clamp(lo, hi))

    def sample(
        self,
        deterministic: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        if deterministic:
            return self.mu
        eps = torch.empty_like(self.mu).normal_(generator=generator)
        return self.mu + torch.exp(0.5 * self.logvar) * eps


class _BlockStack(nn.Module):
    """Base for stage modules whose blocks register as attributes b0, b1, ...

    Keeps checkpoint tensor names flat: encoder.s{i}.b{j}.<param>.
    """

    def _set_blocks(self, cfg: ModelConfig, width: int, num: int, kind: str) -> None:
        self.num_blocks = num
        for j in range(num):
            if kind == "attn":
                block = TransformerBlock3d(
                    width, AttnConfig(heads=cfg.attn.heads), use_mlp=cfg.attn_mlp
                )
            else:
                block = ResidualBlock(width, variant=kind)
            setattr(self, f"b{j}", block)

    def _run_blocks(self, x: torch.Tensor) -> torch.Tensor:
        for j in range(self.num_blocks):
            x = getattr(self, f"b{j}")(x)
        return x


class EncoderStage(_BlockStack):
    """Strided downsampling conv followed by residual/transformer blocks."""

    def __init__(self, cfg: ModelConfig, in_ch: int, width: int, num: int,
                 stride: Stride, kind: str):
        super().__init__()
        if kind == "2d":
            self.down = Conv2dVideo(in_ch, width, 3, stride=stride[1])
        else:
            self.down = CausalConv3d(in_ch, width, (3, 3, 3), stride)
        self._set_blocks(cfg, width, num, kind)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._run_blocks(self.down(x))


class Upsample(nn.Module):
    """Width-preserving conv into r_t*r_h*r_w channel groups, then shuffle."""

    def __init__(self, width: int, stride: Stride, kind: str):
        super().__init__()
        self.stride = stride
        r = stride[0] * stride[1] * stride[2]
        if kind == "2d":
            self.conv = Conv2dVideo(width, width * r, 3)
        else:
            self.conv = CausalConv3d(width, width * r, (3, 3, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r_t, r_h, r_w = self.stride
        return pixel_shuffle_3d(self.conv(x), r_t, r_h, r_w, causal_trim=True)


class DecoderStage(_BlockStack):
    """Mirror of an encoder stage: fuse, project, blocks, upsample.

    `fuse` is a 1x1x1 projection applied to the first-frame conditioning tap
    before averaging it into the stage input (used only when a condition is
    supplied).
    """

    def __init__(self, cfg: ModelConfig, in_ch: int, tap_ch: int, width: int,
                 num: int, stride: Stride, kind: str):
        super().__init__()
        self.fuse = nn.Conv3d(tap_ch, in_ch, 1)
        self.proj = None
        if in_ch != width:
            if kind == "2d":
                self.proj = Conv2dVideo(in_ch, width, 3)
            else:
                self.proj = CausalConv3d(in_ch, width, (3, 3, 3))
        self._set_blocks(cfg, width, num, kind)
        self.up = Upsample(width, stride, kind)

    def fuse_condition(self, x: torch.Tensor, tap: torch.Tensor, mode: str) -> torch.Tensor:
        cond = self.fuse(tap)
        if mode == "broadcast":
            return (x + cond) / 2
        return torch.cat([(x[:, :, :1] + cond) / 2, x[:, :, 1:]], dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.proj is not None:
            x = self.proj(x)
        return self.up(self._run_blocks(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.num_stages = cfg.num_stages
        self.stem = Conv2dVideo(3, widths[0], 3)
        in_ch = widths[0]
        for i, (spec, width, kind) in enumerate(_stage_plan(cfg)):
            setattr(self, f"s{i}", EncoderStage(cfg, in_ch, width, spec.num_blocks,
                                                spec.stride, kind))
            in_ch = width
        self.head = CausalConv3d(in_ch, 2 * cfg.latent_channels, (3, 3, 3))
        # Start with a near-deterministic posterior (sigma ~ e^-3): large
        # initial sampling noise otherwise dominates early reconstruction.
        z = cfg.latent_channels
        with torch.no_grad():
            self.head.conv.weight[z:].zero_()
            self.head.conv.bias[z:].fill_(-6.0)

    def stages(self):
        return (getattr(self, f"s{i}") for i in range(self.num_stages))

    def forward(
        self, x: torch.Tensor, capture_taps: bool = False
    ) -> tuple[LatentPosterior, Optional[list[torch.Tensor]]]:
        validate_clip_shape(tuple(x.shape), self.cfg)
        taps = [] if capture_taps else None
        x = self.stem(x)
        for stage in self.stages():
            x = stage(x)
            if taps is not None:
                # First temporal slice only: by causality this equals running
                # the encoder on the clip's first frame alone.
                taps.append(x[:, :, :1])
        mu, logvar = self.head(F.silu(pixel_norm(x))).chunk(2, dim=1)
        return LatentPosterior(mu, logvar).clamped(), taps


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        plan = _stage_plan(cfg)
        widths = cfg.stage_widths
        self.stem = CausalConv3d(cfg.latent_channels, widths[-1], (3, 3, 3))
        in_ch = widths[-1]
        self.num_stages = cfg.num_stages
        self.num_2d = sum(1 for _, _, kind in plan if kind == "2d")
        for k, (spec, width, kind) in enumerate(reversed(plan)):
            setattr(self, f"s{k}", DecoderStage(cfg, in_ch, width, width,
                                                spec.num_blocks, spec.stride, kind))
            in_ch = width
        self.head = Conv2dVideo(widths[0], 3, 3)

    def stages(self):
        return (getattr(self, f"s{k}") for k in range(self.num_stages))

    def forward(
        self,
        z: torch.Tensor,
        taps: Optional[list[torch.Tensor]] = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        x = self.stem(z)
        n = self.num_stages
        for k, stage in enumerate(self.stages()):
            if taps is not None:
                x = stage.fuse_condition(x, taps[n - 1 - k], self.cfg.fuse_mode)
            x = stage(x)
        x = self.head(x)
        return x.clamp(0.0, 1.0) if clamp else x

    def forward_sliced(
        self,
        z: torch.Tensor,
        taps: Optional[list[torch.Tensor]] = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        """Run 2D spatial stages one frame at a time; output equals forward."""
        x = self.stem(z)
        n = self.num_stages
        split = n - self.num_2d
        stages = list(self.stages())
        for k, stage in enumerate(stages[:split]):
            if taps is not None:
                x = stage.fuse_condition(x, taps[n - 1 - k], self.cfg.fuse_mode)
            x = stage(x)
        frames = []
        for t in range(x.shape[2]):
            y = x[:, :, t : t + 1]
            for k, stage in enumerate(stages[split:], start=split):
                if taps is not None and t == 0:
                    y = stage.fuse_condition(y, taps[n - 1 - k], self.cfg.fuse_mode)
                y = stage(y)
            frames.append(self.head(y))
        out = torch.cat(frames, dim=2)
        return out.clamp(0.0, 1.0) if clamp else out


def _stage_plan(cfg: ModelConfig) -> list[tuple[StageSpec, int, str]]:
    """(spec, scaled width, kind) for every stage in encoder order."""
    plan: list[tuple[StageSpec, int, str]] = []
    for s in cfg.spatial_stages:
        plan.append((s, cfg.scaled(s.width), "2d"))
    for s in cfg.st_stages:
        plan.append((s, cfg.scaled(s.width), "3d"))
    if cfg.attn is not None:
        a = cfg.attn
        plan.append((StageSpec(a.width, a.num_blocks, a.stride), cfg.scaled(a.width), "attn"))
    return plan


class VideoAutoencoder(nn.Module):
    """Encode/decode surface tying encoder and decoder together."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(
        self, x: torch.Tensor, capture_taps: bool = False
    ) -> tuple[LatentPosterior, Optional[list[torch.Tensor]]]:
        return self.encoder(x, capture_taps=capture_taps)

    def encode_first_frame(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Hierarchical stage features of a single-frame clip (B, 3, 1, H, W)."""
        if image.shape[2] != 1:
            raise ValueError(f"expected a single-frame clip, got T={image.shape[2]}")
        _, taps = self.encoder(image, capture_taps=True)
        return taps

    def decode(
        self,
        z: torch.Tensor,
        taps: Optional[list[torch.Tensor]] = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        self._check_taps(taps)
        return self.decoder(z, taps=taps, clamp=clamp)

    def sliced_decode(
        self,
        z: torch.Tensor,
        taps: Optional[list[torch.Tensor]] = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        self._check_taps(taps)
        return self.decoder.forward_sliced(z, taps=taps, clamp=clamp)

    def _check_taps(self, taps: Optional[list[torch.Tensor]]) -> None:
        if taps is not None and len(taps) != self.cfg.num_stages:
            raise ValueError(
                f"expected {self.cfg.num_stages} condition taps, got {len(taps)}"
            )
