"""Analytical parameter / multiply-accumulate profiling.

Counts are derived from the config alone, without instantiating weights, and
match the instantiated network parameter-for-parameter (asserted in tests).
Attention score cost is counted as 2 * tokens^2 * width (QK^T plus attn @ V)
on top of the linear projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig, _stage_plan, latent_frames


@dataclass
class StageProfile:
    name: str
    width: int
    params: int
    macs: int
    out_shape: tuple[int, int, int]  # (T, H, W)


@dataclass
class ProfileReport:
    config_name: str
    input_shape: tuple[int, int, int]
    stages: list[StageProfile] = field(default_factory=list)
    total_params: int = 0
    total_macs: int = 0
    latent_shape: tuple[int, int, int, int] = (0, 0, 0, 0)  # (T_z, H_z, W_z, |z|)
    bottleneck_tokens: int = 0
    token_factor: int = 0
    attention_score_macs: int = 0

    def add(self, stage: StageProfile) -> None:
        self.stages.append(stage)
        self.total_params += stage.params
        self.total_macs += stage.macs


def _conv2d(cin: int, cout: int, k: int = 3) -> int:
    return k * k * cin * cout + cout


def _conv3d(cin: int, cout: int, k: int = 3) -> int:
    return k * k * k * cin * cout + cout


def _res_block(width: int, kind: str) -> int:
    per = _conv2d(width, width) if kind == "2d" else _conv3d(width, width)
    return 2 * per


def _attn_block(width: int, heads: int, use_mlp: bool) -> int:
    head_dim = width // heads
    p = (3 * width * width + 3 * width) + (width * width + width) + 2 * head_dim
    if use_mlp:
        hidden = 4 * width
        p += (width * hidden + hidden) + (hidden * width + width)
    return p


def _attn_block_macs(n_tokens: int, width: int, use_mlp: bool) -> int:
    macs = 4 * n_tokens * width * width  # qkv + output projection
    macs += 2 * n_tokens * n_tokens * width  # scores and weighted values
    if use_mlp:
        macs += 8 * n_tokens * width * width
    return macs


def _down_t(t: int, s: int) -> int:
    return (t - 1) // s + 1


def profile(cfg: ModelConfig, t: int, h: int, w: int, name: str = "") -> ProfileReport:
    """Deterministic per-stage parameter and MAC report for one input shape."""
    f_t, f_h, f_w = cfg.compression
    latent_frames(t, f_t)
    report = ProfileReport(config_name=name, input_shape=(t, h, w))
    report.token_factor = f_t * f_h * f_w
    plan = _stage_plan(cfg)
    widths = [wd for _, wd, _ in plan]
    z = cfg.latent_channels

    # --- encoder ---
    ct, ch, cw = t, h, w
    report.add(StageProfile("encoder.stem", widths[0], _conv2d(3, widths[0]),
                            9 * 3 * widths[0] * ct * ch * cw, (ct, ch, cw)))
    in_ch = widths[0]
    for i, (spec, width, kind) in enumerate(plan):
        s_t, s_h, s_w = spec.stride
        ct, ch, cw = _down_t(ct, s_t), ch // s_h, cw // s_w
        elems = ct * ch * cw
        kprod = 9 if kind == "2d" else 27
        params = (kprod * in_ch * width + width)
        macs = kprod * in_ch * width * elems
        if kind == "attn":
            per = _attn_block(width, cfg.attn.heads, cfg.attn_mlp)
            params += spec.num_blocks * per
            macs += spec.num_blocks * _attn_block_macs(elems, width, cfg.attn_mlp)
            report.attention_score_macs += spec.num_blocks * 2 * elems * elems * width
        else:
            params += spec.num_blocks * _res_block(width, kind)
            macs += spec.num_blocks * 2 * kprod * width * width * elems
        report.add(StageProfile(f"encoder.s{i}", width, params, macs, (ct, ch, cw)))
        in_ch = width
    report.add(StageProfile("encoder.head", 2 * z, _conv3d(in_ch, 2 * z),
                            27 * in_ch * 2 * z * ct * ch * cw, (ct, ch, cw)))
    report.latent_shape = (ct, ch, cw, z)
    report.bottleneck_tokens = ct * ch * cw

    # --- decoder ---
    report.add(StageProfile("decoder.stem", widths[-1], _conv3d(z, widths[-1]),
                            27 * z * widths[-1] * ct * ch * cw, (ct, ch, cw)))
    in_ch = widths[-1]
    for k, (spec, width, kind) in enumerate(reversed(plan)):
        s_t, s_h, s_w = spec.stride
        elems = ct * ch * cw
        kprod = 9 if kind == "2d" else 27
        params = width * in_ch + in_ch  # 1x1x1 tap fusion projection
        macs = 0
        if in_ch != width:
            params += kprod * in_ch * width + width
            macs += kprod * in_ch * width * elems
        if kind == "attn":
            per = _attn_block(width, cfg.attn.heads, cfg.attn_mlp)
            params += spec.num_blocks * per
            macs += spec.num_blocks * _attn_block_macs(elems, width, cfg.attn_mlp)
            report.attention_score_macs += spec.num_blocks * 2 * elems * elems * width
        else:
            params += spec.num_blocks * _res_block(width, kind)
            macs += spec.num_blocks * 2 * kprod * width * width * elems
        r = s_t * s_h * s_w
        params += kprod * width * width * r + width * r
        macs += kprod * width * width * r * elems
        ct = s_t * ct - (s_t - 1)
        ch, cw = ch * s_h, cw * s_w
        report.add(StageProfile(f"decoder.s{k}", width, params, macs, (ct, ch, cw)))
        in_ch = width
    report.add(StageProfile("decoder.head", 3, _conv2d(widths[0], 3),
                            9 * widths[0] * 3 * ct * ch * cw, (ct, ch, cw)))
    return report


def token_ratio(a: ProfileReport, b: ProfileReport) -> float:
    """Bottleneck token reduction of config a relative to config b on equal input."""
    return a.token_factor / b.token_factor


def attention_flops_ratio(a: ProfileReport, b: ProfileReport) -> float:
    """Score-computation FLOPs reduction: quadratic in the token ratio."""
    r = token_ratio(a, b)
    return r * r


def format_report(report: ProfileReport) -> str:
    lines = [
        f"input (T, H, W) = {report.input_shape}",
        f"latent shape (T_z, H_z, W_z, |z|) = {report.latent_shape}",
        f"bottleneck tokens = {report.bottleneck_tokens}"
        f" (compression token factor {report.token_factor})",
        f"{'stage':<16}{'width':>8}{'params':>14}{'MACs':>18}  out (T, H, W)",
    ]
    for s in report.stages:
        lines.append(
            f"{s.name:<16}{s.width:>8}{s.params:>14,}{s.macs:>18,}  {s.out_shape}"
        )
    lines.append(
        f"{'total':<16}{'':>8}{report.total_params:>14,}{report.total_macs:>18,}"
    )
    return "\n".join(lines)
