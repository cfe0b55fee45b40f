"""Command-line surface: train / encode / decode / eval / profile.

Exit codes: 0 success, 1 validation error (bad flags or config), 2 runtime
failure.  All stochastic commands are deterministic under --deterministic,
so reruns with identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from .checkpoint import load_checkpoint, read_manifest
from .losses import LossWeights
from .metrics import psnr, ssim
from .model import (
    LatentPosterior,
    ModelConfig,
    PRESETS,
    VideoAutoencoder,
    latent_frames,
)
from .profiling import format_report, profile
from .training import TrainConfig, run_training


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


def _check_keys(section: str, given: dict, allowed: set[str], problems: list[str]) -> None:
    for key in given:
        if key not in allowed:
            problems.append(f"{section}: unknown key {key!r}")


def parse_model_section(section: dict, problems: list[str]) -> ModelConfig | None:
    allowed = {"preset", "width_multiplier", "latent_channels"} | set(
        ModelConfig.__dataclass_fields__
    )
    _check_keys("model", section, allowed, problems)
    try:
        if "preset" in section:
            cfg = PRESETS[section["preset"]]
            overrides = {
                k: v for k, v in section.items() if k != "preset"
            }
            return dataclasses.replace(cfg, **overrides) if overrides else cfg
        return ModelConfig.from_dict(section)
    except KeyError as e:
        problems.append(f"model: unknown preset {e}")
    except (ValueError, TypeError) as e:
        problems.append(f"model: {e}")
    return None


def parse_train_section(section: dict, problems: list[str]) -> TrainConfig | None:
    allowed = set(TrainConfig.__dataclass_fields__)
    _check_keys("train", section, allowed, problems)
    section = dict(section)
    try:
        if "weights" in section:
            w = section["weights"]
            _check_keys("train.weights", w, set(LossWeights.__dataclass_fields__), problems)
            section["weights"] = LossWeights(**w)
        if "betas" in section:
            section["betas"] = tuple(section["betas"])
        if "clip_length_set" in section and section["clip_length_set"] is not None:
            section["clip_length_set"] = tuple(section["clip_length_set"])
        return TrainConfig(**{k: v for k, v in section.items() if k in allowed})
    except (ValueError, TypeError) as e:
        problems.append(f"train: {e}")
    return None


def parse_data_section(section: dict, problems: list[str]) -> dict:
    _check_keys("data", section, {"synthetic", "paths"}, problems)
    if "synthetic" in section:
        spec = section["synthetic"]
        _check_keys(
            "data.synthetic", spec, set(data_mod.SyntheticSpec.__dataclass_fields__), problems
        )
        try:
            section = dict(section, synthetic=data_mod.SyntheticSpec(**spec))
        except (ValueError, TypeError) as e:
            problems.append(f"data.synthetic: {e}")
    return section


def load_run_config(path: str | Path) -> tuple[ModelConfig, TrainConfig, dict, dict]:
    problems: list[str] = []
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError([str(e)])
    _check_keys("config", doc, {"model", "train", "data", "eval"}, problems)
    for required in ("model", "train", "data"):
        if required not in doc:
            problems.append(f"config: missing required section {required!r}")
    model_cfg = parse_model_section(doc.get("model", {}), problems) if "model" in doc else None
    train_cfg = parse_train_section(doc.get("train", {}), problems) if "train" in doc else None
    data_cfg = parse_data_section(doc.get("data", {}), problems) if "data" in doc else {}
    eval_cfg = doc.get("eval", {})
    _check_keys("eval", eval_cfg, {"frames", "size"}, problems)
    if problems:
        raise ConfigError(problems)
    return model_cfg, train_cfg, data_cfg, eval_cfg


def _load_model(ckpt: str | Path) -> VideoAutoencoder:
    manifest = read_manifest(ckpt)
    model = VideoAutoencoder(ModelConfig.from_dict(manifest["model_config"]))
    load_checkpoint(ckpt, model)
    model.eval()
    return model


def _clip_to_tensor(clip: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(clip)).permute(3, 0, 1, 2).float()[None]


def _tensor_to_clip(x: torch.Tensor) -> np.ndarray:
    return x[0].permute(1, 2, 3, 0).detach().cpu().numpy()


def _load_clips(model_cfg: ModelConfig, data_cfg: dict) -> list[np.ndarray]:
    if "synthetic" in data_cfg:
        return data_mod.synth_generate(data_cfg["synthetic"])
    return [data_mod.load_clip(p) for p in data_cfg.get("paths", [])]


def cmd_train(args) -> int:
    model_cfg, train_cfg, data_cfg, _ = load_run_config(args.config)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.manual_seed(train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(Path(args.config).read_text())
    clips = _load_clips(model_cfg, data_cfg)
    if not clips:
        raise ConfigError(["data: no clips configured"])
    run_training(model_cfg, train_cfg, clips, out, resume=args.resume)
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    clip = data_mod.load_clip(getattr(args, "in"))
    x = _clip_to_tensor(clip)
    with torch.no_grad():
        post, taps = model.encode(x, capture_taps=args.save_taps)
    packed = torch.cat([post.mu, post.logvar], dim=1)  # (1, 2|z|, T_z, H_z, W_z)
    data_mod.save_h3v(getattr(args, "out"), _tensor_to_clip(packed))
    if args.save_taps:
        arrays = {f"tap{i}": t[0].numpy() for i, t in enumerate(taps)}
        np.savez(str(getattr(args, "out")) + ".taps.npz", **arrays)
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    packed = data_mod.load_h3v(getattr(args, "in"))
    z_ch = model.cfg.latent_channels
    if packed.shape[-1] != 2 * z_ch:
        raise ConfigError(
            [f"latent file has {packed.shape[-1]} channels, expected {2 * z_ch}"]
        )
    packed_t = _clip_to_tensor(packed)
    post = LatentPosterior(packed_t[:, :z_ch], packed_t[:, z_ch:])
    taps = None
    if args.condition is not None:
        image = data_mod.load_clip(args.condition)
        if image.shape[0] != 1:
            raise ConfigError(
                [f"--condition must be a single-frame file, got T={image.shape[0]}"]
            )
        with torch.no_grad():
            taps = model.encode_first_frame(_clip_to_tensor(image))
    with torch.no_grad():
        xhat = model.decode(post.sample(deterministic=True), taps=taps)
    data_mod.save_h3v(getattr(args, "out"), _tensor_to_clip(xhat))
    return 0


def _prepare_eval_clip(clip: np.ndarray, frames: int, size: int) -> np.ndarray:
    """First `frames` frames, short-side resized to `size`, center-cropped."""
    clip = clip[:frames]
    out = []
    for frame in clip:
        h, w = frame.shape[:2]
        scale = size / min(h, w)
        nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
        img = Image.fromarray(np.clip(frame * 255.0, 0, 255).astype(np.uint8))
        img = img.resize((nw, nh), Image.BILINEAR)
        top, left = (nh - size) // 2, (nw - size) // 2
        out.append(
            np.asarray(img, dtype=np.float32)[top : top + size, left : left + size]
            / 255.0
        )
    return np.stack(out)


def evaluate_clips(
    model,
    clips: dict[str, np.ndarray],
    frames: int = 33,
    size: int = 512,
) -> dict:
    """Reconstruction metrics for named clips; short clips are skipped.

    `model` needs encode/decode; an identity stub works for harness checks.
    """
    entries, skipped = [], []
    for clip_id, clip in clips.items():
        if clip.shape[0] < frames:
            skipped.append(clip_id)
            continue
        x = _prepare_eval_clip(clip, frames, size)
        xt = _clip_to_tensor(x)
        with torch.no_grad():
            post, _ = model.encode(xt)
            xhat = model.decode(post.sample(deterministic=True))
        rec = _tensor_to_clip(xhat)
        p, s = psnr(x, rec, clip_id), ssim(x, rec, clip_id)
        entries.append(
            {
                "clip_id": clip_id,
                "psnr_mean": p.mean,
                "ssim_mean": s.mean,
                "frames": frames,
            }
        )
    report = {
        "clips": entries,
        "skipped": skipped,
        "psnr_mean": float(np.mean([e["psnr_mean"] for e in entries])) if entries else None,
        "ssim_mean": float(np.mean([e["ssim_mean"] for e in entries])) if entries else None,
    }
    return report


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    f_t = model.cfg.compression[0]
    latent_frames(args.frames, f_t)  # validate requested length
    dataset = Path(args.dataset)
    clips: dict[str, np.ndarray] = {}
    for p in sorted(dataset.iterdir()):
        if p.suffix == ".h3v" or p.is_dir():
            clips[p.name] = data_mod.load_clip(p)
    report = evaluate_clips(model, clips, frames=args.frames, size=args.size)
    for name in report["skipped"]:
        print(f"warning: {name} shorter than {args.frames} frames, skipped",
              file=sys.stderr)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_profile(args) -> int:
    model_cfg, _, _, _ = load_run_config(args.config)
    t, h, w = (int(v) for v in args.shape.split(","))
    report = profile(model_cfg, t, h, w)
    print(format_report(report))
    ref_factor = 4 * 8 * 8  # common 4x8x8 baseline VAE
    ratio = report.token_factor / ref_factor
    print(f"latent token reduction vs 4x8x8 baseline: {ratio:g}x")
    print(f"attention score FLOPs reduction vs 4x8x8 baseline: {ratio * ratio:g}x")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcvae")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-phase training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a clip to a latent posterior file")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--save-taps", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a latent file back to pixels")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--condition", default=None)
    p.set_defaults(func=cmd_decode)

    for name in ("eval", "reconstruct"):
        p = sub.add_parser(name, help="reconstruction metrics over a dataset")
        p.add_argument("--model", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--frames", type=int, default=33)
        p.add_argument("--size", type=int, default=512)
        p.add_argument("--out", default=None)
        p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="analytical params/FLOPs/tokens table")
    p.add_argument("--config", required=True)
    p.add_argument("--shape", default="33,512,512")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
