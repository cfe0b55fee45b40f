"""Checkpoint archive: flat named tensors plus a JSON manifest.

A checkpoint is a directory holding manifest.json (model config, iteration)
and tensors.npz with keys "model.<param>", "optim.<param>.{exp_avg,
exp_avg_sq,step}" and "rng.torch".  Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig

FORMAT = "hcvae-checkpoint-v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None,
    iteration: int,
    generator: torch.Generator | None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        for idx, st in optimizer.state_dict()["state"].items():
            pname = names[idx]
            arrays[f"optim.{pname}.exp_avg"] = st["exp_avg"].cpu().numpy()
            arrays[f"optim.{pname}.exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            arrays[f"optim.{pname}.step"] = np.asarray(float(st["step"]))
    if generator is not None:
        arrays["rng.torch"] = generator.get_state().numpy()
    np.savez(path / "tensors.npz", **arrays)
    manifest = {
        "format": FORMAT,
        "iteration": iteration,
        "model_config": model.cfg.to_dict(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise CheckpointError(f"{path}: missing manifest.json")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unexpected format {manifest.get('format')!r}")
    return manifest


def check_config(manifest: dict, expected: ModelConfig) -> ModelConfig:
    """Raise with the first differing key if configs do not match."""
    stored = ModelConfig.from_dict(manifest["model_config"])
    a, b = stored.to_dict(), expected.to_dict()
    for key in a:
        if a[key] != b[key]:
            raise CheckpointError(
                f"checkpoint ModelConfig mismatch at {key!r}: "
                f"checkpoint={a[key]!r} expected={b[key]!r}"
            )
    return stored


def load_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
) -> int:
    """Restore weights (and optionally optimizer/rng) in place; returns iteration."""
    path = Path(path)
    manifest = read_manifest(path)
    check_config(manifest, model.cfg)
    with np.load(path / "tensors.npz") as arrays:
        state = {
            k[len("model.") :]: torch.from_numpy(arrays[k].copy())
            for k in arrays.files
            if k.startswith("model.")
        }
        model.load_state_dict(state, strict=True)
        if optimizer is not None:
            _load_optimizer(arrays, model, optimizer)
        if generator is not None and "rng.torch" in arrays.files:
            generator.set_state(torch.from_numpy(arrays["rng.torch"].copy()))
    return int(manifest["iteration"])


def _load_optimizer(arrays, model, optimizer) -> None:
    names = [n for n, _ in model.named_parameters()]
    sd = optimizer.state_dict()
    state = {}
    for idx, pname in enumerate(names):
        key = f"optim.{pname}.exp_avg"
        if key not in arrays.files:
            continue
        state[idx] = {
            "step": torch.tensor(float(arrays[f"optim.{pname}.step"])),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim.{pname}.exp_avg_sq"].copy()),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)
