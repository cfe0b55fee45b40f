"""Clip ingestion, the .h3v raw container, and synthetic video generation.

A clip is a (T, H, W, C) float32 numpy array with values in [0, 1].

.h3v layout: magic b"H3V1", then five little-endian uint32 fields
(T, H, W, C, dtype code) followed by frame-major, row-major pixel data.
dtype code 0 is 8-bit unsigned (values are k/255 after load), code 1 is
32-bit IEEE-754 (lossless round trip).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"H3V1"
_HEADER = struct.Struct("<4s5I")
DTYPE_U8 = 0
DTYPE_F32 = 1


def save_h3v(path: str | Path, clip: np.ndarray, dtype_code: int = DTYPE_F32) -> None:
    """Write a (T, H, W, C) clip; u8 payloads are rounded from [0, 1]."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValueError(f"expected a (T, H, W, C) array, got shape {clip.shape}")
    t, h, w, c = clip.shape
    if dtype_code == DTYPE_U8:
        payload = np.clip(np.rint(clip * 255.0), 0, 255).astype(np.uint8)
    elif dtype_code == DTYPE_F32:
        payload = clip.astype(np.float32)
    else:
        raise ValueError(f"unknown dtype code {dtype_code}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, t, h, w, c, dtype_code))
        f.write(payload.tobytes())


def load_h3v(path: str | Path) -> np.ndarray:
    """Read an .h3v file back to float32 in [0, 1] (u8 values become k/255)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an .h3v file (bad magic)")
    magic, t, h, w, c, code = _HEADER.unpack_from(raw)
    itemsize = {DTYPE_U8: 1, DTYPE_F32: 4}.get(code)
    if itemsize is None:
        raise ValueError(f"{path}: unknown dtype code {code}")
    expected = t * h * w * c * itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    if code == DTYPE_U8:
        arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    else:
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return arr.reshape(t, h, w, c)


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def load_clip(path: str | Path) -> np.ndarray:
    """Load a clip from an .h3v file or a directory of image frames.

    Frame files in a directory are ordered lexicographically and must share a
    single resolution.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"{path}: no image frames found")
        frames = []
        for p in files:
            frame = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
            if frames and frame.shape != frames[0].shape:
                raise ValueError(
                    f"{p}: frame shape {frame.shape} differs from {frames[0].shape}"
                )
            frames.append(frame)
        return np.stack(frames)
    return load_h3v(path)


def save_clip(path: str | Path, clip: np.ndarray, dtype_code: int = DTYPE_F32) -> None:
    save_h3v(path, clip, dtype_code)


MOTIFS = ("moving-square", "gradient-pan", "color-noise")


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic synthetic clip set; same spec means bit-identical clips."""

    seed: int
    num_clips: int
    t: int
    h: int
    w: int
    motif: str = "moving-square"
    velocity: int = 2  # pixels per frame

    def __post_init__(self):
        if self.motif not in MOTIFS:
            raise ValueError(f"unknown motif {self.motif!r}; choose from {MOTIFS}")


def synth_generate(spec: SyntheticSpec) -> list[np.ndarray]:
    """Generate clips with integer-only pixel placement for reproducibility."""
    rng = np.random.RandomState(spec.seed)
    return [_make_clip(spec, rng) for _ in range(spec.num_clips)]


def _make_clip(spec: SyntheticSpec, rng: np.random.RandomState) -> np.ndarray:
    t, h, w = spec.t, spec.h, spec.w
    frames = np.zeros((t, h, w, 3), dtype=np.uint8)
    if spec.motif == "moving-square":
        side = max(4, min(h, w) // 4)
        x0 = int(rng.randint(0, w))
        y0 = int(rng.randint(0, h))
        bg = rng.randint(0, 64, size=3).astype(np.uint8)
        fg = rng.randint(160, 256, size=3).astype(np.uint8)
        frames[:] = bg
        for ti in range(t):
            x = (x0 + spec.velocity * ti) % w
            xs = (np.arange(x, x + side) % w)
            ys = (np.arange(y0, y0 + side) % h)
            frames[np.ix_([ti], ys, xs)] = fg
    elif spec.motif == "gradient-pan":
        phase = int(rng.randint(0, 256))
        col = np.arange(w, dtype=np.int64)
        row = np.arange(h, dtype=np.int64)[:, None]
        for ti in range(t):
            shift = phase + spec.velocity * ti
            frames[ti, :, :, 0] = ((col[None, :] + shift) % 256).astype(np.uint8)
            frames[ti, :, :, 1] = ((row + 2 * shift) % 256).astype(np.uint8)
            frames[ti, :, :, 2] = ((col[None, :] + row - shift) % 256).astype(np.uint8)
    else:  # color-noise
        frames = rng.randint(0, 256, size=(t, h, w, 3)).astype(np.uint8)
    return frames.astype(np.float32) / 255.0


def valid_lengths(f_t: int, max_t: int) -> list[int]:
    """Clip lengths usable with a temporal factor f_t: {1} u {1 + f_t*k}."""
    if max_t < 1:
        raise ValueError(f"max_t must be >= 1, got {max_t}")
    return [1] + [n for n in range(1 + f_t, max_t + 1, f_t)]


def sample_clip_length(rng: np.random.RandomState, f_t: int, max_t: int) -> int:
    """Uniform draw over the valid causal clip lengths up to max_t."""
    lengths = valid_lengths(f_t, max_t)
    return int(lengths[rng.randint(len(lengths))])
