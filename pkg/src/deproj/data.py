"""Datasets: IDX ingestion, moving-digit synthesis, projection pairs and splits."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from deproj import container
from deproj.projection import ProjectionSpec, project
from deproj.rng import stream

# ---------------------------------------------------------------- IDX


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class UnsupportedTypeError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


def read_idx(buf: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX stream into float32 values in [0, 1]."""
    if len(buf) < 4:
        raise TruncatedError("truncated: header shorter than 4 bytes")
    if buf[0] != 0 or buf[1] != 0:
        raise BadMagicError(f"bad magic: leading bytes {buf[0]:#04x} {buf[1]:#04x}, expected 0x00 0x00")
    if buf[2] != 0x08:
        raise UnsupportedTypeError(f"unsupported type byte {buf[2]:#04x}; only 0x08 (unsigned byte) is read")
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedError(f"truncated: {ndim} extents declared, header needs {header} bytes, have {len(buf)}")
    shape = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(shape)) if ndim else 1
    payload = len(buf) - header
    if payload < count:
        raise TruncatedError(f"truncated: shape {shape} needs {count} payload bytes, have {payload}")
    if payload > count:
        raise IdxError(f"{payload - count} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=header)
    return (data.astype(np.float32) / np.float32(255)).reshape(shape)


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return read_idx(raw)


def write_idx(arr: np.ndarray) -> bytes:
    """Encode values in [0, 1] as an unsigned-byte IDX stream."""
    arr = np.asarray(arr)
    q = np.floor(np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)
    return bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + q.tobytes()


# ---------------------------------------------------------------- glyphs

_GLYPH_ROWS = [
    ["..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####.."],
    ["...##...", "..###...", ".####...", "...##...", "...##...", "...##...", "...##...", ".######."],
    ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".##.....", ".######."],
    ["..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".....##.", ".##..##.", "..####.."],
    ["....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "....##.."],
    [".######.", ".##.....", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####.."],
    ["..####..", ".##.....", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####.."],
    [".######.", ".....##.", "....##..", "....##..", "...##...", "...##...", "..##....", "..##...."],
    ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", ".##..##.", "..####.."],
    ["..####..", ".##..##.", ".##..##.", ".##..##.", "..#####.", ".....##.", ".....##.", "..####.."],
]


def builtin_glyphs() -> np.ndarray:
    """Ten 8x8 binary digit glyphs, ``[10, 8, 8]`` float32."""
    return np.array([[[c == "#" for c in row] for row in g] for g in _GLYPH_ROWS], dtype=np.float32)


def load_glyphs(path: Optional[str] = None, scale: int = 1) -> np.ndarray:
    glyphs = builtin_glyphs() if not path else read_idx_file(path)
    if glyphs.ndim != 3:
        raise ValueError(f"glyph array must be [N, h, w], got shape {glyphs.shape}")
    if scale > 1:
        glyphs = np.repeat(np.repeat(glyphs, scale, axis=1), scale, axis=2)
    return glyphs


# ---------------------------------------------------------------- datasets


@dataclass
class ClipDataset:
    """Stacked clips ``[N, 1, T, H, W]`` (or ``[N, 1, H, W]`` for images)."""

    clips: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.clips.shape[0]

    @property
    def clip_shape(self) -> tuple:
        return self.clips.shape[1:]

    def subset(self, index) -> "ClipDataset":
        return ClipDataset(self.clips[np.asarray(index, dtype=np.int64)], dict(self.provenance))


def save_dataset(path, dataset: ClipDataset) -> None:
    tensors = {f"clip/{i}": c for i, c in enumerate(dataset.clips)}
    meta = {"kind": "dataset", "provenance": json.dumps(dataset.provenance, sort_keys=True)}
    container.save(path, tensors, meta)


def load_dataset(path) -> ClipDataset:
    tensors, meta = container.load(path)
    clips = [tensors[f"clip/{i}"] for i in range(len(tensors))]
    return ClipDataset(np.stack(clips), json.loads(meta.get("provenance", "{}")))


def dataset_from_idx(path) -> ClipDataset:
    """Images ``[N, H, W]`` from an IDX file as one-channel clips."""
    arr = read_idx_file(path)
    if arr.ndim < 3:
        raise ValueError(f"expected at least [N, H, W], got shape {arr.shape}")
    return ClipDataset(arr[:, None].copy(), {"source": str(path)})


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    num_clips: int = 100
    num_digits: int = 1
    frames: int = 8
    height: int = 32
    width: int = 32
    speed_min: int = 1
    speed_max: int = 3
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def bounce_step(pos: int, vel: int, limit: int) -> tuple[int, int]:
    """Advance one frame on ``[0, limit]``, reflecting elastically at the ends."""
    if limit == 0:
        return 0, vel
    p = pos + vel
    while p < 0 or p > limit:
        if p < 0:
            p = -p
        else:
            p = 2 * limit - p
        vel = -vel
    return p, vel


def _clip(glyphs, cfg: SynthConfig, rng) -> np.ndarray:
    _, h, w = glyphs.shape
    T, H, W = cfg.frames, cfg.height, cfg.width
    out = np.zeros((T, H, W), dtype=np.float32)
    for _ in range(cfg.num_digits):
        g = glyphs[rng.integers(glyphs.shape[0])]
        pos = [int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))]
        vel = [int(rng.integers(cfg.speed_min, cfg.speed_max + 1)) * int(rng.choice((-1, 1))) for _ in range(2)]
        for t in range(T):
            r, c = pos
            np.maximum(out[t, r:r + h, c:c + w], g, out=out[t, r:r + h, c:c + w])
            pos[0], vel[0] = bounce_step(pos[0], vel[0], H - h)
            pos[1], vel[1] = bounce_step(pos[1], vel[1], W - w)
    return out


def synth_moving_digits(glyphs: np.ndarray, cfg: SynthConfig) -> ClipDataset:
    """Clips of digits moving at constant velocity and bouncing off the edges.

    Each clip draws from its own stream keyed by ``(seed, clip index)``.
    Overlapping digits composite by per-pixel maximum.
    """
    glyphs = np.asarray(glyphs, dtype=np.float32)
    _, h, w = glyphs.shape
    if h > cfg.height or w > cfg.width:
        raise ValueError(f"glyph {h}x{w} larger than canvas {cfg.height}x{cfg.width}")
    if cfg.frames < 1 or cfg.num_digits < 1 or cfg.num_clips < 1:
        raise ValueError(f"invalid synthesis config {cfg}")
    if not 0 <= cfg.speed_min <= cfg.speed_max:
        raise ValueError(f"invalid speed range [{cfg.speed_min}, {cfg.speed_max}]")
    clips = np.empty((cfg.num_clips, 1, cfg.frames, cfg.height, cfg.width), dtype=np.float32)
    for i in range(cfg.num_clips):
        clips[i, 0] = _clip(glyphs, cfg, stream(cfg.seed, "data", i))
    return ClipDataset(clips, {"seed": cfg.seed, "config_hash": cfg.digest()})


def translate(clips: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift the last two axes by whole pixels, filling with zeros."""
    out = np.zeros_like(clips)
    H, W = clips.shape[-2:]
    src_r = slice(max(0, -dy), H - max(0, dy))
    dst_r = slice(max(0, dy), H - max(0, -dy))
    src_c = slice(max(0, -dx), W - max(0, dx))
    dst_c = slice(max(0, dx), W - max(0, -dx))
    out[..., dst_r, dst_c] = clips[..., src_r, src_c]
    return out


# ---------------------------------------------------------------- pairs / splits


@dataclass
class PairSet:
    """Projections ``x`` (``[N, *x_shape]``) of signals ``y`` (``[N, *y_shape]``)."""

    x: np.ndarray
    y: np.ndarray
    spec: ProjectionSpec
    noise_std: float = 0.0

    def __len__(self):
        return self.y.shape[0]

    def subset(self, index) -> "PairSet":
        index = np.asarray(index, dtype=np.int64)
        return PairSet(self.x[index], self.y[index], self.spec, self.noise_std)


def make_pairs(dataset: ClipDataset, spec: ProjectionSpec, noise_std: float = 0.0, seed: int = 0) -> PairSet:
    y = np.asarray(dataset.clips, dtype=np.float32)
    x = project(y, spec, batched=True).astype(np.float32)
    if noise_std > 0:
        x = x + stream(seed, "noise").normal(0.0, noise_std, size=x.shape).astype(np.float32)
    return PairSet(x, y, spec, float(noise_std))


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} clips with ratios {tuple(ratios)} leave an empty split ({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def split(dataset: ClipDataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle then contiguous train/val/test partition."""
    n_train, n_val, _ = split_sizes(len(dataset), ratios)
    order = stream(seed, "split").permutation(len(dataset))
    return (
        dataset.subset(order[:n_train]),
        dataset.subset(order[n_train:n_train + n_val]),
        dataset.subset(order[n_train + n_val:]),
    )
