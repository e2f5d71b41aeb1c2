"""PSNR metrics, the best-of-k protocol, CSV curves and PGM montages."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from deproj.baselines import LinearGaussianModel, knn_indices, lmmse_sample
from deproj.data import PairSet
from deproj.model import Model
from deproj.projection import project
from deproj.rng import stream
from deproj.tensor import ShapeError

PSNR_CAP = 100.0
METHODS = ("cvae", "det", "knn", "lmmse")


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr of shapes {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / mse)


# A sampler maps (x batch [n, *x_shape], test indices [n], count) to
# candidates [n, count, *signal_shape]. Randomness must be keyed by the test
# index so batching cannot change results.
Sampler = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def cvae_sampler(model: Model, seed: int) -> Sampler:
    L = model.cfg.latent_dim

    def run(x, index, count):
        eps = np.concatenate([stream(seed, "eval", int(i)).standard_normal((count, L)) for i in index])
        xs = np.repeat(x, count, axis=0)
        out = model.sample(xs, eps.astype(model.dtype))
        return out.reshape((len(index), count) + out.shape[1:])

    return run


def det_sampler(model: Model) -> Sampler:
    def run(x, index, count):
        out = model.deproject(x).data
        return np.repeat(out[:, None], count, axis=1)

    return run


def knn_sampler(train: PairSet) -> Sampler:
    def run(x, index, count):
        return np.stack([train.y[knn_indices(train, xi, count)] for xi in x])

    return run


def lmmse_sampler(lm: LinearGaussianModel, seed: int) -> Sampler:
    def run(x, index, count):
        return np.stack([lmmse_sample(lm, xi, count, stream(seed, "eval", int(i))) for xi, i in zip(x, index)])

    return run


@dataclass
class EvalCurve:
    method: str
    seed: int
    ks: list
    best_signal: list
    reprojection: list
    per_example_best: np.ndarray = field(default=None, repr=False)  # [n_test, len(ks)]

    def rows(self):
        return list(zip(self.ks, self.best_signal, self.reprojection))


def best_of_k(method: str, sampler: Sampler, pairs: PairSet, ks: Sequence[int], seed: int = 0, batch: int = 8) -> EvalCurve:
    """Best-of-k signal PSNR and mean reprojection PSNR over ``pairs``.

    ``max(ks)`` candidates are drawn once per test example and every k uses
    the first k of them.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    ks = [int(k) for k in ks]
    if not ks or ks != sorted(ks) or ks[0] < 1 or len(set(ks)) != len(ks):
        raise ValueError(f"k list must be strictly ascending positive integers, got {ks}")
    kmax = ks[-1]
    n = len(pairs)
    best = np.empty((n, len(ks)))
    reproj = np.empty((n, len(ks)))
    for a in range(0, n, batch):
        index = np.arange(a, min(n, a + batch))
        cands = sampler(pairs.x[index], index, kmax)
        for row, i in enumerate(index):
            y, x = pairs.y[i], pairs.x[i]
            sig = np.array([psnr(c, y) for c in cands[row]])
            rep = np.array([psnr(project(c, pairs.spec), x) for c in cands[row]])
            for j, k in enumerate(ks):
                best[i, j] = sig[:k].max()
                reproj[i, j] = rep[:k].mean()
    return EvalCurve(method, seed, ks, best.mean(axis=0).tolist(), reproj.mean(axis=0).tolist(), best)


CSV_HEADER = ("k", "best_signal_psnr", "mean_reprojection_psnr")


def emit_csv(curve: EvalCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k, s, r in curve.rows():
            w.writerow([k, f"{s:.6f}", f"{r:.6f}"])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [(int(k), float(s), float(r)) for k, s, r in reader]


def montage(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Tile ``rows`` (each ``[..., T, H, W]`` or ``[H, W]``) into one image.

    Frames of a row run left to right, rows run top to bottom.
    """
    strips = []
    for r in rows:
        r = np.asarray(r)
        if r.ndim < 2:
            raise ShapeError(f"montage row needs at least 2 axes, got shape {r.shape}")
        frames = r.reshape((-1,) + r.shape[-2:])
        strips.append(np.concatenate(list(frames), axis=1))
    widths = {s.shape[1] for s in strips}
    if len(widths) != 1:
        raise ShapeError(f"montage rows have different widths {sorted(widths)}")
    return np.concatenate(strips, axis=0)


def pgm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"PGM needs a 2D image, got shape {image.shape}")
    h, w = image.shape
    payload = np.floor(np.clip(image, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + payload.tobytes()


def emit_montage(rows: Sequence[np.ndarray], path) -> None:
    data = pgm_bytes(montage(rows))
    with open(path, "wb") as fh:
        fh.write(data)
