"""Comparison methods: linear-Gaussian (LMMSE), nearest neighbour, deterministic net."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from deproj import container
from deproj.data import PairSet
from deproj.model import Model, ModelConfig
from deproj.tensor import ShapeError


@dataclass
class LinearGaussianModel:
    x_mean: np.ndarray  # [d]
    y_mean: np.ndarray  # [D]
    sigma_x: np.ndarray  # [d, d], unregularized
    sigma_yx: np.ndarray  # [D, d]
    gain: np.ndarray  # [D, d]
    l_post: np.ndarray  # [D, r]
    signal_shape: tuple
    ridge: float

    @property
    def d(self) -> int:
        return self.x_mean.size

    @property
    def D(self) -> int:
        return self.y_mean.size


def _inverse_psd(s: np.ndarray, ridge: float) -> np.ndarray:
    """Inverse of ``s + ridge * trace(s)/d * I`` via eigh; pseudo-inverse when ridge is 0."""
    d = s.shape[0]
    if ridge > 0:
        s = s + ridge * (np.trace(s) / d) * np.eye(d)
    w, v = np.linalg.eigh(s)
    keep = w > 1e-10 * max(w.max(), 0.0) if ridge == 0 else w > 0
    inv_w = np.zeros_like(w)
    inv_w[keep] = 1.0 / w[keep]
    return (v * inv_w) @ v.T


def lmmse_fit(pairs: PairSet, ridge: float = 1e-6) -> LinearGaussianModel:
    """Fit the joint Gaussian of (x, y) and its conditional ``y | x``.

    The posterior covariance ``S_Y - G S_YX^T`` is never formed at D x D. It
    equals ``Yc^T M Yc / N`` with ``M = I - Xc S_X^-1 Xc^T / N``, so it is
    eigendecomposed inside the row space of the centred signals ``Yc``.
    """
    N = len(pairs)
    if N < 2:
        raise ValueError(f"LMMSE needs at least 2 pairs, got {N}")
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    X = pairs.x.reshape(N, -1).astype(np.float64)
    Y = pairs.y.reshape(N, -1).astype(np.float64)
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    sigma_x = Xc.T @ Xc / N
    sigma_yx = Yc.T @ Xc / N
    inv = _inverse_psd(sigma_x, ridge)
    gain = sigma_yx @ inv

    u, s, vt = np.linalg.svd(Yc, full_matrices=False)
    keep = s > s.max() * 1e-12 if s.size and s.max() > 0 else np.zeros(s.shape, bool)
    u, s, vt = u[:, keep], s[keep], vt[keep]
    us = u * s  # Yc = us @ vt
    xu = Xc.T @ us  # [d, r]
    k = (us.T @ us - xu.T @ inv @ xu / N) / N
    k = (k + k.T) / 2
    lam, q = np.linalg.eigh(k)
    lam = np.clip(lam, 0.0, None)[::-1]
    q = q[:, ::-1]
    total = lam.sum()
    if total > 0:
        r = int(np.searchsorted(np.cumsum(lam), (1 - 1e-8) * total) + 1)
        r = min(r, lam.size)
    else:
        r = 0
    l_post = vt.T @ (q[:, :r] * np.sqrt(lam[:r]))
    if r == 0:
        l_post = np.zeros((Y.shape[1], 1))
    return LinearGaussianModel(x_mean, y_mean, sigma_x, sigma_yx, gain, l_post, tuple(pairs.y.shape[1:]), float(ridge))


def lmmse_posterior(model: LinearGaussianModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean (flat, float64) and the shared covariance factor."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != model.d:
        raise ShapeError(f"projection has {x.size} values, model expects {model.d}")
    return model.gain @ (x - model.x_mean) + model.y_mean, model.l_post


def lmmse_sample(model: LinearGaussianModel, x, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` posterior draws ``mean + L_post u`` shaped ``[k, *signal_shape]``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    mean, factor = lmmse_posterior(model, x)
    u = rng.standard_normal((factor.shape[1], k))
    return (mean[:, None] + factor @ u).T.reshape((k,) + model.signal_shape)


_LMMSE_FIELDS = ("x_mean", "y_mean", "sigma_x", "sigma_yx", "gain", "l_post")


def save_lmmse(path, model: LinearGaussianModel) -> None:
    # stored as float32 like every container tensor
    tensors = {f"lmmse/{f}": getattr(model, f) for f in _LMMSE_FIELDS}
    meta = {"kind": "lmmse", "signal_shape": json.dumps(list(model.signal_shape)), "ridge": repr(model.ridge)}
    container.save(path, tensors, meta)


def load_lmmse(path) -> LinearGaussianModel:
    tensors, meta = container.load(path)
    if meta.get("kind") != "lmmse":
        raise container.ContainerError(f"{path} is not an LMMSE model")
    fields = {f: tensors[f"lmmse/{f}"].astype(np.float64) for f in _LMMSE_FIELDS}
    return LinearGaussianModel(
        signal_shape=tuple(json.loads(meta["signal_shape"])), ridge=float(meta["ridge"]), **fields
    )


# ---------------------------------------------------------------- nearest neighbour


def knn_indices(train: PairSet, x, k: int) -> np.ndarray:
    """Indices of the ``k`` stored projections closest to ``x`` in MSE, ties to the lower index."""
    n = len(train)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != train.x.shape[1:]:
        raise ShapeError(f"query shape {x.shape} does not match stored projections {train.x.shape[1:]}")
    diff = train.x.reshape(n, -1).astype(np.float64) - x.reshape(1, -1)
    dist = np.mean(diff * diff, axis=1)
    return np.argsort(dist, kind="stable")[:k]


def knn_select(train: PairSet, x, k: int) -> np.ndarray:
    return train.y[knn_indices(train, x, k)]


# ---------------------------------------------------------------- deterministic network


def det_train(model_cfg: ModelConfig, train_cfg, train_pairs: PairSet, val_pairs=None, seed: int = 0, on_epoch=None):
    from deproj.trainer import train

    return train(replace(model_cfg, variant="det"), train_cfg, train_pairs, val_pairs, seed, on_epoch)


def det_predict(model: Model, x) -> np.ndarray:
    if model.cfg.variant != "det":
        raise ValueError("det_predict needs a model with variant 'det'")
    return model.deproject(np.asarray(x)).data
