"""Conditional latent-variable deprojection network.

Three sub-networks share one parameter dict:

* ``post/*``  posterior encoder q(z | y), strided convs over the full signal
* ``prior/*`` prior encoder p(z | x), strided convs over the projection
* ``dec/*``   deprojection g(x, z): a UNet over x with z injected at the
  coarsest level, expanded to ``T * F`` channels, reshaped to insert the
  collapsed axis and refined by convs of one more spatial rank.

The ``det`` variant drops the z branch and the KL term.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from deproj.projection import ProjectionSpec, projected_shape
from deproj.tensor import ShapeError, Tensor, ops
from deproj.tensor.ops import conv_output_shape

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
# The output conv starts at zero weights and this bias, i.e. a dark
# background (sigmoid(-3) ~ 0.05). Starting at 0.5 grey lets the first ADAM
# steps inflate every layer toward a saturated, all-black output.
OUT_BIAS_INIT = -3.0


@dataclass(frozen=True)
class ModelConfig:
    signal_shape: tuple = (1, 8, 32, 32)
    axis: int = 0
    latent_dim: int = 10
    enc_channels: tuple = (8, 16, 16)
    dec_channels: tuple = (8, 16, 16)
    z_channels: int = 4
    features: int = 2
    refine_layers: int = 2
    slope: float = 0.2
    beta: float = 1.0
    variant: str = "cvae"
    kernel: int = 3
    x_skip: bool = True

    def __post_init__(self):
        for name in ("signal_shape", "enc_channels", "dec_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        nd = len(self.signal_shape) - 1
        if not 2 <= nd <= 3:
            raise ValueError(f"signal needs 2 or 3 spatial axes, got shape {self.signal_shape}")
        if not 0 <= self.axis < nd:
            raise ValueError(f"axis {self.axis} out of range for signal {self.signal_shape}")
        if self.latent_dim < 1 or not self.enc_channels or not self.dec_channels or self.refine_layers < 1:
            raise ValueError("latent_dim, channel ladders and refine_layers must be non-empty / positive")
        if self.variant not in ("cvae", "det"):
            raise ValueError(f"unknown variant {self.variant!r}")
        step = 2 ** (len(self.dec_channels) - 1)
        if any(s % step for s in self.x_shape[1:]):
            raise ValueError(f"projection extents {self.x_shape[1:]} must be divisible by {step} for the decoder ladder")

    @property
    def x_shape(self) -> tuple:
        return projected_shape(self.signal_shape, ProjectionSpec(self.axis))

    @property
    def collapsed(self) -> int:
        return self.signal_shape[1 + self.axis]

    def to_dict(self) -> dict:
        return asdict(self)


def _coarse_shape(spatial, n_layers, k):
    for _ in range(n_layers):
        spatial = conv_output_shape(spatial, (k,) * len(spatial), (2,) * len(spatial), (k // 2,) * len(spatial))
    return spatial


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered parameter names and shapes for ``cfg``."""
    k = cfg.kernel
    C = cfg.signal_shape[0]
    L = cfg.latent_dim
    shapes = {}

    def conv(name, cin, cout, nd):
        shapes[f"{name}/w"] = (cout, cin) + (k,) * nd
        shapes[f"{name}/b"] = (cout,)

    def dense(name, nin, nout):
        shapes[f"{name}/w"] = (nout, nin)
        shapes[f"{name}/b"] = (nout,)

    encoders = [("post", cfg.signal_shape), ("prior", cfg.x_shape)] if cfg.variant == "cvae" else []
    for prefix, shape in encoders:
        cin = shape[0]
        for i, ch in enumerate(cfg.enc_channels):
            conv(f"{prefix}/conv{i}", cin, ch, len(shape) - 1)
            cin = ch
        flat = cin * int(np.prod(_coarse_shape(shape[1:], len(cfg.enc_channels), k)))
        dense(f"{prefix}/mean", flat, L)
        dense(f"{prefix}/logvar", flat, L)

    xs = cfg.x_shape
    nd = len(xs) - 1
    dec = cfg.dec_channels
    cin = xs[0]
    for i, ch in enumerate(dec):
        conv(f"dec/enc{i}", cin, ch, nd)
        cin = ch
    coarse = tuple(s // 2 ** (len(dec) - 1) for s in xs[1:])
    if cfg.variant == "cvae":
        dense("dec/z", L, cfg.z_channels * int(np.prod(coarse)))
        cin += cfg.z_channels
    conv("dec/bottleneck", cin, dec[-1], nd)
    for i in range(len(dec) - 1, 0, -1):
        conv(f"dec/up{i}a", dec[i], dec[i - 1], nd)
        conv(f"dec/up{i}b", 2 * dec[i - 1], dec[i - 1], nd)
    conv("dec/expand", dec[0], cfg.collapsed * cfg.features, nd)
    cin = cfg.features + (xs[0] if cfg.x_skip else 0)
    for j in range(cfg.refine_layers - 1):
        conv(f"dec/refine{j}", cin, cfg.features, nd + 1)
        cin = cfg.features
    conv("dec/out", cin, C, nd + 1)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Weights uniform in +-sqrt(6 / fan_in), biases zero, except the output conv."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "dec/out/b":
            data = np.full(shape, OUT_BIAS_INIT)
        elif name.endswith("/b") or name == "dec/out/w":
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------- distributions


@dataclass
class DiagonalGaussian:
    """Batched diagonal Gaussian; ``log_var`` is clamped to [-10, 10] on construction."""

    mean: Tensor
    log_var: Tensor = field(default=None)

    def __post_init__(self):
        if self.log_var is None:
            self.log_var = Tensor(np.zeros(self.mean.shape, dtype=self.mean.dtype))
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")
        self.log_var = ops.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_var.data / 2)


def reparam_sample(g: DiagonalGaussian, eps) -> Tensor:
    """``mean + exp(log_var / 2) * eps``, differentiable in mean and log_var."""
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=g.mean.dtype))
    if eps.shape != g.mean.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match latent shape {g.mean.shape}")
    return ops.add(g.mean, ops.mul(ops.exp(ops.mul(g.log_var, 0.5)), eps))


def kl_diag(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) summed over the last axis (one value per batch row)."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"KL between dimensions {q.mean.shape} and {p.mean.shape}")
    diff = ops.sub(q.mean, p.mean)
    d = ops.sub(q.log_var, p.log_var)
    # e^d - 1 - d and the scaled squared shift are each >= 0; the floor only removes rounding residue
    spread = ops.sub(ops.sub(ops.exp(d), 1.0), d)
    shift = ops.mul(ops.square(diff), ops.exp(ops.neg(p.log_var)))
    terms = ops.clamp(ops.mul(ops.add(spread, shift), 0.5), 0.0, np.inf)
    return ops.sum(terms, axis=-1)


class LossTerms(NamedTuple):
    total: Tensor
    recon: Tensor
    kl: Tensor


# ---------------------------------------------------------------- network


class Model:
    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        expected = param_shapes(cfg)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise ValueError(f"parameter names do not match config: {sorted(missing)[:4]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> "Model":
        return cls(cfg, init_params(cfg, rng, dtype))

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _tensor(self, arr, shape, what):
        t = arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr, dtype=self.dtype))
        if t.shape[1:] != tuple(shape):
            raise ShapeError(f"{what} shape {t.shape[1:]} does not match configured {tuple(shape)}")
        return t

    def _conv(self, h, name, stride=1):
        k = self.cfg.kernel
        return ops.conv(h, self.params[f"{name}/w"], self.params[f"{name}/b"], stride=stride, padding=k // 2)

    def _dense(self, h, name):
        return ops.dense(h, self.params[f"{name}/w"], self.params[f"{name}/b"])

    def _encode(self, prefix, h):
        slope = self.cfg.slope
        for i in range(len(self.cfg.enc_channels)):
            h = ops.leaky_relu(self._conv(h, f"{prefix}/conv{i}", stride=2), slope)
        flat = ops.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        return DiagonalGaussian(self._dense(flat, f"{prefix}/mean"), self._dense(flat, f"{prefix}/logvar"))

    def posterior_encode(self, y) -> DiagonalGaussian:
        if self.cfg.variant != "cvae":
            raise ValueError("the det variant has no posterior encoder")
        return self._encode("post", self._tensor(y, self.cfg.signal_shape, "signal"))

    def prior_encode(self, x) -> DiagonalGaussian:
        if self.cfg.variant != "cvae":
            raise ValueError("the det variant has no prior encoder")
        return self._encode("prior", self._tensor(x, self.cfg.x_shape, "projection"))

    def deproject(self, x, z=None) -> Tensor:
        cfg = self.cfg
        slope = cfg.slope
        x = self._tensor(x, cfg.x_shape, "projection")
        B = x.shape[0]
        h = x
        skips = []
        for i in range(len(cfg.dec_channels)):
            h = ops.leaky_relu(self._conv(h, f"dec/enc{i}", stride=1 if i == 0 else 2), slope)
            skips.append(h)
        if cfg.variant == "cvae":
            if z is None:
                raise ValueError("cvae deprojection needs a latent z")
            z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
            if z.shape != (B, cfg.latent_dim):
                raise ShapeError(f"latent shape {z.shape} does not match ({B}, {cfg.latent_dim})")
            zimg = ops.leaky_relu(self._dense(z, "dec/z"), slope)
            zimg = ops.reshape(zimg, (B, cfg.z_channels) + h.shape[2:])
            h = ops.concat([h, zimg], axis=1)
        h = ops.leaky_relu(self._conv(h, "dec/bottleneck"), slope)
        for i in range(len(cfg.dec_channels) - 1, 0, -1):
            h = ops.upsample(h, 2)
            h = ops.leaky_relu(self._conv(h, f"dec/up{i}a"), slope)
            h = ops.concat([h, skips[i - 1]], axis=1)
            h = ops.leaky_relu(self._conv(h, f"dec/up{i}b"), slope)
        h = ops.leaky_relu(self._conv(h, "dec/expand"), slope)
        # channel index f * T + t  ->  [B, F, T, *x_spatial]
        h = ops.reshape(h, (B, cfg.features, cfg.collapsed) + h.shape[2:])
        if cfg.axis != 0:
            nd = len(cfg.signal_shape) - 1
            spatial = list(range(3, 2 + nd))
            spatial.insert(cfg.axis, 2)
            h = ops.transpose(h, [0, 1] + spatial)
        if cfg.x_skip:
            # x repeated along the collapsed axis joins the refine stack
            ax = 2 + cfg.axis
            xr = ops.reshape(x, x.shape[:ax] + (1,) + x.shape[ax:])
            h = ops.concat([h, ops.concat([xr] * cfg.collapsed, axis=ax)], axis=1)
        for j in range(cfg.refine_layers - 1):
            h = ops.leaky_relu(self._conv(h, f"dec/refine{j}"), slope)
        return ops.sigmoid(self._conv(h, "dec/out"))

    def loss(self, x, y, eps=None, beta: Optional[float] = None, z=None) -> LossTerms:
        """``recon + beta * kl`` with recon the per-element mean squared error.

        ``eps`` drives the reparameterized draw from q(z | y); passing a
        precomputed ``z`` instead skips the draw (the KL term is unchanged).
        """
        beta = self.cfg.beta if beta is None else beta
        y = self._tensor(y, self.cfg.signal_shape, "signal")
        if self.cfg.variant == "det":
            recon = ops.mse(self.deproject(x), y)
            zero = Tensor(np.zeros((), dtype=self.dtype))
            return LossTerms(recon, recon, zero)
        q = self.posterior_encode(y)
        p = self.prior_encode(x)
        if z is None:
            if eps is None:
                raise ValueError("need eps or z")
            z = reparam_sample(q, eps)
        recon = ops.mse(self.deproject(x, z), y)
        kl = ops.mean(kl_diag(q, p))
        total = ops.add(recon, ops.mul(kl, float(beta)))
        return LossTerms(total, recon, kl)

    def sample(self, x, eps) -> np.ndarray:
        """Deprojections with z drawn from the prior p(z | x) using noise ``eps``."""
        if self.cfg.variant == "det":
            return self.deproject(x).data
        p = self.prior_encode(x)
        return self.deproject(x, reparam_sample(p, eps)).data
