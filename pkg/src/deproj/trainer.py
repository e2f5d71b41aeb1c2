"""ADAM training of the deprojection objective, beta search and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from deproj import container
from deproj.data import PairSet, translate
from deproj.model import Model, ModelConfig
from deproj.projection import project
from deproj.rng import stream
from deproj.tensor import ShapeError, Tape, backward

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    max_steps: int = 0
    augment_shift: int = 0
    threads: int = 1
    probe_steps: int = 200
    beta_start: float = 1.0
    beta_lower: float = 5.0
    beta_upper: float = 15.0
    max_probes: int = 12
    eval_batch: int = 64


# ---------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected ADAM update of ``params`` (name -> Tensor) in place.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    adam: AdamState
    seeds: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def model(self) -> Model:
        from deproj.tensor import Tensor

        return Model(self.model_config, {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()})


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    for k in ckpt.params:
        if k in ckpt.adam.m:
            tensors[f"adam/m/{k}"] = ckpt.adam.m[k]
            tensors[f"adam/v/{k}"] = ckpt.adam.v[k]
    meta = {
        "kind": "checkpoint",
        "model_config": _json(ckpt.model_config.to_dict()),
        "adam": _json(ckpt.adam.hyper()),
        "seeds": _json(ckpt.seeds),
        "history": _json(ckpt.history),
    }
    for k, v in ckpt.meta.items():
        meta[f"extra.{k}"] = str(v)
    container.save(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = container.load(path)
    if meta.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path} is not a model checkpoint")
    cfg_dict = json.loads(meta["model_config"])
    cfg = ModelConfig(**cfg_dict)
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    adam = AdamState(**json.loads(meta["adam"]))
    adam.m = {k[len("adam/m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam/m/")}
    adam.v = {k[len("adam/v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam/v/")}
    extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
    return Checkpoint(cfg, params, adam, json.loads(meta["seeds"]), json.loads(meta["history"]), extra)


def write_history_csv(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "total", "recon", "kl"])
        for row in history:
            w.writerow([row["epoch"], row["split"], f"{row['total']:.6f}", f"{row['recon']:.6f}", f"{row['kl']:.6f}"])


# ---------------------------------------------------------------- training


def _batch_grads(model: Model, x, y, eps, beta):
    with Tape() as tape:
        terms = model.loss(x, y, eps, beta)
    grads = backward(tape, terms.total)
    return terms, {name: grads[p] for name, p in model.params.items() if p in grads}


def _step_grads(model, x, y, eps, beta, pool, threads):
    """Loss terms (floats) and gradients for one minibatch.

    With several threads the batch is cut into contiguous chunks; chunk
    gradients are weighted by chunk size and summed in chunk order, so the
    result does not depend on scheduling.
    """
    B = x.shape[0]
    if pool is None or threads <= 1 or B < 2:
        terms, grads = _batch_grads(model, x, y, eps, beta)
        return tuple(float(t.data) for t in terms), grads
    bounds = np.linspace(0, B, min(threads, B) + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    futures = [
        pool.submit(_batch_grads, model, x[a:b], y[a:b], None if eps is None else eps[a:b], beta) for a, b in chunks
    ]
    values = np.zeros(3)
    grads = {}
    for (a, b), fut in zip(chunks, futures):
        terms, g = fut.result()
        w = (b - a) / B
        values += w * np.array([float(t.data) for t in terms])
        for k, v in g.items():
            grads[k] = grads[k] + w * v if k in grads else w * v
    return tuple(values), grads


def evaluate_loss(model: Model, pairs: PairSet, seed: int, tag: int = 0, batch: int = 64) -> dict:
    """Mean total/recon/kl over ``pairs`` (posterior draws, as in training)."""
    rng = stream(seed, "val", tag)
    L = model.cfg.latent_dim
    sums = np.zeros(3)
    for a in range(0, len(pairs), batch):
        x, y = pairs.x[a:a + batch], pairs.y[a:a + batch]
        eps = rng.standard_normal((x.shape[0], L)).astype(model.dtype) if model.cfg.variant == "cvae" else None
        terms = model.loss(x, y, eps)
        sums += x.shape[0] * np.array([float(t.data) for t in terms])
    total, recon, kl = (sums / len(pairs)).tolist()
    return {"total": total, "recon": recon, "kl": kl}


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs: PairSet,
    val_pairs: Optional[PairSet] = None,
    seed: int = 0,
    on_epoch: Optional[Callable[[int, dict, Optional[dict], Checkpoint], None]] = None,
) -> Checkpoint:
    """Minimize ``recon + beta * kl`` with ADAM and return the final checkpoint.

    Minibatches follow a seeded shuffle per epoch and one latent noise draw
    per example per step. ``train_cfg.max_steps`` (if > 0) stops early,
    possibly mid-epoch; the partial epoch is still recorded.
    """
    if len(train_pairs) == 0:
        raise ValueError("empty training set")
    model = Model.create(model_cfg, stream(seed, "init"))
    state = AdamState(train_cfg.lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    history: list = []
    ckpt = Checkpoint(model_cfg, {}, state, {"train": seed}, history)
    N = len(train_pairs)
    B = min(train_cfg.batch_size, N)
    L = model_cfg.latent_dim
    step = 0
    pool = ThreadPoolExecutor(train_cfg.threads) if train_cfg.threads > 1 else None
    try:
        for epoch in range(train_cfg.epochs):
            order = stream(seed, "train", epoch).permutation(N)
            noise = stream(seed, "train", epoch, 1)
            shifts = stream(seed, "augment", epoch)
            sums = np.zeros(3)
            seen = 0
            for a in range(0, N, B):
                idx = order[a:a + B]
                y = train_pairs.y[idx]
                x = train_pairs.x[idx]
                if train_cfg.augment_shift > 0:
                    s = train_cfg.augment_shift
                    dy, dx = shifts.integers(-s, s + 1, size=(2, len(idx)))
                    y = np.stack([translate(c, int(u), int(v)) for c, u, v in zip(y, dy, dx)])
                    x = project(y, train_pairs.spec, batched=True).astype(np.float32)
                eps = noise.standard_normal((len(idx), L)).astype(np.float32) if model_cfg.variant == "cvae" else None
                values, grads = _step_grads(model, x, y, eps, model_cfg.beta, pool, train_cfg.threads)
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDiverged(f"non-finite loss {values} at step {step} (epoch {epoch})")
                adam_step(model.params, grads, state)
                step += 1
                sums += len(idx) * np.array(values)
                seen += len(idx)
                if train_cfg.max_steps and step >= train_cfg.max_steps:
                    break
            row = dict(zip(("total", "recon", "kl"), (sums / seen).tolist()))
            history.append({"epoch": epoch, "split": "train", **row})
            val_row = None
            if val_pairs is not None and len(val_pairs):
                val_row = evaluate_loss(model, val_pairs, seed, epoch, train_cfg.eval_batch)
                history.append({"epoch": epoch, "split": "val", **val_row})
            ckpt.params = {k: p.data.copy() for k, p in model.params.items()}
            logger.info("epoch %d step %d train %s val %s", epoch, step, row, val_row)
            if on_epoch is not None:
                on_epoch(epoch, row, val_row, ckpt)
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    ckpt.params = {k: p.data.copy() for k, p in model.params.items()}
    ckpt.meta["steps"] = step
    return ckpt


# ---------------------------------------------------------------- beta search


@dataclass
class BetaSearch:
    beta: float
    kl: float
    in_band: bool
    warning: Optional[str]
    trace: list


def tune_beta(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs: PairSet,
    val_pairs: PairSet,
    seed: int = 0,
    band: Optional[tuple] = None,
) -> BetaSearch:
    """Geometric search for a beta whose validation KL lands inside ``band``.

    Each probe trains from the same initialization for ``probe_steps`` steps.
    beta doubles while KL is above the band and halves while below; once the
    band is bracketed, up to four geometric bisections follow. The total
    number of probes never exceeds ``max_probes``.
    """
    lower, upper = band if band is not None else (train_cfg.beta_lower, train_cfg.beta_upper)
    if not lower < upper:
        raise ValueError(f"empty band [{lower}, {upper}]")
    probe_cfg = replace(train_cfg, max_steps=train_cfg.probe_steps, epochs=10**9)
    trace = []

    def probe(beta):
        ckpt = train(replace(model_cfg, beta=beta), probe_cfg, train_pairs, None, seed)
        kl = evaluate_loss(ckpt.model(), val_pairs, seed, 0, train_cfg.eval_batch)["kl"]
        trace.append((beta, kl))
        logger.info("beta probe %d: beta=%g val kl=%.4f", len(trace), beta, kl)
        return kl

    def distance(kl):
        return 0.0 if lower <= kl <= upper else min(abs(kl - lower), abs(kl - upper))

    beta = train_cfg.beta_start
    too_small = too_large = None  # betas with KL above / below the band
    bisections = 0
    while len(trace) < train_cfg.max_probes:
        kl = probe(beta)
        if lower <= kl <= upper:
            return BetaSearch(beta, kl, True, None, trace)
        if kl > upper:
            too_small = beta if too_small is None else max(too_small, beta)
        else:
            too_large = beta if too_large is None else min(too_large, beta)
        if too_small is not None and too_large is not None:
            if bisections == 4:
                break
            bisections += 1
            beta = math.sqrt(too_small * too_large)
        else:
            beta = beta * 2 if kl > upper else beta / 2
    best_beta, best_kl = min(trace, key=lambda bk: distance(bk[1]))
    warning = f"validation KL never entered [{lower}, {upper}]; closest beta={best_beta:g} with KL={best_kl:.3f}"
    logger.warning(warning)
    return BetaSearch(best_beta, best_kl, False, warning, trace)
