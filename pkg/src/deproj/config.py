"""Flat ``key=value`` run configuration with a typed schema."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any

from deproj.data import SynthConfig
from deproj.model import ModelConfig
from deproj.projection import ProjectionSpec


class ConfigError(ValueError):
    pass


# key -> (type, default)
SCHEMA: dict[str, tuple[str, Any]] = {
    "data.num_clips": ("int", 2400),
    "data.num_digits": ("int", 1),
    "data.frames": ("int", 8),
    "data.height": ("int", 32),
    "data.width": ("int", 32),
    "data.speed_min": ("int", 1),
    "data.speed_max": ("int", 3),
    "data.glyph_path": ("string", ""),
    "data.glyph_scale": ("int", 1),
    "data.idx_path": ("string", ""),
    "data.split": ("float-list", (10 / 12, 1 / 12, 1 / 12)),
    "data.axis": ("int", 0),
    "data.weights": ("float-list", ()),
    "data.noise_std": ("float", 0.0),
    "model.latent_dim": ("int", 10),
    "model.enc_channels": ("int-list", (8, 16, 16)),
    "model.dec_channels": ("int-list", (8, 16, 16)),
    "model.z_channels": ("int", 4),
    "model.features": ("int", 2),
    "model.refine_layers": ("int", 2),
    "model.slope": ("float", 0.2),
    "model.beta": ("float", 1.0),
    "model.kernel": ("int", 3),
    "model.x_skip": ("int", 1),
    "train.lr": ("float", 1e-4),
    "train.adam_beta1": ("float", 0.9),
    "train.adam_beta2": ("float", 0.999),
    "train.adam_eps": ("float", 1e-8),
    "train.batch_size": ("int", 16),
    "train.epochs": ("int", 30),
    "train.max_steps": ("int", 0),
    "train.augment_shift": ("int", 0),
    "train.threads": ("int", 1),
    "train.checkpoint_every": ("int", 0),
    "train.probe_steps": ("int", 200),
    "train.beta_start": ("float", 1.0),
    "train.beta_lower": ("float", 5.0),
    "train.beta_upper": ("float", 15.0),
    "train.max_probes": ("int", 12),
    "eval.method": ("string", "cvae"),
    "eval.k_list": ("int-list", (1, 2, 5, 10)),
    "eval.lmmse_ridge": ("float", 1e-6),
    "eval.batch": ("int", 8),
    "eval.montage_examples": ("int", 4),
    "eval.montage_samples": ("int", 3),
}


def _convert(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "string":
        return raw
    if kind in ("int-list", "float-list"):
        if not raw:
            return ()
        conv = int if kind == "int-list" else float
        return tuple(conv(p.strip()) for p in raw.split(","))
    raise AssertionError(kind)


def _format(kind: str, value) -> str:
    if kind == "float":
        return repr(float(value))
    if kind == "float-list":
        return ",".join(repr(float(v)) for v in value)
    if kind == "int-list":
        return ",".join(str(int(v)) for v in value)
    return str(value)


@dataclass(frozen=True)
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def dump(self) -> str:
        return "".join(f"{k}={_format(SCHEMA[k][0], self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()

    def override(self, **pairs) -> "Config":
        """Replace values by key (dots written as ``__``); ``None`` leaves a key alone."""
        values = dict(self.values)
        for k, v in pairs.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            if v is not None:
                values[key] = _convert(SCHEMA[key][0], v) if isinstance(v, str) else v
        return Config(values)

    # ---- typed views

    def synth(self, seed: int) -> SynthConfig:
        v = self.values
        return SynthConfig(
            num_clips=v["data.num_clips"], num_digits=v["data.num_digits"], frames=v["data.frames"],
            height=v["data.height"], width=v["data.width"], speed_min=v["data.speed_min"],
            speed_max=v["data.speed_max"], seed=seed,
        )

    def projection(self) -> ProjectionSpec:
        w = self.values["data.weights"]
        return ProjectionSpec(self.values["data.axis"], tuple(w) if w else None)

    def model(self, signal_shape, variant: str = "cvae") -> ModelConfig:
        v = self.values
        return ModelConfig(
            signal_shape=tuple(signal_shape), axis=v["data.axis"], latent_dim=v["model.latent_dim"],
            enc_channels=v["model.enc_channels"], dec_channels=v["model.dec_channels"],
            z_channels=v["model.z_channels"], features=v["model.features"], refine_layers=v["model.refine_layers"],
            slope=v["model.slope"], beta=v["model.beta"], variant=variant, kernel=v["model.kernel"],
            x_skip=bool(v["model.x_skip"]),
        )

    def train(self):
        from deproj.trainer import TrainConfig

        v = self.values
        names = ("lr", "adam_beta1", "adam_beta2", "adam_eps", "batch_size", "epochs", "max_steps",
                 "augment_shift", "threads", "probe_steps", "beta_start", "beta_lower", "beta_upper", "max_probes")
        return TrainConfig(**{n: v[f"train.{n}"] for n in names})


def defaults() -> Config:
    return Config({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text: str) -> Config:
    values = {}
    seen_at = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen_at:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen_at[key]})")
        kind = SCHEMA[key][0]
        try:
            values[key] = _convert(kind, raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: key {key!r} expects {kind}, got {raw!r}") from None
        seen_at[key] = lineno
    merged = {k: d for k, (_, d) in SCHEMA.items()}
    merged.update(values)
    return Config(merged)


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
