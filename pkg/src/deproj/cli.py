"""``deproj`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from deproj import baselines, evaluate
from deproj.config import Config, ConfigError, load_config
from deproj.container import ContainerError
from deproj.data import (
    ClipDataset,
    IdxError,
    dataset_from_idx,
    load_dataset,
    load_glyphs,
    make_pairs,
    save_dataset,
    split,
    synth_moving_digits,
)
from deproj.rng import stream
from deproj.trainer import (
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
    tune_beta,
    write_history_csv,
)

COMMANDS = ("synth", "train", "tune-beta", "sample", "eval", "baseline-lmmse", "baseline-knn", "montage")


class UsageError(Exception):
    pass


class RunError(Exception):
    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deproj", description="Recover signals collapsed along one axis.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="key=value configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/default", help="directory receiving every output")
    p.add_argument("--checkpoint", help="model checkpoint to read (sample, eval, montage)")
    p.add_argument("--method", choices=evaluate.METHODS, help="overrides eval.method")
    p.add_argument("--k-list", help="comma-separated ascending k values; overrides eval.k_list")
    p.add_argument("--threads", type=int, help="data-parallel training threads; overrides train.threads")
    return p


class Run:
    def __init__(self, args, cfg: Config):
        self.args = args
        self.cfg = cfg
        self.seed = args.seed
        self.out = Path(args.out)

    def say(self, msg: str) -> None:
        print(msg, flush=True)

    # ---- data

    def dataset(self) -> ClipDataset:
        path = self.out / "dataset.dpjk"
        if path.exists():
            return load_dataset(path)
        return self.make_dataset()

    def make_dataset(self) -> ClipDataset:
        c = self.cfg
        if c["data.idx_path"]:
            return dataset_from_idx(c["data.idx_path"])
        glyphs = load_glyphs(c["data.glyph_path"] or None, c["data.glyph_scale"])
        return synth_moving_digits(glyphs, c.synth(self.seed))

    def pairs(self):
        parts = split(self.dataset(), self.cfg["data.split"], self.seed)
        spec = self.cfg.projection()
        noise = self.cfg["data.noise_std"]
        return tuple(make_pairs(d, spec, noise, self.seed + i) for i, d in enumerate(parts))

    # ---- models

    def method(self) -> str:
        return self.cfg["eval.method"]

    def checkpoint_path(self, method: str) -> Path:
        if self.args.checkpoint:
            return Path(self.args.checkpoint)
        return self.out / f"{method}.dpjk"

    def load_model(self, method: str):
        path = self.checkpoint_path(method)
        if not path.exists():
            raise RunError("missing-checkpoint", f"{path} not found; run 'train' with --method {method} first")
        model = load_checkpoint(path).model()
        if model.cfg.variant != method:
            raise RunError("bad-checkpoint", f"{path} holds a {model.cfg.variant} model, not {method}")
        return model

    def sampler(self, method: str, train_pairs):
        if method in ("cvae", "det"):
            model = self.load_model(method)
            return evaluate.cvae_sampler(model, self.seed) if method == "cvae" else evaluate.det_sampler(model)
        if method == "knn":
            return evaluate.knn_sampler(train_pairs)
        lm_path = self.out / "lmmse.dpjk"
        lm = baselines.load_lmmse(lm_path) if lm_path.exists() else baselines.lmmse_fit(train_pairs, self.cfg["eval.lmmse_ridge"])
        return evaluate.lmmse_sampler(lm, self.seed)

    # ---- commands

    def synth(self):
        ds = self.make_dataset()
        ds.provenance["config_hash"] = self.cfg.digest()
        save_dataset(self.out / "dataset.dpjk", ds)
        self.say(f"synth: {len(ds)} clips of shape {ds.clip_shape} -> {self.out / 'dataset.dpjk'}")

    def train(self):
        method = self.method()
        if method not in ("cvae", "det"):
            raise UsageError(f"train supports --method cvae or det, not {method}")
        tr, va, _ = self.pairs()
        mcfg = self.cfg.model(tr.y.shape[1:], variant=method)
        every = self.cfg["train.checkpoint_every"]

        def on_epoch(epoch, row, val, ckpt):
            v = f" val total={val['total']:.6f} recon={val['recon']:.6f} kl={val['kl']:.4f}" if val else ""
            self.say(f"epoch {epoch}: train total={row['total']:.6f} recon={row['recon']:.6f} kl={row['kl']:.4f}{v}")
            if every and (epoch + 1) % every == 0:
                ckpt.meta["config_hash"] = self.cfg.digest()
                save_checkpoint(self.out / f"{method}_epoch{epoch}.dpjk", ckpt)

        ckpt = train(mcfg, self.cfg.train(), tr, va, self.seed, on_epoch)
        ckpt.meta["config_hash"] = self.cfg.digest()
        save_checkpoint(self.out / f"{method}.dpjk", ckpt)
        write_history_csv(self.out / f"{method}_history.csv", ckpt.history)
        self.say(f"train: {ckpt.meta['steps']} steps -> {self.out / f'{method}.dpjk'}")

    def tune_beta(self):
        tr, va, _ = self.pairs()
        res = tune_beta(self.cfg.model(tr.y.shape[1:]), self.cfg.train(), tr, va, self.seed)
        for i, (b, kl) in enumerate(res.trace):
            self.say(f"probe {i}: beta={b:.6g} val_kl={kl:.4f}")
        report = {"beta": res.beta, "kl": res.kl, "in_band": res.in_band, "warning": res.warning,
                  "trace": [list(t) for t in res.trace]}
        (self.out / "beta.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        if res.warning:
            print(f"warning: {res.warning}", file=sys.stderr)
        self.say(f"tune-beta: beta={res.beta:.6g} val_kl={res.kl:.4f} probes={len(res.trace)}")

    def _candidates(self, method):
        tr, _, te = self.pairs()
        n = min(self.cfg["eval.montage_examples"], len(te))
        k = self.cfg["eval.montage_samples"]
        cands = self.sampler(method, tr)(te.x[:n], np.arange(n), k)
        return te, n, cands

    def sample(self):
        method = self.method()
        te, n, cands = self._candidates(method)
        from deproj import container

        tensors = {f"sample/{i}/{j}": cands[i, j] for i in range(n) for j in range(cands.shape[1])}
        container.save(self.out / f"samples_{method}.dpjk", tensors, {"kind": "samples", "method": method})
        self.say(f"sample: {n} x {cands.shape[1]} {method} samples -> {self.out / f'samples_{method}.dpjk'}")

    def montage(self):
        method = self.method()
        te, n, cands = self._candidates(method)
        rows = []
        for i in range(n):
            rows.append(te.y[i])
            rows.extend(cands[i])
        path = self.out / f"montage_{method}.pgm"
        evaluate.emit_montage(rows, path)
        self.say(f"montage: {n} examples, truth then {cands.shape[1]} samples each -> {path}")

    def eval(self, method=None):
        method = method or self.method()
        tr, _, te = self.pairs()
        curve = evaluate.best_of_k(method, self.sampler(method, tr), te, self.cfg["eval.k_list"], self.seed,
                                   self.cfg["eval.batch"])
        path = self.out / f"curve_{method}.csv"
        evaluate.emit_csv(curve, path)
        for k, s, r in curve.rows():
            self.say(f"{method} k={k}: best_signal_psnr={s:.4f} mean_reprojection_psnr={r:.4f}")
        self.say(f"eval: {len(te)} test examples -> {path}")

    def baseline_lmmse(self):
        tr, _, _ = self.pairs()
        lm = baselines.lmmse_fit(tr, self.cfg["eval.lmmse_ridge"])
        baselines.save_lmmse(self.out / "lmmse.dpjk", lm)
        self.say(f"baseline-lmmse: d={lm.d} D={lm.D} posterior rank={lm.l_post.shape[1]}")
        self.eval("lmmse")

    def baseline_knn(self):
        self.eval("knn")


def _overrides(args) -> dict:
    if args.k_list is not None:
        try:
            ks = [int(v) for v in args.k_list.split(",")]
        except ValueError:
            raise UsageError(f"--k-list must be comma-separated integers, got {args.k_list!r}") from None
        if not ks or ks != sorted(set(ks)) or ks[0] < 1:
            raise UsageError(f"--k-list must be strictly ascending positive integers, got {args.k_list!r}")
        args.k_list = tuple(ks)
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return {"eval__method": args.method, "eval__k_list": args.k_list, "train__threads": args.threads}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on malformed flags
    try:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file {args.config!r} not found")
        if args.checkpoint and args.command in ("synth", "train", "tune-beta", "baseline-lmmse", "baseline-knn"):
            raise UsageError(f"--checkpoint does not apply to {args.command}")
        overrides = _overrides(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config).override(**overrides)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        run = Run(args, cfg)
        getattr(run, args.command.replace("-", "_"))()
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 1
    except RunError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return 1
    except (ContainerError, IdxError) as e:
        print(f"error: format: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: invalid: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
