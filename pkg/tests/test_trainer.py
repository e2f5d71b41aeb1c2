import math
from dataclasses import replace

import numpy as np
import pytest

from deproj import trainer
from deproj.data import SynthConfig, builtin_glyphs, make_pairs, synth_moving_digits
from deproj.model import ModelConfig
from deproj.projection import ProjectionSpec
from deproj.tensor import Tensor
from deproj.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train,
    tune_beta,
    write_history_csv,
)

TINY = ModelConfig(signal_shape=(1, 4, 16, 16), latent_dim=3, enc_channels=(4, 4), dec_channels=(4, 8),
                   z_channels=2, features=2, beta=1e-3)


@pytest.fixture(scope="module")
def tiny_pairs():
    ds = synth_moving_digits(builtin_glyphs(), SynthConfig(num_clips=24, frames=4, height=16, width=16, seed=2))
    pairs = make_pairs(ds, ProjectionSpec(0))
    return pairs.subset(range(20)), pairs.subset(range(20, 24))


# ---------------------------------------------------------------- ADAM


def test_adam_zero_lr_is_identity():
    p = {"w": Tensor(np.array([1.0, -2.0], dtype=np.float32))}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.array([3.0, 4.0], dtype=np.float32)}, AdamState(lr=0.0))
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_first_step_magnitude():
    g = 0.37
    p = {"w": Tensor(np.array([0.0], dtype=np.float64))}
    adam_step(p, {"w": np.array([g])}, AdamState(lr=1e-4))
    assert p["w"].data[0] == pytest.approx(-1e-4 * g / (g + 1e-8), rel=1e-12)


def test_adam_matches_scalar_recurrence():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    grads = [0.5, -1.0, 2.0, 0.1]
    p = {"w": Tensor(np.array([1.0]), dtype=np.float64)}
    state = AdamState(lr, b1, b2, eps)
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": np.array([g])}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert state.t == 4
    assert p["w"].data[0] == pytest.approx(w, rel=1e-12)


def test_adam_missing_gradient_is_zero():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    adam_step(p, {"a": np.ones(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p["b"].data, 1.0)
    assert p["a"].data[0] < 1.0


# ---------------------------------------------------------------- training


def test_training_is_deterministic_and_checkpoint_roundtrips(tiny_pairs, tmp_path):
    tr, va = tiny_pairs
    cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3)
    a = train(TINY, cfg, tr, va, seed=4)
    b = train(TINY, cfg, tr, va, seed=4)
    save_checkpoint(tmp_path / "a.dpjk", a)
    save_checkpoint(tmp_path / "b.dpjk", b)
    assert (tmp_path / "a.dpjk").read_bytes() == (tmp_path / "b.dpjk").read_bytes()
    back = load_checkpoint(tmp_path / "a.dpjk")
    save_checkpoint(tmp_path / "c.dpjk", back)
    assert (tmp_path / "c.dpjk").read_bytes() == (tmp_path / "a.dpjk").read_bytes()
    assert back.model_config == TINY
    assert back.adam.t == a.adam.t == 6
    for k, v in a.params.items():
        assert back.params[k].tobytes() == v.tobytes()
        assert back.adam.m[k].tobytes() == a.adam.m[k].tobytes()
    assert back.history == a.history


def test_history_rows_and_csv(tiny_pairs, tmp_path):
    tr, va = tiny_pairs
    ck = train(TINY, TrainConfig(epochs=2, batch_size=8, lr=1e-3), tr, va, seed=0)
    assert [(r["epoch"], r["split"]) for r in ck.history] == [(0, "train"), (0, "val"), (1, "train"), (1, "val")]
    assert all(r["kl"] >= 0 for r in ck.history)
    write_history_csv(tmp_path / "h.csv", ck.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,total,recon,kl" and len(lines) == 5


def test_training_loss_decreases_on_toy_data():
    ds = synth_moving_digits(builtin_glyphs(), SynthConfig(num_clips=64, seed=3))
    pairs = make_pairs(ds, ProjectionSpec(0))
    ck = train(replace(ModelConfig(), beta=1e-4), TrainConfig(epochs=5, lr=1e-3), pairs, None, seed=0)
    totals = [r["total"] for r in ck.history if r["split"] == "train"]
    assert totals[-1] < totals[0]


def test_max_steps_stops_mid_epoch(tiny_pairs):
    tr, _ = tiny_pairs
    ck = train(TINY, TrainConfig(epochs=5, batch_size=8, max_steps=4), tr, None, seed=0)
    assert ck.adam.t == 4 and int(ck.meta["steps"]) == 4
    assert [r["epoch"] for r in ck.history] == [0, 1]


def test_divergence_names_step(tiny_pairs):
    tr, _ = tiny_pairs
    bad = replace(tr, y=tr.y.copy())
    bad.y[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(TINY, TrainConfig(epochs=1, batch_size=8), bad, None, seed=0)


def test_threaded_training_matches_single_thread(tiny_pairs):
    tr, _ = tiny_pairs
    cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3)
    one = train(TINY, cfg, tr, None, seed=1)
    two = train(TINY, replace(cfg, threads=2), tr, None, seed=1)
    three = train(TINY, replace(cfg, threads=2), tr, None, seed=1)
    for k in one.params:
        np.testing.assert_allclose(two.params[k], one.params[k], atol=1e-5)
        assert two.params[k].tobytes() == three.params[k].tobytes()


def test_augmentation_runs_and_keeps_pairs_consistent(tiny_pairs):
    tr, va = tiny_pairs
    ck = train(TINY, TrainConfig(epochs=1, batch_size=8, augment_shift=2), tr, va, seed=0)
    assert ck.adam.t == 3


# ---------------------------------------------------------------- beta search


class _FakeCkpt:
    def __init__(self, beta):
        self.beta = beta

    def model(self):
        return self


def _fake_search(monkeypatch, kl_of_beta):
    calls = []

    def fake_train(model_cfg, train_cfg, tr, va, seed, on_epoch=None):
        assert train_cfg.max_steps == train_cfg.probe_steps
        calls.append(model_cfg.beta)
        return _FakeCkpt(model_cfg.beta)

    monkeypatch.setattr(trainer, "train", fake_train)
    monkeypatch.setattr(trainer, "evaluate_loss", lambda m, *a, **k: {"kl": kl_of_beta(m.beta)})
    return calls


def test_beta_search_immediate_acceptance(monkeypatch):
    calls = _fake_search(monkeypatch, lambda b: 9.0)
    res = tune_beta(TINY, TrainConfig(), None, None)
    assert res.beta == 1.0 and res.in_band and res.warning is None and calls == [1.0]


def test_beta_search_halves_until_band(monkeypatch):
    # KL falls as beta grows: 2 / beta lands in [5, 15] for beta in [2/15, 2/5]
    calls = _fake_search(monkeypatch, lambda b: 2.0 / b)
    res = tune_beta(TINY, TrainConfig(), None, None)
    assert calls == [1.0, 0.5, 0.25]
    assert res.in_band and 5 <= res.kl <= 15


def test_beta_search_bisects_after_bracketing(monkeypatch):
    # a steep response that jumps over the band on every factor-2 step
    calls = _fake_search(monkeypatch, lambda b: 10.0 * (0.3 / b) ** 6)
    res = tune_beta(TINY, TrainConfig(), None, None)
    assert len(calls) <= 12
    assert res.in_band, res.trace
    assert calls[:3] == [1.0, 0.5, 0.25]
    assert 0.25 < calls[3] < 0.5  # geometric midpoint of the bracket


def test_beta_search_warns_when_unreachable(monkeypatch):
    calls = _fake_search(monkeypatch, lambda b: 100.0)
    res = tune_beta(TINY, TrainConfig(), None, None)
    assert len(calls) == 12
    assert not res.in_band and "never entered" in res.warning
    assert res.trace[0] == (1.0, 100.0)


def test_beta_search_bisection_limit(monkeypatch):
    # band is a single point that bisection cannot hit exactly
    calls = _fake_search(monkeypatch, lambda b: 10.0 * (0.3 / b) ** 40)
    res = tune_beta(TINY, TrainConfig(beta_lower=9.999, beta_upper=10.001), None, None)
    assert len(calls) == 7  # 3 search probes, then 4 bisections
    assert not res.in_band
