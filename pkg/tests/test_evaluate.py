import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deproj.baselines import lmmse_fit
from deproj.data import PairSet
from deproj.evaluate import (
    best_of_k,
    cvae_sampler,
    det_sampler,
    emit_csv,
    emit_montage,
    knn_sampler,
    lmmse_sampler,
    montage,
    pgm_bytes,
    psnr,
    read_csv,
)
from deproj.model import Model, ModelConfig, param_shapes
from deproj.projection import ProjectionSpec, project
from deproj.tensor import ShapeError, Tensor

SPEC = ProjectionSpec(0)


def _pairs(n, seed=0, shape=(1, 4, 8, 8)):
    y = np.random.default_rng(seed).random((n,) + shape).astype(np.float32)
    return PairSet(project(y, SPEC, batched=True).astype(np.float32), y, SPEC)


def _model(variant, seed=0):
    cfg = ModelConfig(signal_shape=(1, 4, 8, 8), latent_dim=2, enc_channels=(4,), dec_channels=(4, 4),
                      z_channels=1, features=2, variant=variant)
    rng = np.random.default_rng(seed)
    return Model(cfg, {n: Tensor(rng.uniform(-0.5, 0.5, s), requires_grad=True, name=n)
                       for n, s in param_shapes(cfg).items()})


# ---------------------------------------------------------------- PSNR


def test_psnr_examples():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0)
    assert psnr(a, b, peak=2.0) == pytest.approx(20.0 + 20 * math.log10(2))
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4),
       st.integers(0, 3), st.floats(0, 0.5))
def test_psnr_symmetric_and_monotone(a, b, i, bump):
    a, b = np.array(a), np.array(b)
    assert psnr(a, b) == psnr(b, a)
    worse = a.copy()
    worse[i] += math.copysign(bump, a[i] - b[i]) if a[i] != b[i] else bump
    assert psnr(worse, b) <= psnr(a, b)


# ---------------------------------------------------------------- best-of-k


def test_det_curve_flat():
    te = _pairs(5)
    c = best_of_k("det", det_sampler(_model("det")), te, [1, 2, 5], seed=0)
    assert c.best_signal[0] == c.best_signal[1] == c.best_signal[2]
    assert c.reprojection[0] == c.reprojection[1] == c.reprojection[2]


@pytest.mark.parametrize("method", ["cvae", "knn", "lmmse"])
def test_best_signal_non_decreasing(method):
    tr, te = _pairs(40, seed=1), _pairs(6, seed=2)
    sampler = {
        "cvae": lambda: cvae_sampler(_model("cvae"), 3),
        "knn": lambda: knn_sampler(tr),
        "lmmse": lambda: lmmse_sampler(lmmse_fit(tr, 1e-3), 3),
    }[method]()
    c = best_of_k(method, sampler, te, [1, 2, 4, 8], seed=3)
    assert np.all(np.diff(c.per_example_best, axis=1) >= 0)
    assert all(b >= a for a, b in zip(c.best_signal, c.best_signal[1:]))


def test_cvae_candidates_vary_with_k_and_are_reproducible():
    te = _pairs(4, seed=4)
    m = _model("cvae")
    a = best_of_k("cvae", cvae_sampler(m, 5), te, [1, 3], seed=5, batch=3)
    b = best_of_k("cvae", cvae_sampler(m, 5), te, [1, 3], seed=5, batch=1)
    np.testing.assert_allclose(a.per_example_best, b.per_example_best, rtol=1e-6)
    assert a.best_signal[1] > a.best_signal[0]


def test_prefix_reuse():
    te = _pairs(3, seed=6)
    m = _model("cvae")
    small = best_of_k("cvae", cvae_sampler(m, 1), te, [2], seed=1)
    large = best_of_k("cvae", cvae_sampler(m, 1), te, [2, 6], seed=1)
    assert small.best_signal[0] == large.best_signal[0]


def test_lmmse_exact_reprojection_capped():
    y = np.random.default_rng(7).random((300, 1, 4, 4))
    pairs = PairSet(project(y, SPEC, batched=True), y, SPEC)
    lm = lmmse_fit(pairs.subset(range(250)), ridge=0.0)
    c = best_of_k("lmmse", lmmse_sampler(lm, 0), pairs.subset(range(250, 260)), [1, 5], seed=0)
    assert c.reprojection == [100.0, 100.0]


def test_unknown_method_and_bad_ks():
    te = _pairs(2)
    with pytest.raises(ValueError, match="unknown method"):
        best_of_k("gan", det_sampler(_model("det")), te, [1])
    with pytest.raises(ValueError):
        best_of_k("det", det_sampler(_model("det")), te, [3, 1])


# ---------------------------------------------------------------- outputs


def test_csv_roundtrip(tmp_path):
    te = _pairs(3)
    c = best_of_k("cvae", cvae_sampler(_model("cvae"), 0), te, [1, 2], seed=0)
    emit_csv(c, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text()
    assert text.splitlines()[0] == "k,best_signal_psnr,mean_reprojection_psnr"
    rows = read_csv(tmp_path / "c.csv")
    assert [r[0] for r in rows] == [1, 2]
    for (k, s, r), (k2, s2, r2) in zip(rows, c.rows()):
        assert s == float(f"{s2:.6f}") and r == float(f"{r2:.6f}")


def test_pgm_white_pixel(tmp_path):
    emit_montage([np.ones((1, 1))], tmp_path / "w.pgm")
    assert (tmp_path / "w.pgm").read_bytes() == b"P5\n1 1\n255\n\xff"


def test_pgm_golden_2x2():
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    # 0.5*255+0.5 = 128.0 -> 128 ; 0.25*255+0.5 = 64.25 -> 64
    assert pgm_bytes(img) == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])


def test_montage_layout():
    clip = np.random.default_rng(0).random((1, 5, 3, 4))
    m = montage([clip, clip])
    assert m.shape == (2 * 3, 5 * 4)
    np.testing.assert_array_equal(m[3:6, 8:12], clip[0, 2])
    with pytest.raises(ShapeError):
        montage([clip, clip[:, :2]])


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_montage([np.ones((1, 1))], tmp_path / "missing" / "x.pgm")
