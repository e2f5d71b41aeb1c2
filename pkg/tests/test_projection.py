import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deproj.projection import ProjectionSpec, project, projected_shape, projection_matrix
from deproj.tensor import ShapeError, Tape, Tensor, backward, ops


def test_hand_arithmetic():
    y = np.array([[[0.0, 1.0], [2.0, 3.0]]])  # one channel
    np.testing.assert_allclose(project(y, ProjectionSpec(0, (0.5, 0.5))), [[1.0, 2.0]])


def test_constant_signal_averages_to_constant():
    y = np.full((1, 8, 5, 4), 0.5)
    x = project(y, ProjectionSpec.averaging(0))
    np.testing.assert_allclose(x, 0.5, rtol=0, atol=1e-15)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_one_hot_selects_slice(axis):
    y = np.random.default_rng(0).random((1, 4, 5, 6))
    k = 2
    x = project(y, ProjectionSpec.one_hot(axis, y.shape[1 + axis], k))
    np.testing.assert_array_equal(x, np.take(y, k, axis=1 + axis))


def test_shape_contract():
    assert projected_shape((1, 8, 32, 32), ProjectionSpec(0)) == (1, 32, 32)
    assert projected_shape((1, 8, 32, 32), ProjectionSpec(2)) == (1, 8, 32)
    assert project(np.zeros((1, 8, 6, 7)), ProjectionSpec(1)).shape == (1, 8, 7)


def test_errors():
    with pytest.raises(ShapeError):
        project(np.zeros((1, 4, 4)), ProjectionSpec(2))
    with pytest.raises(ShapeError):
        project(np.zeros((1, 4, 4)), ProjectionSpec(0, (0.5, 0.5)))


def test_matrix_structure_for_averaging():
    shape = (1, 4, 3, 5)
    P = projection_matrix(ProjectionSpec(0), shape)
    assert P.shape == (15, 60)
    assert np.all((P != 0).sum(axis=1) == 4)
    np.testing.assert_allclose(P[P != 0], 0.25)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_matrix_matches_project(axis):
    rng = np.random.default_rng(axis)
    shape = (1, 3, 4, 5)
    spec = ProjectionSpec(axis, tuple(rng.random(shape[1 + axis])))
    P = projection_matrix(spec, shape)
    for _ in range(20):
        y = rng.standard_normal(shape)
        np.testing.assert_allclose(P @ y.ravel(), project(y, spec).ravel(), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16), axis=st.integers(0, 2))
def test_linearity(a, b, seed, axis):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 1, 3, 4, 5))
    spec = ProjectionSpec(axis)
    lhs = project(a * u + b * v, spec)
    rhs = a * project(u, spec) + b * project(v, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_expand_then_project_is_identity():
    img = np.random.default_rng(3).random((1, 6, 7))
    clip = np.repeat(img[:, None], 5, axis=1)
    np.testing.assert_allclose(project(clip, ProjectionSpec(0)), img, atol=1e-12)


def test_tensor_path_is_differentiable():
    y = Tensor(np.random.default_rng(0).random((2, 1, 3, 4)), requires_grad=True)
    spec = ProjectionSpec(0, (0.2, 0.3, 0.5))
    with Tape() as tape:
        loss = ops.sum(project(y, spec, batched=True))
    g = backward(tape, loss)[y]
    np.testing.assert_allclose(g[:, :, 0], 0.2)
    np.testing.assert_allclose(g[:, :, 2], 0.5)
