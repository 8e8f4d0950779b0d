import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqspike import numerics as nx

from conftest import dense_matrix


def _inner_gap(op, rng):
    x = rng.standard_normal(op.input_shape)
    y = rng.standard_normal(op.output_shape)
    lhs = float(np.vdot(y, nx.linear(op, x)))
    rhs = float(np.vdot(nx.adjoint(op, y), x))
    return abs(lhs - rhs) / (1 + abs(lhs))


def test_dense_apply_examples():
    op = nx.dense([[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0])
    np.testing.assert_array_equal(nx.apply(op, np.array([1.0, 1.0])), [3.0, 7.0])
    x = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(nx.apply(nx.dense(np.eye(3)), x), x)


def test_conv_1x1_scales():
    op = nx.conv2d(np.full((1, 1, 1, 1), 2.0), (2, 2, 1))
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    np.testing.assert_array_equal(nx.apply(op, x)[..., 0], [[2, 4], [6, 8]])


def test_dense_adjoint_examples():
    op = nx.dense([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.adjoint(op, np.array([1.0, 0.0])), [1.0, 2.0])


@pytest.mark.parametrize("kind", ["dense", "conv", "conv_s2", "conv_t"])
def test_adjoint_of_zero_is_zero(kind, rng):
    op = {
        "dense": nx.dense(rng.standard_normal((4, 3))),
        "conv": nx.conv2d(rng.standard_normal((3, 3, 2, 3)), (5, 5, 2), padding=1),
        "conv_s2": nx.conv2d(rng.standard_normal((3, 3, 2, 3)), (4, 4, 2), stride=2, padding=1),
        "conv_t": nx.conv2d_transposed(rng.standard_normal((4, 4, 3, 2)), (3, 3, 2), stride=2, padding=1),
    }[kind]
    assert not np.any(nx.adjoint(op, np.zeros(op.output_shape)))


def test_strided_conv_adjoint_on_4x4(rng):
    op = nx.conv2d(rng.standard_normal((3, 3, 1, 2)), (4, 4, 1), stride=2, padding=1)
    assert op.output_shape == (2, 2, 2)
    assert _inner_gap(op, rng) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 8), w=st.integers(3, 8), cin=st.integers(1, 3), cout=st.integers(1, 3),
       k=st.sampled_from([1, 2, 3, 4, 5]), stride=st.sampled_from([1, 2]), seed=st.integers(0, 10_000))
def test_conv_adjoint_identity(h, w, cin, cout, k, stride, seed):
    rng = np.random.default_rng(seed)
    pad = (k - 1) // 2
    op = nx.conv2d(rng.standard_normal((k, k, cin, cout)), (h, w, cin), stride=stride, padding=pad)
    assert _inner_gap(op, rng) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 5), w=st.integers(2, 5), cin=st.integers(1, 3), cout=st.integers(1, 3),
       k=st.sampled_from([2, 3, 4, 5]), seed=st.integers(0, 10_000))
def test_transposed_conv_adjoint_and_upscale(h, w, cin, cout, k, seed):
    rng = np.random.default_rng(seed)
    pad = (k - 1) // 2
    try:
        op = nx.conv2d_transposed(rng.standard_normal((k, k, cout, cin)), (h, w, cin), stride=2, padding=pad)
    except nx.ShapeError:
        pytest.skip("geometry cannot upscale exactly")
    assert op.output_shape == (2 * h, 2 * w, cout)
    assert _inner_gap(op, rng) <= 1e-10


def test_transposed_conv_is_the_strided_conv_adjoint(rng):
    wgt = rng.standard_normal((4, 4, 3, 2))
    up = nx.conv2d_transposed(wgt, (3, 3, 2), stride=2, padding=1)
    down = nx.conv2d(wgt, (6, 6, 3), stride=2, padding=1)
    y = rng.standard_normal((3, 3, 2))
    np.testing.assert_allclose(nx.linear(up, y), nx.adjoint(down, y), atol=1e-12)


@pytest.mark.parametrize("kind", ["dense", "conv", "conv_t"])
def test_weight_grad_matches_finite_differences(kind, rng):
    op = {
        "dense": nx.dense(rng.standard_normal((4, 5))),
        "conv": nx.conv2d(rng.standard_normal((3, 3, 2, 2)), (5, 5, 2), stride=2, padding=1),
        "conv_t": nx.conv2d_transposed(rng.standard_normal((4, 4, 2, 3)), (2, 2, 3), stride=2, padding=1),
    }[kind]
    x = rng.standard_normal((2,) + op.input_shape)
    y = rng.standard_normal((2,) + op.output_shape)
    g = nx.weight_grad(op, x, y)
    fd = np.zeros_like(op.weight)
    h = 1e-6
    for idx in np.ndindex(op.weight.shape):
        w = op.weight.copy()
        w[idx] += h
        plus = np.vdot(y, nx.linear(op.with_weight(w), x))
        w[idx] -= 2 * h
        minus = np.vdot(y, nx.linear(op.with_weight(w), x))
        fd[idx] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-7)
    np.testing.assert_allclose(nx.bias_grad(op, y), y.reshape(-1, op.channels_out).sum(axis=0))


def test_batched_ops_match_per_sample(rng):
    op = nx.conv2d(rng.standard_normal((3, 3, 2, 4)), (6, 6, 2), stride=2, padding=1,
                   bias=rng.standard_normal(4))
    x = rng.standard_normal((3, 6, 6, 2))
    out = nx.apply(op, x)
    for i in range(3):
        np.testing.assert_allclose(out[i], nx.apply(op, x[i]), atol=1e-12)


def test_shape_mismatch_raises(rng):
    with pytest.raises(nx.ShapeError):
        nx.LinearOp(nx.DENSE, rng.standard_normal((3, 4)), None, (5,))
    op = nx.dense(rng.standard_normal((3, 4)))
    with pytest.raises(nx.ShapeError):
        nx.linear(op, np.ones(5))


def test_spectral_norm_examples():
    assert nx.spectral_norm(nx.dense(np.diag([3.0, 1.0]))) == pytest.approx(3.0, abs=1e-9)
    assert nx.spectral_norm(nx.dense(np.eye(5))) == pytest.approx(1.0, abs=1e-12)
    assert nx.spectral_norm(nx.dense(np.zeros((3, 3)))) == 0.0


def test_spectral_norm_random_against_eigendecomposition():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((20, 20))
    oracle = float(np.sqrt(np.linalg.eigvalsh(w.T @ w).max()))
    est = nx.spectral_norm(nx.dense(w), iters=5000, tol=1e-9)
    assert est == pytest.approx(oracle, abs=1e-6)


def test_spectral_norm_invariant_under_transpose(rng):
    w = rng.standard_normal((7, 12))
    op = nx.dense(w)
    a = nx.spectral_norm(op, iters=5000, tol=1e-11)
    b = nx.spectral_norm(nx.transpose_op(op), iters=5000, tol=1e-11)
    assert abs(a - b) <= 1e-8
    conv = nx.conv2d(rng.standard_normal((3, 3, 2, 2)), (4, 4, 2), padding=1)
    a = nx.spectral_norm(conv, iters=5000, tol=1e-11)
    b = nx.spectral_norm(nx.transpose_op(conv), iters=5000, tol=1e-11)
    assert abs(a - b) <= 1e-8
    assert a == pytest.approx(np.linalg.norm(dense_matrix(conv), 2), abs=1e-8)


def test_power_iteration_warm_start_converges_fast(rng):
    op = nx.dense(rng.standard_normal((30, 30)))
    cold = nx.power_iteration(op, iters=5000, tol=1e-10)
    warm = nx.power_iteration(op, iters=5000, tol=1e-10, v0=cold.v)
    assert warm.iterations <= 2
    assert warm.sigma == pytest.approx(cold.sigma, rel=1e-12)


def test_rng_stream_reproducible_and_independent():
    a = nx.rng_stream(3, 1).standard_normal(5)
    b = nx.rng_stream(3, 1).standard_normal(5)
    c = nx.rng_stream(3, 2).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_outputs_finite_on_finite_inputs(rng):
    op = nx.conv2d(rng.standard_normal((3, 3, 1, 2)) * 1e3, (5, 5, 1), padding=1)
    out = nx.apply(op, rng.standard_normal((5, 5, 1)) * 1e3)
    assert np.all(np.isfinite(out))
    assert out.size == int(np.prod(op.output_shape))
