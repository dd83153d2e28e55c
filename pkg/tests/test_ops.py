import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from res3d import ops
from res3d.errors import ConfigurationError, DimensionError, StatisticsError

from oracles import gradient_errors, naive_conv3d, naive_maxpool3d

SEEDS = range(20)


def _one(backward):
    return lambda g, cache: (backward(g, cache),)


def _rand(rng, shape, dtype=np.float64):
    return rng.uniform(-1, 1, shape).astype(dtype)


# -- conv3d -----------------------------------------------------------------


def test_conv_scalar():
    x = np.full((1, 1, 1, 1, 1), 3.0, np.float32)
    w = np.full((1, 1, 1, 1, 1), 2.0, np.float32)
    out, cache = ops.conv3d_forward(x, w, np.zeros(1, np.float32))
    assert out.item() == 6.0
    gx, gw, gb = ops.conv3d_backward(np.ones_like(out), cache)
    assert (gx.item(), gw.item(), gb.item()) == (2.0, 3.0, 1.0)


def test_conv_stem_shape():
    x = np.zeros((2, 3, 16, 112, 112), np.float32)
    w = np.zeros((64, 3, 7, 7, 7), np.float32)
    out, _ = ops.conv3d_forward(x, w, None, (1, 2, 2), (3, 3, 3))
    assert out.shape == (2, 64, 16, 56, 56)


def test_conv_grouped_matches_naive():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 4, 3, 5, 5)).astype(np.float32)
    w = (rng.standard_normal((4, 2, 3, 3, 3)) * 0.2).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out, _ = ops.conv3d_forward(x, w, b, 1, 1, groups=2)
    np.testing.assert_allclose(out, naive_conv3d(x, w, b, (1, 1, 1), (1, 1, 1), 2), atol=1e-5)


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_conv_groups_equal_sliced_convs(groups):
    rng = np.random.default_rng(groups)
    x = rng.standard_normal((2, 8, 4, 6, 6)).astype(np.float32)
    w = rng.standard_normal((12, 8 // groups, 3, 3, 3)).astype(np.float32)
    out, _ = ops.conv3d_forward(x, w, None, 1, 1, groups)
    parts = []
    for g in range(groups):
        xs = x[:, g * 8 // groups:(g + 1) * 8 // groups]
        ws = w[g * 12 // groups:(g + 1) * 12 // groups]
        parts.append(ops.conv3d_forward(np.ascontiguousarray(xs), np.ascontiguousarray(ws), None, 1, 1)[0])
    np.testing.assert_array_equal(out, np.concatenate(parts, axis=1))


def test_conv_zero_grad():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    out, cache = ops.conv3d_forward(x, w, np.zeros(3), 1, 1)
    for g in ops.conv3d_backward(np.zeros_like(out), cache):
        assert not g.any()


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("groups", [1, 2, 4])
def test_conv_gradcheck(seed, groups):
    rng = np.random.default_rng(seed)
    stride = tuple(int(s) for s in rng.integers(1, 3, 3))
    x = _rand(rng, (1, 4, 3, 4, 4))
    w = _rand(rng, (4, 4 // groups, 3, 2, 3))
    b = _rand(rng, (4,))
    errs = gradient_errors(
        lambda x, w, b: ops.conv3d_forward(x, w, b, stride, (1, 0, 1), groups),
        ops.conv3d_backward, [x, w, b], seed,
    )
    assert max(errs) < 1e-4


def test_conv_errors():
    x = np.zeros((1, 3, 2, 2, 2), np.float32)
    with pytest.raises(DimensionError):
        ops.conv3d_forward(x, np.zeros((4, 2, 1, 1, 1), np.float32))
    with pytest.raises(ConfigurationError):
        ops.conv3d_forward(x, np.zeros((4, 3, 3, 3, 3), np.float32))
    _, cache = ops.conv3d_forward(x, np.zeros((4, 3, 1, 1, 1), np.float32))
    with pytest.raises(DimensionError):
        ops.conv3d_backward(np.zeros((1, 4, 1, 1, 1), np.float32), cache)


def test_conv_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 9, 9)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3, 3, 3)).astype(np.float32)
    a = ops.conv3d_forward(x, w, None, 2, 1)[0]
    b = ops.conv3d_forward(x.copy(), w.copy(), None, 2, 1)[0]
    assert a.tobytes() == b.tobytes()


# -- batchnorm ----------------------------------------------------------------


def _bn_args(c, dtype=np.float64):
    return np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)


def test_bn_constant_input_is_zero():
    x = np.full((2, 3, 2, 2, 2), 5.0, np.float32)
    out, _ = ops.batchnorm3d_forward(x, *_bn_args(3, np.float32), training=True)
    assert not out.any()


def test_bn_zero_gamma():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 2, 2, 2))
    gamma, beta, rm, rv = _bn_args(3)
    gamma[:] = 0
    beta[:] = [1.0, -2.0, 0.5]
    out, cache = ops.batchnorm3d_forward(x, gamma, beta, rm, rv, training=True)
    np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 3, 1, 1, 1), out.shape))
    gx, _, _ = ops.batchnorm3d_backward(rng.standard_normal(x.shape), cache)
    assert not gx.any()


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_bn_gradcheck(seed, training):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 3, 2, 4, 4)) * 3 + 1
    gamma = _rand(rng, (3,))
    beta = _rand(rng, (3,))
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)

    def fwd(x, gamma, beta):
        return ops.batchnorm3d_forward(x, gamma, beta, rm.copy(), rv.copy(), training=training)

    assert max(gradient_errors(fwd, ops.batchnorm3d_backward, [x, gamma, beta], seed)) < 1e-4


def test_bn_training_normalizes():
    rng = np.random.default_rng(5)
    x = (rng.standard_normal((4, 6, 3, 5, 5)) * 7 + 3).astype(np.float32)
    out, _ = ops.batchnorm3d_forward(x, *_bn_args(6, np.float32), training=True)
    mean = out.astype(np.float64).mean(axis=(0, 2, 3, 4))
    var = out.astype(np.float64).var(axis=(0, 2, 3, 4))
    assert np.abs(mean).max() < 1e-5
    assert np.abs(var - 1).max() < 1e-4


def test_bn_running_stats_update():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 2, 3, 3)) + np.array([1.0, -1.0]).reshape(1, 2, 1, 1, 1)
    gamma, beta, rm, rv = _bn_args(2)
    ops.batchnorm3d_forward(x, gamma, beta, rm, rv, training=True, momentum=0.1)
    n = x.size // 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3, 4)) * n / (n - 1))
    before = rm.copy(), rv.copy()
    ops.batchnorm3d_forward(x, gamma, beta, rm, rv, training=False)
    np.testing.assert_array_equal(rm, before[0])
    np.testing.assert_array_equal(rv, before[1])


def test_bn_insufficient_statistics():
    with pytest.raises(StatisticsError):
        ops.batchnorm3d_forward(np.ones((1, 2, 1, 1, 1)), *_bn_args(2), training=True)
    ops.batchnorm3d_forward(np.ones((1, 2, 1, 1, 1)), *_bn_args(2), training=False)


# -- relu -------------------------------------------------------------------------


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0])
    out, mask = ops.relu_forward(x)
    np.testing.assert_array_equal(out, [0, 0, 2])
    np.testing.assert_array_equal(ops.relu_backward(np.full(3, 5.0), mask), [0, 0, 5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_relu_abs_identity(x):
    np.testing.assert_array_equal(ops.relu_forward(x)[0] + ops.relu_forward(-x)[0], np.abs(x))


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.choice([-1, 1], (2, 3, 2, 3, 3)) * rng.uniform(0.01, 1, (2, 3, 2, 3, 3))
    assert max(gradient_errors(ops.relu_forward, _one(ops.relu_backward), [x], seed)) < 1e-4


# -- max pooling ----------------------------------------------------------------


def test_maxpool_1d_case():
    x = np.array([1.0, 3.0, 2.0, 4.0]).reshape(1, 1, 1, 1, 4)
    out, _ = ops.maxpool3d_forward(x, (1, 1, 2), (1, 1, 2))
    np.testing.assert_array_equal(out.ravel(), [3, 4])


def test_maxpool_tie_routes_to_first():
    x = np.full((1, 1, 2, 2, 2), 7.0)
    out, cache = ops.maxpool3d_forward(x, 2, 2)
    assert out.item() == 7.0
    g = ops.maxpool3d_backward(np.ones_like(out), cache)
    expected = np.zeros_like(x)
    expected[0, 0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(g, expected)


def test_maxpool_matches_naive():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 6, 6, 6))
    out, _ = ops.maxpool3d_forward(x, 3, 2, 1)
    np.testing.assert_array_equal(out, naive_maxpool3d(x, (3, 3, 3), (2, 2, 2), (1, 1, 1)))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradcheck(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced well above the step size
    x = rng.permutation(2 * 5 * 5 * 5).reshape(1, 2, 5, 5, 5) * 0.01
    errs = gradient_errors(lambda x: ops.maxpool3d_forward(x, 3, 2, 1), _one(ops.maxpool3d_backward), [x], seed)
    assert max(errs) < 1e-4


def test_maxpool_window_too_large():
    with pytest.raises(ConfigurationError):
        ops.maxpool3d_forward(np.zeros((1, 1, 2, 2, 2)), 5, 1, 1)


# -- average pooling ------------------------------------------------------------


def test_global_avg_pool_examples():
    out, shape = ops.global_avg_pool_forward(np.ones((2, 3, 2, 2, 2)))
    np.testing.assert_array_equal(out, np.ones((2, 3)))
    out, shape = ops.global_avg_pool_forward(np.array([2.0, 4.0]).reshape(1, 1, 2, 1, 1))
    assert out.item() == 3.0
    g = ops.global_avg_pool_backward(np.array([[6.0]]), (1, 1, 1, 2, 3))
    np.testing.assert_array_equal(g, np.ones((1, 1, 1, 2, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avg_pool_gradcheck(seed):
    x = _rand(np.random.default_rng(seed), (2, 3, 2, 3, 2))
    assert max(gradient_errors(ops.global_avg_pool_forward, _one(ops.global_avg_pool_backward), [x], seed)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_avgpool_gradcheck(seed):
    x = _rand(np.random.default_rng(seed), (1, 2, 4, 5, 4))
    errs = gradient_errors(lambda x: ops.avgpool3d_forward(x, 2, 2), _one(ops.avgpool3d_backward), [x], seed)
    assert max(errs) < 1e-4


def test_avgpool_halves_extents():
    out, _ = ops.avgpool3d_forward(np.arange(8.0).reshape(1, 1, 2, 2, 2), 2, 2)
    assert out.shape == (1, 1, 1, 1, 1) and out.item() == 3.5


# -- linear ---------------------------------------------------------------------


def test_linear_examples():
    x = np.array([[1.0, 2.0], [3.0, -4.0]])
    out, _ = ops.linear_forward(x, np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out, x)
    out, _ = ops.linear_forward(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([1.0]))
    assert out.item() == 12.0
    with pytest.raises(DimensionError):
        ops.linear_forward(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrs = [_rand(rng, (3, 5)), _rand(rng, (4, 5)), _rand(rng, (4,))]
    assert max(gradient_errors(ops.linear_forward, ops.linear_backward, arrs, seed)) < 1e-4


# -- concat ---------------------------------------------------------------------


def test_concat_examples():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 2, 2, 2))
    out, sizes = ops.concat_channels_forward([a])
    np.testing.assert_array_equal(out, a)
    b = rng.standard_normal((2, 5, 2, 2, 2))
    out, sizes = ops.concat_channels_forward([a, b])
    assert out.shape[1] == 8
    np.testing.assert_array_equal(out[:, :3], a)
    g = rng.standard_normal(out.shape)
    ga, gb = ops.concat_channels_backward(g, sizes)
    assert ga.tobytes() == np.ascontiguousarray(g[:, :3]).tobytes()
    assert gb.tobytes() == np.ascontiguousarray(g[:, 3:]).tobytes()
    with pytest.raises(DimensionError):
        ops.concat_channels_forward([a, np.zeros((2, 1, 2, 2, 3))])


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_gradcheck(seed):
    rng = np.random.default_rng(seed)
    arrs = [_rand(rng, (1, c, 2, 2, 2)) for c in (2, 1, 3)]
    errs = gradient_errors(lambda *a: ops.concat_channels_forward(list(a)), ops.concat_channels_backward, arrs, seed)
    assert max(errs) < 1e-4


# -- softmax cross-entropy --------------------------------------------------------


def test_ce_uniform():
    loss, _ = ops.softmax_cross_entropy(np.zeros((2, 4)), [0, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_ce_margin_monotone():
    losses = []
    for margin in [0.0, 1.0, 2.0, 5.0, 10.0, 50.0]:
        logits = np.zeros((1, 3))
        logits[0, 1] = margin
        losses.append(ops.softmax_cross_entropy(logits, [1])[0])
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20 and min(losses) >= 0


@pytest.mark.parametrize("seed", SEEDS)
def test_ce_gradcheck(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, 5)) * 2
    labels = rng.integers(0, 5, 3)
    loss, grad = ops.softmax_cross_entropy(logits, labels)
    from oracles import numeric_grad, rel_error

    num = numeric_grad(lambda: ops.softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_error(grad, num) < 1e-4
    assert np.abs(grad.sum(axis=1)).max() < 1e-6


def test_ce_bad_label():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(np.zeros((1, 3)), [3])
