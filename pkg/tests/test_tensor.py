import math

import numpy as np
import pytest

from edgedoc import tensor as T
from edgedoc.tensor import Tensor, gradcheck


def _weighted_sum(out: Tensor, r: np.ndarray) -> Tensor:
    return T.sum_reduce(T.mul(out, Tensor(r)))


def _rand_shape(rng, ndim, lo=1, hi=6):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def conv2d_reference(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), np.float64)
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


# -- forward examples -----------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_depthwise_constant_field_interior():
    c = 2.5
    rng = np.random.default_rng(0)
    k = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    x = np.full((1, 3, 7, 7), c, np.float32)
    out = T.depthwise_conv2d(Tensor(x), Tensor(k)).data
    for ch in range(3):
        s = float(k[ch].sum(dtype=np.float64))
        np.testing.assert_allclose(out[0, ch, 1:-1, 1:-1], c * s, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (4, 0, 4), (2, 0, 2)])
def test_conv2d_matches_loop_reference(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv2d_reference(x, w, b, stride, pad), atol=1e-5)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.standard_normal(_rand_shape(rng, 3)) * 5
        y = T.softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-5)
        assert y.min() >= 0 and y.max() <= 1


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.standard_normal((3, 7)) * rng.uniform(0.5, 10) + rng.uniform(-5, 5)
        y = T.layer_norm(Tensor(x)).data.astype(np.float64)
        assert np.all(np.abs(y.mean(-1)) < 1e-4)
        assert np.all(np.abs(y.var(-1) - 1) < 1e-3)


def test_layer_norm_channel_axis_matches_last_axis():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 3, 4)).astype(np.float32)
    a = T.layer_norm(Tensor(x), axis=1).data
    b = T.layer_norm(Tensor(x.transpose(0, 2, 3, 1))).data.transpose(0, 3, 1, 2)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_upsample_and_pad_shapes():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    up = T.upsample_nearest2x(x).data
    assert up.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(up[0, 0, :2, :2], 0)
    assert T.pad_zero(x, (1, 2, 3, 4)).shape == (1, 1, 5, 9)


# -- backward examples ----------------------------------------------------


def test_backward_mean():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(2, 2), requires_grad=True)
    with T.new_graph():
        T.backward(T.mean_reduce(x))
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 0.25))


def test_backward_sigmoid_at_zero():
    x = Tensor([0.0], requires_grad=True)
    with T.new_graph():
        T.backward(T.sum_reduce(T.sigmoid(x)))
    np.testing.assert_allclose(x.grad, [0.25])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.new_graph():
        with pytest.raises(T.GraphError):
            T.backward(T.scale(x, 2.0))


def test_second_backward_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.new_graph() as g:
        y = T.sum_reduce(T.mul(x, x))
        T.backward(y)
        assert len(g) == 0
        with pytest.raises(T.GraphError):
            T.backward(y)
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_grads_accumulate_across_graphs():
    x = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with T.new_graph():
            T.backward(T.sum_reduce(T.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6, 6])


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.new_graph() as g:
        y = T.sum_reduce(T.relu(T.mul(T.add(x, x), x)))
        produced = {}
        for node in g.nodes:
            for inp in node.inputs:
                if inp._graph is g:
                    assert produced[id(inp)] < node.index
            produced[id(node.output)] = node.index
        T.backward(y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.new_graph() as g, T.no_grad():
        y = T.sigmoid(x)
    assert len(g) == 0 and not y.requires_grad


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "matmul" in str(exc.value) and "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))))


def test_debug_mode_flags_non_finite():
    x = Tensor([1.0, 0.0], requires_grad=True)
    with T.new_graph(), T.debug_mode():
        with pytest.raises(T.NumericError) as exc:
            T.div(x, Tensor([1.0, 0.0]))
    assert exc.value.node_id == 0


# -- gradcheck ------------------------------------------------------------


def test_gradcheck_linear_is_exact():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert gradcheck(lambda t: T.sum_reduce(t), x) < 1e-6


def _check_unary(op, shape_fn, n_trials=100, tol=1e-3, away_from_zero=False, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        x = rng.standard_normal(shape_fn(rng)).astype(np.float32)
        if away_from_zero:
            x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-9), x)
        r = rng.uniform(-1, 1, size=op(Tensor(x)).shape).astype(np.float32)
        worst = max(worst, gradcheck(lambda t: _weighted_sum(op(t), r), x, eps=1e-4))
    assert worst < tol, worst
    return worst


def _nchw(rng):
    return (1,) + _rand_shape(rng, 3)


PRIMITIVE_CASES = {
    "relu": (T.relu, lambda r: _rand_shape(r, 2), 1e-3, True),
    "gelu": (T.gelu, lambda r: _rand_shape(r, 2), 1e-3, False),
    "sigmoid": (T.sigmoid, lambda r: _rand_shape(r, 2), 1e-3, False),
    "scale": (lambda t: T.scale(t, -1.7), lambda r: _rand_shape(r, 2), 1e-3, False),
    "softmax_lastdim": (T.softmax_lastdim, lambda r: _rand_shape(r, 2, 2), 1e-3, False),
    # a 2-element normalized axis maps onto +-1, which is degenerate for finite differences
    "layer_norm": (T.layer_norm, lambda r: _rand_shape(r, 2, 3), 1e-3, False),
    "layer_norm_channels": (lambda t: T.layer_norm(t, axis=1), lambda r: (1,) + _rand_shape(r, 3, 3), 1e-3, False),
    "l2_normalize_lastdim": (T.l2_normalize_lastdim, lambda r: _rand_shape(r, 2), 1e-3, False),
    "mean_reduce": (lambda t: T.mean_reduce(t, axis=(2, 3)), _nchw, 1e-3, False),
    "sum_reduce": (lambda t: T.sum_reduce(t, axis=1, keepdims=True), _nchw, 1e-3, False),
    "upsample_nearest2x": (T.upsample_nearest2x, _nchw, 1e-3, False),
    "pad_zero": (lambda t: T.pad_zero(t, (1, 0, 2, 1)), _nchw, 1e-3, False),
    "transpose": (T.transpose, lambda r: _rand_shape(r, 3), 1e-3, False),
    "reshape": (lambda t: T.reshape(t, (-1,)), lambda r: _rand_shape(r, 3), 1e-3, False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_unary_primitive_gradcheck(name):
    op, shape_fn, tol, away = PRIMITIVE_CASES[name]
    _check_unary(op, shape_fn, tol=tol, away_from_zero=away)


def _check_binary(make, n_trials=100, tol=1e-3, seed=0):
    """``make(rng)`` returns (fn(a, b) -> Tensor, a, b); both operands are checked."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        fn, a, b = make(rng)
        r = rng.uniform(-1, 1, size=fn(Tensor(a), Tensor(b)).shape).astype(np.float32)
        worst = max(worst, gradcheck(lambda t: _weighted_sum(fn(t, Tensor(b)), r), a, eps=1e-4))
        worst = max(worst, gradcheck(lambda t: _weighted_sum(fn(Tensor(a), t), r), b, eps=1e-4))
    assert worst < tol, worst


def _f32(rng, shape):
    return rng.standard_normal(shape).astype(np.float32)


def _make_add(rng):
    s = _rand_shape(rng, 3)
    return T.add, _f32(rng, s), _f32(rng, (1,) + s[1:])


def _make_mul(rng):
    s = _rand_shape(rng, 3)
    return T.mul, _f32(rng, s), _f32(rng, s[:2] + (1,))


def _make_div(rng):
    s = _rand_shape(rng, 2)
    b = rng.uniform(0.5, 2.0, size=s).astype(np.float32) * rng.choice([-1, 1], size=s)
    return T.div, _f32(rng, s), b.astype(np.float32)


def _make_matmul(rng):
    n, k, m = _rand_shape(rng, 3)
    return T.matmul, _f32(rng, (2, n, k)), _f32(rng, (k, m))


def _make_conv2d(rng):
    c, o = _rand_shape(rng, 2, 1, 3)
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k))
    h = int(rng.integers(k, 7))
    x = _f32(rng, (1, c, h, h))
    w = _f32(rng, (o, c, k, k))
    return (lambda a, b: T.conv2d(a, b, stride=stride, padding=pad)), x, w


def _make_depthwise(rng):
    c = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    h, w = _rand_shape(rng, 2, 2, 6)
    return T.depthwise_conv2d, _f32(rng, (1, c, h, w)), _f32(rng, (c, 1, k, k))


def _make_concat(rng):
    h, w = _rand_shape(rng, 2)
    return (lambda a, b: T.concat_channels([a, b])), _f32(rng, (1, 2, h, w)), _f32(rng, (1, 3, h, w))


def _make_layer_norm_affine(rng):
    s = _rand_shape(rng, 2, 3)
    return (lambda a, wt: T.layer_norm(a, wt, None)), _f32(rng, s), _f32(rng, (s[-1],))


BINARY_CASES = {
    "add": (_make_add, 1e-3),
    "mul": (_make_mul, 1e-3),
    "div": (_make_div, 1e-3),
    "matmul": (_make_matmul, 1e-3),
    "conv2d": (_make_conv2d, 1e-3),
    "depthwise_conv2d": (_make_depthwise, 1e-3),
    "concat_channels": (_make_concat, 1e-3),
    "layer_norm_affine": (_make_layer_norm_affine, 1e-3),
}


@pytest.mark.parametrize("name", sorted(BINARY_CASES))
def test_binary_primitive_gradcheck(name):
    make, tol = BINARY_CASES[name]
    _check_binary(make, tol=tol)


def test_conv_bias_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(_f32(rng, (2, 3, 5, 5)))
    w = Tensor(_f32(rng, (4, 3, 3, 3)))
    r = rng.uniform(-1, 1, (2, 4, 5, 5)).astype(np.float32)
    err = gradcheck(lambda b: _weighted_sum(T.conv2d(x, w, b, padding=1), r), _f32(rng, (4,)))
    assert err < 1e-3


def test_bce_with_logits_gradcheck():
    rng = np.random.default_rng(6)
    y = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(np.float32)
    assert gradcheck(lambda z: T.bce_with_logits(z, y), _f32(rng, (1, 1, 4, 4))) < 1e-3


def test_bce_stable_form_matches_naive():
    z = np.array([-3.0, 0.0, 2.5], np.float32)
    y = np.array([0.0, 1.0, 0.3], np.float32)
    naive = -(y * np.log(1 / (1 + np.exp(-z))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z))))
    assert math.isclose(float(T.bce_with_logits(Tensor(z), y).data), naive.mean(), rel_tol=1e-6)
