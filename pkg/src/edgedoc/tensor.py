"""Dense float32 tensors with a dynamic reverse-mode tape.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, appends a node to the active :class:`Graph`.  Calling
:func:`backward` walks that graph once in reverse and accumulates gradients
into the leaves.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FloatingPointError):
    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"non-finite output from {op} at node {node_id}")


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph", "_produced", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype.get())
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self._produced = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph recording


class Node:
    __slots__ = ("index", "op", "inputs", "output", "backward_fn")

    def __init__(self, index, op, inputs, output, backward_fn):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Ordered record of primitive applications (the tape)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> Node:
        node = Node(len(self.nodes), op, tuple(inputs), output, backward_fn)
        self.nodes.append(node)
        output._graph = self
        output._produced = True
        return node

    def reset(self) -> None:
        for node in self.nodes:
            node.output._graph = None
        self.nodes = []


_DEFAULT_GRAPH = Graph()
_active_graph: contextvars.ContextVar[Graph] = contextvars.ContextVar("edgedoc_graph", default=_DEFAULT_GRAPH)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("edgedoc_grad", default=True)
_debug: contextvars.ContextVar[bool] = contextvars.ContextVar("edgedoc_debug", default=False)
_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("edgedoc_dtype", default=DTYPE)


def active_graph() -> Graph:
    return _active_graph.get()


@contextlib.contextmanager
def new_graph() -> Iterator[Graph]:
    """Record into a fresh graph for the duration of the block."""
    g = Graph()
    token = _active_graph.set(g)
    try:
        yield g
    finally:
        _active_graph.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every primitive output for NaN/Inf while active."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Compute new tensors in ``dtype`` (float32 by default; float64 for reference evaluations)."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor.__new__(Tensor)
    dt = _dtype.get()
    t.data = out if out.dtype == dt else out.astype(dt)
    t.requires_grad = False
    t.grad = None
    t._graph = None
    t._produced = False
    t.name = None
    graph = _active_graph.get()
    if _grad_enabled.get() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        node = graph.record(op, inputs, t, backward_fn)
        node_id = node.index
    else:
        node_id = -1
    if _debug.get() and not np.all(np.isfinite(t.data)):
        raise NumericError(op, node_id)
    return t


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    The graph is consumed: nodes are dropped afterwards, so a second call on the
    same root raises :class:`GraphError`.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not require grad")
    if root.is_leaf:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    if root._graph is None:
        raise GraphError("graph already consumed; run the forward pass again")
    graph = root._graph if graph is None else graph
    if root._graph is not graph:
        raise GraphError("root was not produced on the given graph")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.dtype != inp.data.dtype:
                gi = gi.astype(inp.data.dtype)
            if inp._graph is graph:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    graph.reset()


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.maximum(x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_K * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * d,)

    return _make("gelu", out, (x,), bw)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(DTYPE(0), -z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax_lastdim", out, (x,), bw)


def l2_normalize_lastdim(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1, keepdims=True)).astype(x.data.dtype)
    clamped = norm <= eps
    denom = np.where(clamped, DTYPE(eps), norm)
    out = x.data / denom

    def bw(g):
        proj = np.where(clamped, DTYPE(0), (g * out).sum(axis=-1, keepdims=True))
        return ((g - out * proj) / denom,)

    return _make("l2_normalize_lastdim", out, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalize along one axis; optional affine parameters shaped like that axis."""
    axis = axis % x.ndim
    c = x.shape[axis]
    for p in (weight, bias):
        if p is not None and p.shape != (c,):
            raise ShapeError("layer_norm", x.shape, p.shape, detail=f"affine must be ({c},)")
    bshape = [1] * x.ndim
    bshape[axis] = c
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * rstd
    w = weight.data.reshape(bshape) if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)
    inputs = [x] + [p for p in (weight, bias) if p is not None]

    def bw(g):
        gx_hat = g * w if w is not None else g
        m1 = gx_hat.mean(axis=axis, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=axis, keepdims=True)
        grads = [rstd * (gx_hat - m1 - xhat * m2)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=other))
        if bias is not None:
            grads.append(g.sum(axis=other))
        return grads

    return _make("layer_norm", out, inputs, bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum_reduce", np.asarray(out), (x,), bw)


def mean_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)
    inv = 1.0 / n

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _make("mean_reduce", np.asarray(out), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    old = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make("transpose", out, (x,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", out, (a, b), bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError("concat_channels", ref, t.shape)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return _make("concat_channels", out, xs, lambda g: tuple(np.split(g, splits, axis=1)))


def pad_zero(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the two trailing spatial axes by (top, bottom, left, right)."""
    t, b, l, r = pads
    if min(pads) < 0:
        raise ShapeError("pad_zero", x.shape, detail=f"negative pad {pads}")
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    out = np.pad(x.data, widths)
    h, w = x.shape[-2:]
    return _make("pad_zero", out, (x,), lambda g: (g[..., t:t + h, l:l + w],))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x", x.shape, detail="expected NCHW")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make("upsample_nearest2x", np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation, NCHW input and OCkk kernel, zero padding."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    wd = weight.data
    inputs = [x, weight] + ([bias] if bias is not None else [])

    if kh == 1 and kw == 1 and s == 1 and p == 0:
        xf = x.data.reshape(n, c, h * w)
        w2 = wd.reshape(o, c)
        out = np.matmul(w2, xf)
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(n, o, h, w)

        def bw1(g):
            gf = g.reshape(n, o, h * w)
            gx = np.matmul(w2.T, gf).reshape(x.shape)
            gw = np.einsum("noh,nch->oc", gf, xf, optimize=True).reshape(wd.shape)
            res = [gx, gw]
            if bias is not None:
                res.append(gf.sum(axis=(0, 2)))
            return res

        return _make("conv2d", out, inputs, bw1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # win: N, C, Ho, Wo, kh, kw
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(wd[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += contrib
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return _make("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel (groups=C) convolution, stride 1, 'same' zero padding, odd kernel."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
        raise ShapeError("depthwise_conv2d", x.shape, weight.shape)
    c, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("depthwise_conv2d", x.shape, weight.shape, detail="kernel must be odd")
    if bias is not None and bias.shape != (c,):
        raise ShapeError("depthwise_conv2d", weight.shape, bias.shape, detail="bias")
    n, _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wd = weight.data
    out = np.zeros(x.shape, dtype=np.result_type(x.data, wd))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + h, j : j + w] * wd[:, 0, i, j][None, :, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty(wd.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + h, j : j + w] += g * wd[:, 0, i, j][None, :, None, None]
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + h, j : j + w])
        res = [gxp[:, :, ph : ph + h, pw : pw + w], gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return _make("depthwise_conv2d", out, inputs, bw)


# ---------------------------------------------------------------------------
# fused loss primitive


def bce_with_logits(z: Tensor, target) -> Tensor:
    """Mean of max(z,0) - z*y + log(1 + exp(-|z|)); gradient flows to ``z`` only."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.data.dtype)
    if y.shape != z.shape:
        raise ShapeError("bce_with_logits", z.shape, y.shape)
    zd = z.data
    elem = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    out = np.asarray(elem.mean(dtype=np.float64), dtype=zd.dtype)
    inv = 1.0 / zd.size

    def bw(g):
        return ((_sigmoid_np(zd) - y) * (g * inv),)

    return _make("bce_with_logits", out, (z,), bw)


# ---------------------------------------------------------------------------
# finite-difference check


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-3,
              indices: Sequence[int] | None = None, fd_dtype=np.float64) -> float:
    """Max over checked elements of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    ``g_ad`` comes from one float32 backward pass.  ``g_fd`` uses central
    differences of ``f`` evaluated under ``precision(fd_dtype)``; float64 keeps
    the reference free of float32 cancellation error, pass ``np.float32`` to
    difference the float32 program itself.  ``indices`` restricts the check to
    a subset of flat positions of ``x``.
    """
    base32 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(base32.copy(), requires_grad=True)
    with new_graph():
        out = f(xt)
        backward(out)
    g_ad = xt.grad.reshape(-1) if xt.grad is not None else np.zeros(base32.size, DTYPE)

    base = base32.astype(fd_dtype)
    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad(), precision(fd_dtype):
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            fp = f(Tensor(base)).data.item()
            flat[i] = orig - eps
            lo = float(flat[i])
            fm = f(Tensor(base)).data.item()
            flat[i] = orig
            g_fd = (fp - fm) / (hi - lo)
            ga = float(g_ad[i])
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    return worst
