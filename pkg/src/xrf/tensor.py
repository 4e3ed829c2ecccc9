"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node holding its inputs, its output
and a local-gradient rule. Nodes carry a monotonically increasing sequence
number, so the set of nodes reachable from any tensor, sorted by sequence,
is a topologically ordered graph. ``Tensor.backward`` walks that graph once
in reverse, applying each local-gradient rule exactly one time and
accumulating into the ``.grad`` buffers of every tensor that requires them.

All data is 64-bit; broadcasting follows trailing-aligned singleton
expansion. Calling ``backward`` again without clearing ``.grad`` accumulates.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reshape",
    "transpose",
    "softmax",
    "conv2d",
    "maxpool2d",
    "grad_eval_count",
    "reset_grad_eval_count",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf values."""


_node_seq = itertools.count()
_grad_evals = 0
_grad_enabled = True


def grad_eval_count() -> int:
    """Local-gradient rule applications since the last reset."""
    return _grad_evals


def reset_grad_eval_count() -> None:
    global _grad_evals
    _grad_evals = 0


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded operation: inputs, output, and its local-gradient rule."""

    __slots__ = ("op", "inputs", "output", "grad_fn", "seq")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn
        self.seq = next(_node_seq)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Graph:
    """The operation nodes reachable from one tensor, topologically ordered.

    Sequence numbers increase monotonically at recording time and every
    node's inputs are created before the node itself, so sorting by
    sequence yields a valid topological order.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: "Tensor") -> "Graph":
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """N-dimensional float64 array participating in automatic differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> None:
        """Populate ``.grad`` for every reachable tensor that requires it.

        The loss must be scalar. Nodes are processed in reverse topological
        order, so each local-gradient rule runs exactly once per call; the
        upstream gradient of a tensor is fully accumulated before its own
        node is visited. Gradients add into existing ``.grad`` buffers.
        """
        global _grad_evals
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self.node is None:
            if self.requires_grad:
                ones = np.ones_like(self.data)
                self.grad = ones if self.grad is None else self.grad + ones
            return
        graph = Graph.trace(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        holders: dict[int, Tensor] = {id(self): self}
        for node in reversed(graph.nodes):
            out = node.output
            gout = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if gout is None:
                continue
            if out.requires_grad:
                out.grad = gout if out.grad is None else out.grad + gout
            _grad_evals += 1
            gins = node.grad_fn(gout)
            for inp, gin in zip(node.inputs, gins):
                if gin is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
                    holders[key] = inp
        for key, g in grads.items():
            t = holders[key]
            if t.requires_grad:
                t.grad = np.array(g) if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a computed result as a recorded differentiable operation.

    ``grad_fn`` maps the upstream gradient to per-input gradients aligned
    with ``inputs`` (``None`` for inputs that need no gradient).
    """
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), out, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting broadcast expansion."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_result(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_result("add", a, b, np.add)
    return custom_op(
        "add",
        (a, b),
        data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_result("sub", a, b, np.subtract)
    return custom_op(
        "sub",
        (a, b),
        data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_result("mul", a, b, np.multiply)
    return custom_op(
        "mul",
        (a, b),
        data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_result("div", a, b, np.divide)
    return custom_op(
        "div",
        (a, b),
        data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading dimensions when present."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2+ dimensional operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible") from e

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return custom_op("matmul", (a, b), data, grad_fn)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    data = np.maximum(t.data, 0.0)
    return custom_op("relu", (t,), data, lambda g: (g * (t.data > 0.0),))


def gelu(t) -> Tensor:
    """Gaussian error linear unit in its exact erf form."""
    t = _as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return custom_op("gelu", (t,), data, grad_fn)


def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    s = special.expit(t.data)
    return custom_op("sigmoid", (t,), s, lambda g: (g * s * (1.0 - s),))


def exp(t) -> Tensor:
    t = _as_tensor(t)
    with np.errstate(over="ignore"):
        data = np.exp(t.data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("exp produced non-finite values")
    return custom_op("exp", (t,), data, lambda g: (g * data,))


def log(t) -> Tensor:
    t = _as_tensor(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(t.data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("log produced non-finite values")
    return custom_op("log", (t,), data, lambda g: (g / t.data,))


def sqrt(t) -> Tensor:
    t = _as_tensor(t)
    data = np.sqrt(t.data)
    return custom_op("sqrt", (t,), data, lambda g: (g * 0.5 / data,))


def _normalize_axes(axis, ndim: int, shape: tuple) -> tuple:
    if axis is None:
        axes = tuple(range(ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for shape {shape}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate reduction axes {axes}")
    for ax in norm:
        if shape[ax] == 0:
            raise ShapeError(f"cannot reduce over empty axis {ax} of shape {shape}")
    return tuple(sorted(norm))


def _expand_reduced(g: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def reduce_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _normalize_axes(axis, t.ndim, t.shape)
    data = t.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        g = _expand_reduced(g, axes, keepdims)
        return (np.broadcast_to(g, t.shape).copy(),)

    return custom_op("sum", (t,), data, grad_fn)


def reduce_mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _normalize_axes(axis, t.ndim, t.shape)
    count = 1
    for ax in axes:
        count *= t.shape[ax]
    data = t.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        g = _expand_reduced(g, axes, keepdims)
        return (np.broadcast_to(g / count, t.shape).copy(),)

    return custom_op("mean", (t,), data, grad_fn)


def reduce_max(t, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient routes to the first (lowest flat index) argmax."""
    t = _as_tensor(t)
    axes = _normalize_axes(axis, t.ndim, t.shape)
    data = t.data.max(axis=axes, keepdims=keepdims)
    kept = tuple(i for i in range(t.ndim) if i not in axes)
    perm = kept + axes
    kept_shape = tuple(t.shape[i] for i in kept)
    red_shape = tuple(t.shape[i] for i in axes)
    moved = t.data.transpose(perm).reshape(int(np.prod(kept_shape, dtype=np.int64)), -1)
    argmax = moved.argmax(axis=1)

    def grad_fn(g):
        g = _expand_reduced(g, axes, keepdims)
        flat = np.zeros_like(moved)
        flat[np.arange(flat.shape[0]), argmax] = g.transpose(perm).ravel()
        inv = np.argsort(perm)
        return (flat.reshape(kept_shape + red_shape).transpose(inv),)

    return custom_op("max", (t,), data, grad_fn)


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    try:
        data = t.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}") from e
    return custom_op("reshape", (t,), data, lambda g: (g.reshape(t.shape),))


def transpose(t, axes) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(axes)
    data = t.data.transpose(axes)
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", (t,), data, lambda g: (g.transpose(inv),))


def softmax(t, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    t = _as_tensor(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", (t,), s, grad_fn)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of ``x`` [N,C,H,W] with filters ``w`` [O,C,kh,kw].

    Implemented as an im2col matrix product; the input gradient is
    reconstructed by overlap-adding the column gradients back into place.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    p, s = int(padding), int(stride)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} (stride {s}, padding {p}) exceeds input {h}x{wd}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        grads = (gx, gw) if b is None else (gx, gw, gb)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return custom_op("conv2d", inputs, out, grad_fn)


def maxpool2d(x, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling with gradient routed to each window's first maximum."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4D input, got {x.shape}")
    n, c, h, wd = x.shape
    k, s, p = int(window), int(stride), int(padding)
    if k > h + 2 * p or k > wd + 2 * p:
        raise ShapeError(f"pool window {k} exceeds padded input {h + 2 * p}x{wd + 2 * p}")
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d produces empty output for input {h}x{wd}")
    if p:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    else:
        xp = x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = win.max(axis=(-2, -1))
    argmax = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)

    def grad_fn(g):
        gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for idx in range(k * k):
            i, j = divmod(idx, k)
            mask = argmax == idx
            view = gxp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            view[mask] += g[mask]
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return (gx,)

    return custom_op("maxpool2d", (x,), out, grad_fn)
