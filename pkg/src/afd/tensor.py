"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation that touches a tensor with ``requires_grad``
records a :class:`Node` carrying a strictly increasing sequence number. Because
a node can only be created after all of its inputs exist, sorting the nodes
reachable from a loss by that number gives a valid topological order, and the
backward sweep is simply a walk over that slice of the tape in reverse.

Broadcasting is deliberately limited to scalars (Python numbers and 0-d
tensors). Anything else must be spelled out with :func:`expand`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DetachedTensor, DomainError, InvalidAxis, NotScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "Node",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "abs",
    "square",
    "sqrt",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "maximum",
    "minimum",
    "clamp",
    "smooth_l1",
    "elementwise",
    "softmax",
    "log_softmax",
    "reduce",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "expand",
    "concat",
    "stack",
    "getitem",
    "conv2d",
    "upsample_nearest",
    "backward",
    "gradients",
    "finite_diff_grad",
]

_seq = itertools.count()
_grad_enabled = True


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = self.name
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None):
        return sum(self, axes)

    def mean(self, axes=None):
        return mean(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@contextlib.contextmanager
def no_grad():
    """Disable recording on the tape inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


# ---------------------------------------------------------------------------
# helpers


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced a non-finite value")


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(a) for a in axes)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise InvalidAxis(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise InvalidAxis(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _binary_operands(a, b, op: str):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")
    return a, b


def _unscalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reverse of scalar broadcasting
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _unscalar(g, a.shape), _unscalar(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _unscalar(g, a.shape), _unscalar(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unscalar(g * bd, a.shape), _unscalar(g * ad, b.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    _check_finite(out, "div")

    def bw(g):
        return _unscalar(g / bd, a.shape), _unscalar(-g * out / bd, b.shape)

    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, k: float) -> Tensor:
    """Multiply by a Python constant."""
    a = _as_tensor(a)
    k = float(k)
    return _result(a.data * k, (a,), lambda g: (g * k,), "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        # derivative at exactly 0 is taken as 0
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _result(out, (a,), bw, "sqrt")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return _unscalar(g * pick_a, a.shape), _unscalar(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unscalar(g * pick_a, a.shape), _unscalar(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    passes = out == a.data
    return _result(out, (a,), lambda g: (g * passes,), "clamp")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Huber-style smooth L1: quadratic below ``beta``, linear above."""
    a = _as_tensor(a)
    ad = a.data
    ax = np.abs(ad)
    quad = ax < beta
    out = np.where(quad, 0.5 * ad * ad / beta, ax - 0.5 * beta)
    d = np.where(quad, ad / beta, np.sign(ad))
    return _result(out, (a,), lambda g: (g * d,), "smooth_l1")


_UNARY = {
    "relu": relu,
    "abs": abs,
    "square": square,
    "sqrt": sqrt,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale-by-constant`` takes a Python number as ``b``.
    """
    if kind in _BINARY:
        if b is None:
            raise ShapeMismatch(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in ("scale", "scale-by-constant"):
        return scale(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# softmax and reductions


def _move_axes_last(x: np.ndarray, axes: tuple):
    rest = [i for i in range(x.ndim) if i not in axes]
    perm = rest + list(axes)
    moved = np.transpose(x, perm)
    lead = moved.shape[: len(rest)]
    flat = moved.reshape(lead + (-1,))
    return flat, perm, moved.shape


def _restore_axes(flat: np.ndarray, perm: list, moved_shape: tuple) -> np.ndarray:
    inv = np.argsort(perm)
    return np.transpose(flat.reshape(moved_shape), inv)


def softmax(x, axes, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the joint set of ``axes``.

    ``mask`` (boolean, same shape as ``x``) restricts the support: entries
    where it is False get logit -inf and therefore probability exactly 0.
    Every slice must keep at least one admissible entry.
    """
    x = _as_tensor(x)
    if axes is None or (not isinstance(axes, (int, np.integer)) and len(tuple(axes)) == 0):
        raise InvalidAxis("softmax needs at least one axis")
    axes = _norm_axes(axes, x.ndim)
    flat, perm, moved_shape = _move_axes_last(x.data, axes)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        mflat, _, _ = _move_axes_last(mask, axes)
        if not np.all(mflat.any(axis=-1)):
            raise DomainError("softmax slice with empty support")
        logits = np.where(mflat, flat, -np.inf)
    else:
        logits = flat
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _restore_axes(s, perm, moved_shape)

    def bw(g):
        gflat, _, _ = _move_axes_last(g, axes)
        dx = s * (gflat - (gflat * s).sum(axis=-1, keepdims=True))
        return (_restore_axes(dx, perm, moved_shape),)

    return _result(np.ascontiguousarray(out), (x,), bw, "softmax")


def log_softmax(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    flat, perm, moved_shape = _move_axes_last(x.data, axes)
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ls = z - lse
    s = np.exp(ls)
    out = _restore_axes(ls, perm, moved_shape)

    def bw(g):
        gflat, _, _ = _move_axes_last(g, axes)
        dx = gflat - s * gflat.sum(axis=-1, keepdims=True)
        return (_restore_axes(dx, perm, moved_shape),)

    return _result(np.ascontiguousarray(out), (x,), bw, "log_softmax")


def reduce(x, axes=None, kind: str = "sum") -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes) if axes else x.data.copy()
    if kind == "mean":
        out = out / count
    in_shape = x.shape

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        g = np.broadcast_to(g, in_shape)
        if kind == "mean":
            g = g / count
        return (np.array(g),)

    return _result(np.asarray(out, dtype=np.float64), (x,), bw, kind)


def sum(x, axes=None) -> Tensor:  # noqa: A001
    return reduce(x, axes, "sum")


def mean(x, axes=None) -> Tensor:
    return reduce(x, axes, "mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    in_shape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(x, perm) -> Tensor:
    x = _as_tensor(x)
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise InvalidAxis(f"bad permutation {perm} for rank {x.ndim}")
    inv = tuple(np.argsort(perm))
    return _result(np.transpose(x.data, perm), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x, shape) -> Tensor:
    """Explicit broadcast of size-1 dimensions; ranks must match."""
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim:
        raise ShapeMismatch(f"expand: rank {x.ndim} -> {len(shape)}")
    axes = []
    for i, (s, t) in enumerate(zip(x.shape, shape)):
        if s != t:
            if s != 1:
                raise ShapeMismatch(f"expand: cannot expand dim {i} of size {s} to {t}")
            axes.append(i)
    axes = tuple(axes)
    out = np.broadcast_to(x.data, shape)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _result(out, (x,), bw, "expand")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeMismatch("concat: incompatible shapes")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeMismatch("stack: all tensors must share a shape")
    axis = axis % (len(shape) + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]
    in_shape = x.shape

    basic = _is_basic_index(index)

    def bw(g):
        z = np.zeros(in_shape)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _result(np.array(out, dtype=np.float64), (x,), bw, "getitem")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes, built from expand."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    y = reshape(x, (n, c, h, 1, w, 1))
    y = expand(y, (n, c, h, factor, w, factor))
    return reshape(y, (n, c, h * factor, w * factor))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, square kernels."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d expects x[N,C,H,W] and w[O,C,k,k]")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {w.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (o,):
            raise ShapeMismatch(f"conv2d: bias {b.shape} vs {o} output channels")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1:
        win = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        cols = win.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gflat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gflat.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = (gflat @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, bw, "conv2d")


# ---------------------------------------------------------------------------
# backward


def _backprop(loss: Tensor) -> dict:
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
        raise NotScalar(f"loss must be a scalar, got shape {getattr(loss, 'shape', None)}")
    if loss.node is None:
        raise DetachedTensor("loss is not recorded on the tape (no input requires grad)")

    # gather the reachable slice of the tape
    nodes = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t.node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        for inp in t.node.inputs:
            if inp.requires_grad and inp.node is not None and id(inp) not in nodes:
                stack_.append(inp)
    order = sorted(nodes.values(), key=lambda t: t.node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict = {}
    leaves: dict = {}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            store = grads if inp.node is not None else leaf_grads
            key = id(inp)
            if key in store:
                store[key] = store[key] + gi
            else:
                store[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
                if inp.node is None:
                    leaves[key] = inp
    return leaf_grads, leaves


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    leaf_grads, leaves = _backprop(loss)
    for key, g in leaf_grads.items():
        leaf = leaves[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def gradients(loss: Tensor, leaves: Iterable[Tensor]) -> list:
    """Return d(loss)/d(leaf) for each leaf; unreachable leaves get zeros."""
    leaf_grads, _ = _backprop(loss)
    return [np.array(leaf_grads[id(t)]) if id(t) in leaf_grads else np.zeros(t.shape) for t in leaves]


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        with no_grad():
            r = f(Tensor(arr))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
