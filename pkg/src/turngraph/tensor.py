"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output remembers its parents and a backward rule; :func:`backward` walks that
record in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "no_grad",
    "backward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "tanh",
    "sigmoid", "relu", "leaky_relu", "sum", "mean", "reshape", "transpose",
    "concat", "stack", "take", "matmul", "einsum", "softmax",
    "segment_sum", "segment_softmax", "l2_norm", "normalize",
    "cosine_similarity", "cosine_matrix", "mse", "dropout",
]

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-16

_state = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives operands whose shapes it cannot combine."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self): return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = rule
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[index[e]] += values[e] for a 1-D index, via a sparse matmul
    (much faster than ``np.add.at``)."""
    E = len(index)
    flat = values.reshape(E, -1)
    m = sparse.csr_matrix((np.ones(E), (index, np.arange(E))), shape=(n, E))
    return np.asarray(m @ flat).reshape((n,) + values.shape[1:])


def _segment_max(a: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n,) + a.shape[1:], -np.inf)
    if len(segments) == 0:
        return out
    order = np.argsort(segments, kind="stable")
    seg_sorted = segments[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    out[seg_sorted[starts]] = np.maximum.reduceat(a[order], starts, axis=0)
    return out


def _leading_index(idx, shape) -> np.ndarray | None:
    """Flat row index when ``idx`` is one or more equal-length 1-D integer
    arrays addressing the leading dims; None otherwise."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    if not parts or len(parts) > len(shape):
        return None
    arrays = []
    for p in parts:
        if not isinstance(p, np.ndarray) or p.ndim != 1 or p.dtype.kind not in "iu":
            return None
        arrays.append(p)
    if len({len(p) for p in arrays}) != 1:
        return None
    if len(arrays) == 1:
        return arrays[0] % shape[0]
    return np.ravel_multi_index(tuple(arrays), shape[:len(arrays)], mode="wrap")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is released afterwards, so each forward supports exactly
    one backward pass.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        node._parents = ()
        node._backward = None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so large |x| never overflows exp
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _record(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# reductions and shape ----------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis, keepdims), float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, rule, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record(out, ts, rule, "stack")


def take(a, idx) -> Tensor:
    """Numpy-style indexing (basic or fancy); repeated indices accumulate."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as err:
        raise ShapeError("take", a.shape, detail=str(err)) from None

    rows = _leading_index(idx, a.shape)

    def rule(g):
        if rows is not None:
            k = len(idx) if isinstance(idx, tuple) else 1
            lead = int(np.prod(a.shape[:k]))
            return (_scatter_rows(rows, g, lead).reshape(a.shape),)
        full = np.zeros_like(a.data)
        if _is_basic(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), rule, "take")


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def rule(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), rule, "matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every operand index must appear in the other
    operand or in the output."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or not set(own) <= set(other) | set(out_sub):
            raise ValueError(f"einsum: unsupported subscripts {spec!r}")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError:
        raise ShapeError("einsum", a.shape, b.shape, detail=spec) from None

    def rule(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _record(out, (a, b), rule, "einsum")


# normalizations -------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), rule, "softmax")


def segment_sum(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segments``."""
    a = as_tensor(a)
    segments = np.asarray(segments)
    if segments.shape != a.shape[:1]:
        raise ShapeError("segment_sum", a.shape, segments.shape)
    out = _scatter_rows(segments, a.data, num_segments)
    return _record(out, (a,), lambda g: (g[segments],), "segment_sum")


def segment_softmax(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of the rows of ``a`` within each segment, independently per column."""
    a = as_tensor(a)
    segments = np.asarray(segments)
    if segments.shape != a.shape[:1]:
        raise ShapeError("segment_softmax", a.shape, segments.shape)
    peak = _segment_max(a.data, segments, num_segments)
    e = np.exp(a.data - peak[segments])
    total = _scatter_rows(segments, e, num_segments)
    out = e / total[segments]

    def rule(g):
        inner = _scatter_rows(segments, g * out, num_segments)
        return (out * (g - inner[segments]),)

    return _record(out, (a,), rule, "segment_softmax")


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + NORM_EPS)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * a.data / out,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _record(res, (a,), rule, "l2_norm")


def normalize(a, axis: int = -1) -> Tensor:
    return div(a, l2_norm(a, axis=axis, keepdims=True))


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return sum(mul(normalize(a, axis), normalize(b, axis)), axis=axis)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` [n, d] and ``b`` [m, d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_matrix", a.shape, b.shape)
    return matmul(normalize(a), transpose(normalize(b)))


def mse(pred, target) -> Tensor:
    """Mean squared error, averaged over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        try:
            np.broadcast_shapes(pred.shape, target.shape)
        except ValueError:
            raise ShapeError("mse", pred.shape, target.shape) from None
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    a = as_tensor(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)
