"""Minimal define-by-run reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays.  Every operation applied to a tensor that
requires a gradient records its inputs and a backward closure on the output
tensor; :func:`backward` collects the reachable records into a
:class:`GraphTape`, orders them by creation (node ids grow monotonically, so
creation order is a topological order) and replays them once in reverse.

Broadcasting is deliberately limited to adding/multiplying a vector across the
rows of a matrix.  Every other binary operation requires identical shapes.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DeterminismError,
    DimensionError,
    DomainError,
    IndexRangeError,
    InvalidMaskError,
)

DTYPE = np.float64

# next() on itertools.count is atomic under the GIL, so ids stay unique across threads
_ids = itertools.count()


class _GradMode(threading.local):
    enabled = True


_mode = _GradMode()


def is_grad_enabled() -> bool:
    return _mode.enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _mode.enabled
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` and record the producing op when any parent needs a gradient.

    ``backward`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` where no gradient flows).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = next(_ids)
    out.op = op
    if _mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _shape_str(t) -> str:
    return "[" + "x".join(str(d) for d in t.shape) + "]" if t.shape else "[scalar]"


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-d operands act as row/column vectors as in numpy."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {_shape_str(a)} and {_shape_str(b)}")
    A, B = a.data, b.data
    out = A @ B

    if A.ndim == 2 and B.ndim == 2:
        def bw(g):
            return g @ B.T, A.T @ g
    elif A.ndim == 2:
        def bw(g):
            return g[:, None] * B, A.T @ g
    elif B.ndim == 2:
        def bw(g):
            return B @ g, A[:, None] * g
    else:
        def bw(g):
            return g * B, g * A

    return _result(np.asarray(out, dtype=DTYPE), (a, b), bw, "matmul")


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for matrices ``a`` [m x k] and ``b`` [n x k]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_t shape mismatch: {_shape_str(a)} and {_shape_str(b)}^T")
    A, B = a.data, b.data

    def bw(g):
        return g @ B, g.T @ A

    return _result(A @ B.T, (a, b), bw, "matmul_t")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 1 / (1 + exp(-x)) without overflow
    return np.exp(-np.logaddexp(0.0, -x))


def unary(kind: str, x: Tensor) -> Tensor:
    X = x.data
    if kind == "tanh":
        y = np.tanh(X)
        return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")
    if kind == "sigmoid":
        y = _sigmoid(X)
        return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    if kind == "exp":
        y = np.exp(X)
        return _result(y, (x,), lambda g: (g * y,), "exp")
    if kind == "log":
        bad = np.argwhere(~(X > 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"log of non-positive value {float(X[idx])!r} at index {idx}")
        return _result(np.log(X), (x,), lambda g: (g / X,), "log")
    if kind == "neg":
        return _result(-X, (x,), lambda g: (-g,), "neg")
    raise ValueError(f"unknown unary op {kind!r}")


def tanh(x):
    return unary("tanh", x)


def sigmoid(x):
    return unary("sigmoid", x)


def exp(x):
    return unary("exp", x)


def log(x):
    return unary("log", x)


def neg(x):
    return unary("neg", x)


def binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape == B.shape:
        bcast = False
    elif A.ndim == 2 and B.ndim == 1 and B.shape[0] == A.shape[1]:
        bcast = True
    else:
        raise DimensionError(f"{kind}: incompatible shapes {_shape_str(a)} and {_shape_str(b)}")

    def fold(g):
        return g.sum(axis=0) if bcast else g

    if kind == "add":
        return _result(A + B, (a, b), lambda g: (g, fold(g)), "add")
    if kind == "sub":
        return _result(A - B, (a, b), lambda g: (g, -fold(g)), "sub")
    if kind == "mul":
        return _result(A * B, (a, b), lambda g: (g * B, fold(g * A)), "mul")
    raise ValueError(f"unknown binary op {kind!r}")


def add(a, b):
    return binary("add", a, b)


def sub(a, b):
    return binary("sub", a, b)


def mul(a, b):
    return binary("mul", a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def softmax_masked(x: Tensor, mask=None) -> Tensor:
    """Softmax over a vector with masked-out positions fixed to exactly zero."""
    X = x.data
    if X.ndim != 1:
        raise DimensionError(f"softmax_masked expects a vector, got {_shape_str(x)}")
    if mask is None:
        m = np.ones(X.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != X.shape:
            raise DimensionError(f"mask shape {m.shape} does not match {_shape_str(x)}")
        if not m.any():
            raise InvalidMaskError("softmax_masked: mask has no true position")
    y = np.zeros_like(X)
    z = X[m] - X[m].max()
    e = np.exp(z)
    y[m] = e / e.sum()

    def bw(g):
        return (y * (g - np.dot(g, y)),)

    return _result(y, (x,), bw, "softmax")


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``[lo, hi)`` of a matrix (or entries of a vector)."""
    n = x.shape[0] if x.ndim else 0
    if not (0 <= lo < hi <= n):
        raise IndexRangeError(f"slice_rows out of range: lo={lo}, hi={hi}, S={n}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[lo:hi] = g
        return (full,)

    return _result(x.data[lo:hi].copy(), (x,), bw, "slice_rows")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows by integer index; an int index yields a single row as a vector."""
    idx = np.asarray(index, dtype=np.intp)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexRangeError(f"take_rows index out of range for {n} rows: {index!r}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if idx.ndim == 0 or np.unique(idx).size == idx.size:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx].copy(), (x,), bw, "take_rows")


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Columns ``[lo, hi)`` of a matrix."""
    if x.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise IndexRangeError(f"slice_cols out of range: lo={lo}, hi={hi}, shape={x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, lo:hi] = g
        return (full,)

    return _result(x.data[:, lo:hi].copy(), (x,), bw, "slice_cols")


def reduce(kind: str, x: Tensor, axis: Optional[int] = None) -> Tensor:
    X = x.data
    if axis is not None and not (-X.ndim <= axis < X.ndim):
        raise DimensionError(f"reduce: invalid axis {axis} for {_shape_str(x)}")
    shape = X.shape
    if kind == "sum":
        count = 1.0
        out = X.sum(axis=axis)
    elif kind == "mean":
        count = float(X.size if axis is None else X.shape[axis])
        out = X.mean(axis=axis)
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), bw, kind)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce("mean", x, axis)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {_shape_str(x)}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {_shape_str(x)} to {shape}") from exc
    return _result(out.copy(), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(_shape_str(p) for p in parts)
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, parts, bw, "concat")


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("stack of zero tensors")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack: shape {_shape_str(p)} differs from {shape}")
    out = np.stack([p.data for p in parts])
    return _result(out, parts, lambda g: tuple(g), "stack")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TapeRecord:
    op: str
    input_ids: tuple
    output_id: int


class GraphTape:
    """Records reachable from an output, in creation (topological) order."""

    def __init__(self, nodes: list):
        self.nodes = sorted(nodes, key=lambda n: n.node_id)

    @classmethod
    def from_output(cls, out: Tensor) -> "GraphTape":
        seen = {out.node_id}
        stack_ = [out]
        nodes = []
        while stack_:
            node = stack_.pop()
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    seen.add(p.node_id)
                    stack_.append(p)
        return cls(nodes)

    @property
    def records(self) -> list:
        return [
            TapeRecord(n.op, tuple(p.node_id for p in n._parents), n.node_id)
            for n in self.nodes
            if n._backward is not None
        ]

    def replay(self, seed_grad: np.ndarray) -> None:
        grads = {self.nodes[-1].node_id: seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got {_shape_str(loss)}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not attached to a recorded graph")
    GraphTape.from_output(loss).replay(np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6, order: int = 2) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` takes no arguments and rebuilds the scalar loss from the current
    values of ``params``.  Relative error is ``|a - b| / max(|a|, |b|, 1e-8)``.
    ``order`` selects the two-point (2) or four-point (4) central stencil; the
    latter keeps truncation error small at a step large enough to swamp
    rounding noise on tiny gradient entries.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    for p in params:
        p.data = np.array(p.data, dtype=np.float64, order="C")
        p.requires_grad = True
        p.grad = None
    loss = f()
    with no_grad():
        again = f()
    if loss.data.tobytes() != again.data.tobytes():
        raise DeterminismError(f"repeated forward gave {loss.item()!r} then {again.item()!r}")
    backward(loss)

    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                vals = {}
                for k in ((1, -1) if order == 2 else (2, 1, -1, -2)):
                    flat[i] = orig + k * eps
                    vals[k] = f().item()
                flat[i] = orig
                # differences first, so a constant f gives exactly zero
                if order == 2:
                    numeric = (vals[1] - vals[-1]) / (2.0 * eps)
                else:
                    numeric = ((vals[-2] - vals[2]) + 8.0 * (vals[1] - vals[-1])) / (12.0 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
