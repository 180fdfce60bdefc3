"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Outside a tape (or with only constant inputs)
they run as plain numpy, which is what inference uses.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # -> 2x
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
# extended precision is passed through untouched (finite-difference oracles)
_KEEP = (np.dtype(np.float64), np.dtype(np.longdouble))


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_state = _TapeStack()


def _tape_stack() -> list:
    return _state.stack


def active_tape() -> "Tape | None":
    stack = _state.stack
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops in creation order for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, t: "Tensor") -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already consumed by backward()")
        t.node_id = len(self.nodes)
        t._tape = self
        self.nodes.append(t)

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        if loss._tape is not self:
            # loss does not depend on any grad-requiring tensor
            return
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    prev = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if prev is None else prev + pg
                else:
                    parent._accumulate(pg)
        self.nodes = []


class Tensor:
    """Dense float64 array, optionally a node of the active tape.

    Leaves created with ``requires_grad=True`` collect ``grad`` on backward.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "name", "node_id", "_tape", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    @property
    def gradient(self) -> np.ndarray:
        """``grad``, with zeros when nothing reached this tensor."""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = object.__new__(Tensor)
    if type(data) is not np.ndarray:
        data = np.asarray(data)
    out.data = data if data.dtype in _KEEP else data.astype(DTYPE)
    out.grad = out.name = out.node_id = out._tape = out._backward = None
    out._parents = ()
    out.requires_grad = False
    stack = _state.stack
    if stack and any(p.requires_grad for p in parents):
        tape = stack[-1]
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a hand-differentiated op; ``backward(g)`` returns one gradient per parent."""
    return _make(data, tuple(as_tensor(p) for p in parents), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(fn, a: Tensor, b: Tensor, opname: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        _binary(np.add, a, b, "add"),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        _binary(np.multiply, a, b, "mul"),
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * np.tanh(0.5 * a.data) + 0.5
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * np.tanh(0.5 * x) + 0.5
    return _make(out, (a,), lambda g: (g * sig,))


def elementwise(op: str, *args, axis: int = -1) -> Tensor:
    """Dispatch by name: sigmoid, tanh, add, mul, concat."""
    if op == "sigmoid":
        return sigmoid(*args)
    if op == "tanh":
        return tanh(*args)
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul(*args)
    if op == "concat":
        return concat(args, axis=axis)
    raise ValueError(f"unknown elementwise op {op!r}")


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]``; with 2-D ``a`` this is the plain matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, W) -> Tensor:
    """``x[..., k] @ W[n, k].T`` without materialising the transpose."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {W.shape}")

    def backward(g):
        gW = g.reshape(-1, W.shape[0]).T @ x.data.reshape(-1, W.shape[1])
        return g @ W.data, gW

    return _make(x.data @ W.data.T, (x, W), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


# structure ----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return mul(tsum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), backward)


def split_last(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Cut the last axis into consecutive pieces of the given widths."""
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split_last: widths {list(sizes)} do not add up to {a.shape[-1]}")
    out = []
    lo = 0
    for n in sizes:
        sl = slice(lo, lo + n)

        def backward(g, sl=sl):
            full = np.zeros_like(a.data)
            full[..., sl] = g
            return (full,)

        out.append(_make(a.data[..., sl], (a,), backward))
        lo += n
    return out


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[x.shape for x in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatters into the looked-up rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)][0]
        raise IndexError(f"id {int(bad)} out of range for table with {n} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), backward)


# normalisation ------------------------------------------------------------

def _mask_array(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not m.any(axis=-1).all():
        raise ValueError("softmax: every position is masked")
    return m


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out positions are exactly zero."""
    m = _mask_array(mask, x.shape)
    z = x.data if m is None else np.where(m, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, mask=None) -> Tensor:
    m = _mask_array(mask, x.shape)
    z = x.data if m is None else np.where(m, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        gx = g - p * g.sum(axis=-1, keepdims=True)
        if m is not None:
            gx = np.where(m, gx, 0.0)
        return (gx,)

    return _make(out, (x,), backward)


def dropout(x: Tensor, keep: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``keep >= 1``."""
    if rng is None or keep >= 1.0:
        return x
    scale = (rng.random(x.shape) < keep) / keep
    return mul(x, scale)


# driver -------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that produced it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape or active_tape()
    if tape is None:
        return
    tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
