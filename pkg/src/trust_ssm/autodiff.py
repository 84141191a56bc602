"""Reverse-mode differentiation over dense float64 arrays.

Operations on tensors that require gradients are recorded on a per-thread
:class:`Tape`. ``backward`` walks the tape in reverse, fills ``.grad`` on every
reachable leaf, and marks the tape consumed so it cannot be replayed.

Only the handful of ops needed by the SSM classifier are provided. Broadcasting
follows numpy rules; the backward pass sums gradients back to each input's shape.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "DimensionError",
    "tensor",
    "no_grad",
    "backward",
    "stack",
    "softmax_xent",
    "log_softmax",
    "linear_recurrence",
    "finite_difference_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the differentiation tape."""


_ids = itertools.count(1)
_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = None
        _local.enabled = True
    return _local


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[tuple[int, tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.records.append((out.node_id, inputs, fn))

    def __len__(self):
        return len(self.records)

    def __enter__(self) -> "Tape":
        st = _state()
        self._prev = st.tape
        st.tape = self
        return self

    def __exit__(self, *exc):
        _state().tape = self._prev
        return False


def _active_tape() -> Tape:
    st = _state()
    if st.tape is None or st.tape.consumed:
        st.tape = Tape()
    return st.tape


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (current thread only)."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def _grad_enabled() -> bool:
    return _state().enabled


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: "Tensor", b: "Tensor") -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = next(_ids) if requires_grad else None
        self._tape: Tape | None = None

    # -- bookkeeping -----------------------------------------------------
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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph construction ---------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, inputs: tuple["Tensor", ...], fn: Callable) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node_id = next(_ids)
            tape = _active_tape()
            out._tape = tape
            tape.record(out, inputs, fn)
        return out

    # -- elementwise -----------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        _broadcast_shape(self, other)
        sa, sb = self.shape, other.shape
        return Tensor._result(self.data + other.data, (self, other),
                              lambda g: (_sum_to(g, sa), _sum_to(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        _broadcast_shape(self, other)
        sa, sb = self.shape, other.shape
        return Tensor._result(self.data - other.data, (self, other),
                              lambda g: (_sum_to(g, sa), _sum_to(-g, sb)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        _broadcast_shape(self, other)
        a, b = self.data, other.data
        return Tensor._result(a * b, (self, other),
                              lambda g: (_sum_to(g * b, a.shape), _sum_to(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        _broadcast_shape(self, other)
        a, b = self.data, other.data
        return Tensor._result(a / b, (self, other),
                              lambda g: (_sum_to(g / b, a.shape), _sum_to(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data
        return Tensor._result(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def sigmoid(self) -> "Tensor":
        s = _sigmoid(self.data)
        return Tensor._result(s, (self,), lambda g: (g * s * (1.0 - s),))

    def silu(self) -> "Tensor":
        a = self.data
        s = _sigmoid(a)
        return Tensor._result(a * s, (self,), lambda g: (g * s * (1.0 + a * (1.0 - s)),))

    def softplus(self) -> "Tensor":
        a = self.data
        y = _softplus(a)
        return Tensor._result(y, (self,), lambda g: (g * _sigmoid(a),))

    # -- linear algebra & reductions ------------------------------------
    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise DimensionError(f"matmul needs 2-d operands, got {self.shape} and {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise DimensionError(f"matmul inner extents differ: {self.shape} @ {other.shape}")
        try:
            out = np.matmul(self.data, other.data)
        except ValueError:
            raise DimensionError(f"matmul batch extents differ: {self.shape} @ {other.shape}") from None
        a, b = self.data, other.data

        def fn(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

        return Tensor._result(out, (self, other), fn)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(out, (self,), fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {old} to {shape}") from None
        return Tensor._result(out, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def fn(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(self.data[idx], (self,), fn)

    def take(self, indices, axis: int) -> "Tensor":
        """Gather along ``axis``; ``indices`` may be any integer array."""
        indices = np.asarray(indices, dtype=np.intp)
        axis = axis % self.ndim
        shape = self.shape
        out = np.take(self.data, indices, axis=axis)

        def fn(g):
            g = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
            rows = indices.reshape(-1, indices.shape[-1]) if indices.ndim else indices.reshape(1, 1)
            n = shape[axis]
            if rows.shape[1] == n and all(np.array_equal(np.sort(r), np.arange(n)) for r in rows):
                # each index row is a permutation: scatter is a gather by the inverse
                g = g.reshape((rows.shape[0], n) + g.shape[indices.ndim:])
                acc = None
                for r, gr in zip(rows, g):
                    part = np.take(gr, np.argsort(r), axis=0)
                    acc = part if acc is None else acc + part
                return (np.moveaxis(acc, 0, axis),)
            full = np.zeros(shape)
            view = np.moveaxis(full, axis, 0)
            np.add.at(view, indices, g)
            return (full,)

        return Tensor._result(out, (self,), fn)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return expit(a)


def _softplus(a: np.ndarray) -> np.ndarray:
    # linear branch above 20 avoids overflow; log1p keeps small outputs exact
    return np.where(a > 20.0, a, np.log1p(np.exp(np.minimum(a, 20.0))))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._result(out, tensors,
                          lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax_xent(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of ``logits[B, C]`` against integer ``targets[B]``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise DimensionError("need at least two classes")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match batch {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, targets])
    p = np.exp(z - lse[:, None])

    def fn(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return Tensor._result(np.asarray(loss), (logits,), fn)


def linear_recurrence(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """h[t] = a[t] * h[t-1] + b[t] along ``axis`` with h[-1] = 0."""
    if a.shape != b.shape:
        raise DimensionError(f"recurrence operands differ: {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    A = np.moveaxis(a.data, axis, 0)
    Bx = np.moveaxis(b.data, axis, 0)
    H = np.empty_like(Bx)
    h = np.zeros(Bx.shape[1:])
    for t in range(Bx.shape[0]):
        h = A[t] * h + Bx[t]
        H[t] = h

    def fn(g):
        G = np.moveaxis(g, axis, 0)
        dA = np.empty_like(G)
        dB = np.empty_like(G)
        carry = np.zeros(G.shape[1:])
        for t in range(G.shape[0] - 1, -1, -1):
            carry = G[t] + (A[t + 1] * carry if t + 1 < G.shape[0] else 0.0)
            dB[t] = carry
            dA[t] = carry * H[t - 1] if t > 0 else 0.0
        return np.moveaxis(dA, 0, axis), np.moveaxis(dB, 0, axis)

    return Tensor._result(np.moveaxis(H, 0, axis), (a, b), fn)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns the gradient store keyed by leaf ``node_id``. The tape is consumed;
    a second call on the same graph raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not on a tape (no input requires grad, or recorded under no_grad)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for out_id, inputs, fn in reversed(tape.records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp._tape is not tape:
                leaves[inp.node_id] = inp
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = np.asarray(gi, dtype=np.float64)
    tape.consumed = True
    tape.records.clear()
    store = {}
    for nid, leaf in leaves.items():
        g = grads.get(nid, np.zeros(leaf.shape))
        leaf.grad = g.reshape(leaf.shape)
        store[nid] = leaf.grad
    return store


def finite_difference_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                            order: int = 2) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f`` rebuilds the scalar objective from the current contents of ``params``.
    ``order=2`` uses the central difference; ``order=4`` the five-point stencil,
    which tolerates a larger ``eps`` and so loses less to roundoff.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    with no_grad():
        for p in params:
            g = np.zeros(p.shape) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]

                def at(h):
                    flat[i] = orig + h
                    v = float(f().data)
                    flat[i] = orig
                    if not np.isfinite(v):
                        raise FloatingPointError("objective is not finite near the probe point")
                    return v

                if order == 2:
                    est = (at(eps) - at(-eps)) / (2.0 * eps)
                else:
                    est = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
                exact = g.reshape(-1)[i]
                err = abs(est - exact) / max(abs(exact), abs(est), 1e-8)
                worst = max(worst, err)
    return worst
