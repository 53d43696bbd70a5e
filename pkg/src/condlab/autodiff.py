"""Dense float64 tensors with reverse-mode differentiation on a tape.

The engine is deliberately small: a Tensor wraps a numpy array, ops record
vector-Jacobian callbacks on a per-step Tape, and backward replays the tape
once in reverse. Tapes are created per training step and thrown away; there
is no persistent graph and no higher-order differentiation.

Gradient-blocking (detach) is a first-class citizen because the control
losses rely on reference controls that must contribute exactly zero
gradient.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import special

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "tensor",
    "detach",
    "backward",
    "add", "sub", "mul", "div", "matmul", "broadcast_to",
    "tsum", "tmean", "square", "sqrt", "exp", "log", "tanh", "silu",
    "erf", "clip", "concat", "take",
]

_uid_counter = itertools.count(1)

ArrayLike = Union["Tensor", np.ndarray, float, int, list, tuple]


class Tape:
    """Append-only record of primitive ops for one backward pass."""

    def __init__(self) -> None:
        self._nodes: list[tuple[int, tuple[int, ...], Callable]] = []
        self._leaf_shapes: dict[int, tuple[int, ...]] = {}
        self.consumed = False

    def leaf(self, data) -> "Tensor":
        """Wrap an array as a differentiable leaf tracked by this tape."""
        t = Tensor(data, tape=self)
        self._leaf_shapes[t.uid] = t.data.shape
        return t

    def _record(self, out_uid: int, in_uids: tuple[int, ...], vjp: Callable) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward")
        self._nodes.append((out_uid, in_uids, vjp))


class Tensor:
    """Dense float64 array, optionally linked into a Tape."""

    __slots__ = ("data", "tape", "uid")

    def __init__(self, data, tape: Optional[Tape] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, tape=None)

    def __repr__(self) -> str:
        tag = "taped" if self.tape is not None else "const"
        return f"Tensor({tag}, shape={self.shape})"

    # Operator sugar; all routes through the module-level primitives.
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, key): return take(self, key)


def tensor(data) -> Tensor:
    """Constant (untaped) tensor."""
    return data if isinstance(data, Tensor) and data.tape is None else Tensor(data)


def detach(x: ArrayLike) -> Tensor:
    """Same value, no tape link; gradients never flow through the result."""
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _merge_tape(op: str, inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise RuntimeError(f"{op}: inputs belong to two different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op_name: str, a: ArrayLike, b: ArrayLike, fwd, vjp_a, vjp_b) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    try:
        value = fwd(ta.data, tb.data)
    except ValueError as e:
        raise ValueError(f"{op_name}: shapes {ta.shape} and {tb.shape} do not conform") from e
    tape = _merge_tape(op_name, (ta, tb))
    out = Tensor(value, tape=tape)
    if tape is not None:
        da, db = ta.data, tb.data
        sa, sb = ta.shape, tb.shape

        def vjp(g):
            ga = _unbroadcast(vjp_a(g, da, db), sa) if ta.tape is not None else None
            gb = _unbroadcast(vjp_b(g, da, db), sb) if tb.tape is not None else None
            return ga, gb

        tape._record(out.uid, (ta.uid, tb.uid), vjp)
    return out


def _unary(op_name: str, x: ArrayLike, fwd, vjp_fn) -> Tensor:
    tx = _as_tensor(x)
    value = fwd(tx.data)
    tape = tx.tape
    out = Tensor(value, tape=tape)
    if tape is not None:
        dx = tx.data

        def vjp(g):
            return (vjp_fn(g, dx, value),)

        tape._record(out.uid, (tx.uid,), vjp)
    return out


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b):
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.ndim > 2 or tb.ndim > 2 or ta.ndim == 0 or tb.ndim == 0:
        raise ValueError(f"matmul: expects 1D/2D operands, got {ta.shape} @ {tb.shape}")
    try:
        value = ta.data @ tb.data
    except ValueError as e:
        raise ValueError(f"matmul: shapes {ta.shape} and {tb.shape} do not conform") from e
    tape = _merge_tape("matmul", (ta, tb))
    out = Tensor(value, tape=tape)
    if tape is not None:
        da, db = ta.data, tb.data

        def vjp(g):
            # Promote all operands to 2D, then squeeze the vector cases back.
            a2 = da if da.ndim == 2 else da[None, :]
            b2 = db if db.ndim == 2 else db[:, None]
            g2 = g
            if da.ndim == 1:
                g2 = g2[None, ...] if g2.ndim < 2 else g2
            if db.ndim == 1:
                g2 = g2[..., None] if g2.ndim < 2 else g2
            if g2.ndim == 0:
                g2 = g2[None, None]
            ga = (g2 @ b2.T) if ta.tape is not None else None
            gb = (a2.T @ g2) if tb.tape is not None else None
            if ga is not None and da.ndim == 1:
                ga = ga.reshape(da.shape)
            if gb is not None and db.ndim == 1:
                gb = gb.reshape(db.shape)
            return ga, gb

        tape._record(out.uid, (ta.uid, tb.uid), vjp)
    return out


def broadcast_to(x, shape):
    tx = _as_tensor(x)
    try:
        value = np.broadcast_to(tx.data, shape).copy()
    except ValueError as e:
        raise ValueError(f"broadcast: cannot broadcast {tx.shape} to {tuple(shape)}") from e
    tape = tx.tape
    out = Tensor(value, tape=tape)
    if tape is not None:
        src_shape = tx.shape

        def vjp(g):
            return (_unbroadcast(g, src_shape),)

        tape._record(out.uid, (tx.uid,), vjp)
    return out


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    tx = _as_tensor(x)
    value = tx.data.sum(axis=axis, keepdims=keepdims)
    tape = tx.tape
    out = Tensor(value, tape=tape)
    if tape is not None:
        shape = tx.shape
        axes = _axis_tuple(axis, tx.ndim)

        def vjp(g):
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            return (np.broadcast_to(gg, shape).copy(),)

        tape._record(out.uid, (tx.uid,), vjp)
    return out


def tmean(x, axis=None, keepdims=False):
    tx = _as_tensor(x)
    axes = _axis_tuple(axis, tx.ndim) if tx.ndim else ()
    count = 1
    for a in axes:
        count *= tx.shape[a]
    s = tsum(tx, axis=axis, keepdims=keepdims)
    return div(s, float(count if count else 1))


def square(x):
    return _unary("square", x, np.square, lambda g, x, y: g * (2.0 * x))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, x, y: g * (0.5 / y))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x, y: g * y)


def log(x):
    return _unary("log", x, np.log, lambda g, x, y: g / x)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    def fwd(x):
        return x * _sigmoid(x)

    def vjp(g, x, y):
        s = _sigmoid(x)
        return g * (s + x * s * (1.0 - s))

    return _unary("silu", x, fwd, vjp)


def erf(x):
    return _unary("erf", x, special.erf,
                  lambda g, x, y: g * special.erf_derivative(x))


def clip(x, lo: float, hi: float):
    """Clip to [lo, hi]; subgradient 1 strictly inside, 0 outside."""
    def fwd(x):
        return np.clip(x, lo, hi)

    def vjp(g, x, y):
        return g * ((x > lo) & (x < hi))

    return _unary("clip", x, fwd, vjp)


def concat(parts: Iterable[ArrayLike], axis: int = -1):
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ValueError("concat: empty input list")
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ValueError(
            "concat: shapes " + ", ".join(str(t.shape) for t in ts) + " do not conform"
        ) from e
    tape = _merge_tape("concat", ts)
    out = Tensor(value, tape=tape)
    if tape is not None:
        sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in ts]
        ax = axis
        watch = [t.tape is not None for t in ts]

        def vjp(g):
            pieces = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
            return tuple(p if w else None for p, w in zip(pieces, watch))

        tape._record(out.uid, tuple(t.uid for t in ts), vjp)
    return out


def take(x, key):
    """Slice primitive: basic slices plus integer-array selection.

    The gradient scatter-adds back into the source positions, so repeated
    indices accumulate.
    """
    tx = _as_tensor(x)
    value = tx.data[key]
    tape = tx.tape
    out = Tensor(np.array(value, dtype=np.float64), tape=tape)
    if tape is not None:
        shape = tx.shape

        def vjp(g):
            buf = np.zeros(shape, dtype=np.float64)
            np.add.at(buf, key, g)
            return (buf,)

        tape._record(out.uid, (tx.uid,), vjp)
    return out


class Gradients:
    """Result of backward: per-leaf gradient lookup by tensor."""

    def __init__(self, grads: dict[int, np.ndarray], leaf_shapes: dict[int, tuple[int, ...]]):
        self._grads = grads
        self._leaf_shapes = leaf_shapes

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.uid)
        if g is not None:
            return g
        shape = self._leaf_shapes.get(t.uid)
        if shape is None:
            raise KeyError("tensor was not a taped leaf and received no gradient")
        return np.zeros(shape, dtype=np.float64)

    def get(self, t: Tensor, default=None):
        try:
            return self[t]
        except KeyError:
            return default


def backward(loss: Tensor) -> Gradients:
    """Reverse-accumulate gradients of a scalar taped loss.

    Returns gradients for every tensor reached by the sweep; leaves
    registered on the tape but unreachable from the loss report zeros.
    A tape can be consumed only once.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ValueError("backward: loss must be a taped Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for out_uid, in_uids, vjp in reversed(tape._nodes):
        g = grads.get(out_uid)
        if g is None:
            continue
        contribs = vjp(g)
        for uid, contrib in zip(in_uids, contribs):
            if contrib is None:
                continue
            acc = grads.get(uid)
            grads[uid] = contrib if acc is None else acc + contrib
    return Gradients(grads, tape._leaf_shapes)
