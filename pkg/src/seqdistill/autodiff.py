"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records itself on the active :class:`Tape`
when at least one input requires a gradient. :func:`backward` replays the
tape in reverse and writes ``grad`` on the leaves.

The primitive set is deliberately small (matmul, add/sub/mul, sigmoid, tanh,
exp, log, softmax, log_softmax, concat, slicing, gather, reshape, transpose,
sum/mean). Model code composes everything else out of these.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "concat",
    "take",
    "gather",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "no_tape",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense row-major float64 array that can carry a gradient."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these go through the recorded primitives
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the ``with`` block
    are appended in execution order, so every node's inputs precede it.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list = []


class no_tape:
    """Temporarily suspend recording (for frozen forward passes inside a tape)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(values: np.ndarray, inputs: tuple, fn) -> Tensor:
    out = Tensor(values)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(out, inputs, fn))
    return out


def backward(tape: Tape, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Fill ``grad`` on every leaf reachable from ``loss`` through ``tape``.

    Leaves listed in ``leaves`` that are not connected to the loss receive a
    zero gradient. Gradients are overwritten, not accumulated across calls.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.values)}
    produced = set()
    leaf_map = {}
    for node in tape.nodes:
        produced.add(id(node.out))
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaf_map[key] = inp
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
    for key, leaf in leaf_map.items():
        leaf.grad = grads[key]
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.values)
        leaf_map[id(loss)] = loss
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in leaf_map:
                leaf.grad = np.zeros_like(leaf.values)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; also accepts stacked 3-d operands with equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def fn(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(av @ bv, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row matching ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.values + b.values, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _record(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _record(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    return _record(a.values * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.values) + 1.0)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _record(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.values
    return _record(np.log(x), (a,), lambda g: (g / x,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.values - a.values.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), fn)


def cross_entropy(target_dist, log_probs: Tensor, atol: float = 1e-6) -> Tensor:
    """``-sum(target * log_probs)`` summed over every slice of the last axis.

    ``target_dist`` is treated as a constant; each of its rows must be a
    probability distribution.
    """
    t = target_dist.values if isinstance(target_dist, Tensor) else np.asarray(target_dist, dtype=np.float64)
    log_probs = _as_tensor(log_probs)
    if t.shape != log_probs.shape:
        raise ShapeError(f"cross_entropy shape mismatch: {t.shape} vs {log_probs.shape}")
    if np.any(t < -atol) or not np.allclose(t.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise ValueError("cross_entropy target is not a probability distribution")
    lp = log_probs.values
    # 0 * log 0 counts as 0
    val = -np.sum(t * np.where(t == 0.0, 0.0, lp))
    return _record(np.asarray(val), (log_probs,), lambda g: (-g * t,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] != ref.shape[:ax] or t.shape[ax + 1:] != ref.shape[ax + 1:]:
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _record(np.concatenate([t.values for t in tensors], axis=ax), tuple(tensors), fn)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing, e.g. ``take(x, (slice(None), slice(0, 4)))``."""
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _record(a.values[index], (a,), fn)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` along the first axis (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.values[ids], (table,), fn)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _record(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record(np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _record(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _record(a.values.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.values.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)
