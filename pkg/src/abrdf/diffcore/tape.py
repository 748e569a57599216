"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to :class:`Var` objects
created from it. Calling :meth:`Tape.backward` on a scalar result sweeps the
record once in reverse and returns the gradient with respect to the
parameter leaves as a flat vector laid out like the originating
:class:`~abrdf.diffcore.params.ParameterBlock`.

Only the operations the field networks and renderer need are provided.
Broadcasting follows numpy for elementwise binary ops; the backward pass sums
gradients back down to each operand's shape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from abrdf.errors import UsageError


class Var:
    """A value living on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000  # make ndarray (op) Var dispatch to Var

    def __init__(self, value: np.ndarray, tape: "Tape", index: int | None):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, index={self.index})"

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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Records operations for a single reverse sweep.

    With ``record=False`` operations are evaluated eagerly and nothing is
    stored, which is how inference runs.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._backward_fns: list[tuple[tuple[int, ...], Callable] | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: list[tuple[str, int]] = []
        self._layout: list[tuple[str, tuple[int, ...]]] | None = None
        self._consumed = False

    def __len__(self) -> int:
        return len(self._backward_fns)

    def _new_index(self, shape, entry) -> int | None:
        if not self.record:
            return None
        if self._consumed:
            raise UsageError("tape already consumed by a backward sweep")
        self._backward_fns.append(entry)
        self._shapes.append(shape)
        return len(self._backward_fns) - 1

    def constant(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return Var(value, self, None)

    def leaf(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return Var(value, self, self._new_index(value.shape, None))

    def watch(self, params) -> dict[str, Var]:
        """Create one leaf per parameter sub-block and remember the layout."""
        if self._layout is not None:
            raise UsageError("a tape watches exactly one parameter block")
        self._layout = list(params.layout)
        out = {}
        for name, _shape in params.layout:
            v = self.leaf(params.view(name))
            if v.index is not None:
                self._leaves.append((name, v.index))
            out[name] = v
        return out

    def backward(self, loss: Var, loss_seed: float = 1.0) -> np.ndarray:
        """Return dLoss/dtheta as a flat vector matching the watched block."""
        if not self.record:
            raise UsageError("cannot differentiate a non-recording tape")
        if self._consumed:
            raise UsageError("tape already consumed by a backward sweep")
        if loss.tape is not self:
            raise UsageError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if self._layout is None:
            raise UsageError("tape has no watched parameters")
        self._consumed = True

        grads: dict[int, np.ndarray] = {}
        if loss.index is not None:
            grads[loss.index] = np.full(loss.value.shape, float(loss_seed))
        fns = self._backward_fns
        for idx in range(len(fns) - 1, -1, -1):
            g = grads.get(idx)
            entry = fns[idx]
            if g is None or entry is None:
                continue
            parents, fn = entry
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if p is None or pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
            # free intermediate gradients as soon as they have been pushed
            del grads[idx]

        leaf_index = dict(self._leaves)
        chunks = []
        for name, shape in self._layout:
            size = int(np.prod(shape, dtype=np.int64))
            idx = leaf_index.get(name)
            g = grads.get(idx) if idx is not None else None
            chunks.append(np.zeros(size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1))
        self._backward_fns = []
        return np.concatenate(chunks) if chunks else np.zeros(0)


# ----------------------------------------------------------------------------
# op plumbing


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _idx(x) -> int | None:
    return x.index if isinstance(x, Var) else None


def _emit(value: np.ndarray, inputs: Sequence, backward: Callable) -> Var:
    tape = _tape_of(*inputs)
    if tape is None:
        raise UsageError("operation needs at least one Var operand")
    parents = tuple(_idx(x) for x in inputs)
    if not tape.record or all(p is None for p in parents):
        return Var(value, tape, None)
    return Var(value, tape, tape._new_index(value.shape, (parents, backward)))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _emit(
        av + bv, (a, b),
        lambda g: (
            unbroadcast(g, av.shape) if _idx(a) is not None else None,
            unbroadcast(g, bv.shape) if _idx(b) is not None else None,
        ),
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _emit(
        av - bv, (a, b),
        lambda g: (
            unbroadcast(g, av.shape) if _idx(a) is not None else None,
            unbroadcast(-g, bv.shape) if _idx(b) is not None else None,
        ),
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = av * bv
    return _emit(
        out, (a, b),
        lambda g: (
            unbroadcast(g * bv, av.shape) if _idx(a) is not None else None,
            unbroadcast(g * av, bv.shape) if _idx(b) is not None else None,
        ),
    )


def div(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _emit(
        out, (a, b),
        lambda g: (
            unbroadcast(g / bv, av.shape) if _idx(a) is not None else None,
            unbroadcast(-g * out / bv, bv.shape) if _idx(b) is not None else None,
        ),
    )


def neg(a) -> Var:
    return _emit(-_val(a), (a,), lambda g: (-g,))


def matmul(a, b) -> Var:
    """2-D matrix product."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise UsageError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    out = av @ bv
    return _emit(
        out, (a, b),
        lambda g: (
            g @ bv.T if _idx(a) is not None else None,
            av.T @ g if _idx(b) is not None else None,
        ),
    )


# ----------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Var:
    out = np.exp(_val(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    av = _val(a)
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Var:
    out = np.sqrt(_val(a))
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, exponent: float) -> Var:
    av = _val(a)
    out = av ** exponent
    return _emit(out, (a,), lambda g: (g * exponent * av ** (exponent - 1.0),))


def relu(a) -> Var:
    av = _val(a)
    mask = av > 0.0  # subgradient at exactly 0 is 0
    return _emit(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    out = sigmoid_np(_val(a))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Var:
    av = _val(a)
    return _emit(softplus_np(av), (a,), lambda g: (g * sigmoid_np(av),))


def maximum(a, floor: float) -> Var:
    """max(a, floor) against a constant; gradient 0 where a <= floor."""
    av = _val(a)
    mask = av > floor
    return _emit(np.where(mask, av, floor), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Var:
    av = _val(a)
    mask = (av > lo) & (av < hi)
    return _emit(np.clip(av, lo, hi), (a,), lambda g: (g * mask,))


def arccos(a) -> Var:
    """arccos with the derivative singularity at +-1 capped."""
    av = _val(a)
    denom = np.sqrt(np.maximum(1.0 - av * av, 1e-12))
    return _emit(np.arccos(av), (a,), lambda g: (-g / denom,))


# ----------------------------------------------------------------------------
# structural


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    av = _val(a)
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _emit(out, (a,), bw)


def cumsum_exclusive(a, axis: int = -1) -> Var:
    """Cumulative sum along ``axis`` that excludes the current element."""
    av = _val(a)
    out = np.zeros_like(av)
    # shifted cumsum, not inc - av: the last sample's huge delta would swamp the rest
    src = [slice(None)] * av.ndim
    dst = [slice(None)] * av.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = np.cumsum(av[tuple(src)], axis=axis)

    def bw(g):
        # d/dx_j sum_{i>j} g_i  = reverse cumsum shifted by one
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g,)

    return _emit(out, (a,), bw)


def reshape(a, shape) -> Var:
    av = _val(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, key) -> Var:
    av = _val(a)
    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, list) or (isinstance(k, np.ndarray) and k.dtype != bool)
                for k in keys)

    def bw(g):
        full = np.zeros_like(av)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _emit(av[key], (a,), bw)


def concat(xs: Sequence, axis: int = -1) -> Var:
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(out, tuple(xs), bw)


def where_const(mask: np.ndarray, a, fill: float) -> Var:
    """Select ``a`` where ``mask`` else a constant ``fill``."""
    av = _val(a)
    return _emit(np.where(mask, av, fill), (a,), lambda g: (np.where(mask, g, 0.0),))


def minimum(a, b) -> Var:
    """Elementwise min of two operands; ties send the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    take_a = av <= bv
    return _emit(
        np.where(take_a, av, bv), (a, b),
        lambda g: (unbroadcast(np.where(take_a, g, 0.0), av.shape),
                   unbroadcast(np.where(take_a, 0.0, g), bv.shape)),
    )


def gamma_encode(a, gamma: float, floor: float = 1e-6) -> Var:
    """``a^(1/gamma)`` for ``a >= 0`` with the slope evaluated no closer to 0 than ``floor``."""
    av = _val(a)
    k = 1.0 / gamma
    out = np.maximum(av, 0.0) ** k
    return _emit(out, (a,), lambda g: (g * k * np.maximum(av, floor) ** (k - 1.0),))
