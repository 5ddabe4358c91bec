"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Small Wengert-list engine: ops executed under an active ``Tape`` append one
node each, and the reverse pass replays nodes in recorded-reverse order.
Because recording order is the execution order and everything is
single-threaded, gradients are bitwise reproducible for a fixed program.

Scope is deliberately narrow: 1-D/2-D float tensors, the ops needed for
MLPs with batch normalization, squashed-Gaussian policy heads, and
mean-squared losses. No fusion, no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ContractError",
    "DomainError",
    "NumericError",
    "Tensor",
    "Tape",
    "backward",
    "stop_gradient",
    "zero_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose",
    "tanh", "relu", "exp", "log", "square", "sqrt", "clip",
    "tsum", "tmean", "tvar", "minimum", "concat", "narrow",
]


class ContractError(ValueError):
    """An operation was called outside its contract (shape/axis/arity)."""


class DomainError(ValueError):
    """Numeric input outside an op's domain (log/sqrt of negatives, div by 0)."""


class NumericError(RuntimeError):
    """Non-finite values surfaced where the caller requires finite math."""


class _Node:
    """One recorded op: the output it produced and how to push grads back.

    ``backward_fn(g)`` returns an iterable of (parent, grad_contribution)
    pairs; contributions already have the parent's shape. ``live`` snapshots
    which parents required grad when the op ran: connectivity is fixed at
    record time, so re-enabling ``requires_grad`` later cannot resurrect a
    path through an op that saw the tensor frozen.
    """

    __slots__ = ("out", "parents", "backward_fn", "live")

    def __init__(self, out, parents, backward_fn, live):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.live = live


class Tape:
    """Ordered record of executed ops for one reverse pass.

    Use as a context manager; ops only record while a tape is active, so
    evaluation-only code (env rollouts, target computation) runs tape-free
    and produces constant tensors.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss):
        """Reverse pass from a scalar loss; accumulates into ``.grad``.

        Per-call gradient buffers are kept in a side table and only flushed
        into ``Tensor.grad`` (with ``+=``), so calling backward twice on the
        same loss exactly doubles every accumulated gradient.
        """
        if loss.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        pending = {id(loss): np.ones_like(loss.data)}
        owner = {id(loss): loss}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.requires_grad:
                node.out._accumulate(g)
            for parent, contrib in node.backward_fn(g):
                key = id(parent)
                if key not in node.live:
                    continue
                prev = pending.get(key)
                if prev is None:
                    pending[key] = contrib
                    owner[key] = parent
                else:
                    pending[key] = prev + contrib
        # whatever is left never appeared as an op output: leaves
        for key, g in pending.items():
            t = owner[key]
            if t.requires_grad:
                t._accumulate(g)


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        """Value-identical constant excluded from the reverse pass."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        tape = _active_tape()
        if tape is None:
            raise ContractError("backward() called with no active tape")
        tape.backward(self)

    # -- operator sugar ------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def stop_gradient(x: Tensor) -> Tensor:
    """Detached view of ``x`` (shares data, never receives gradient)."""
    return x.detach()


def zero_grad(tensors):
    for t in tensors:
        if t.grad is not None:
            t.grad[...] = 0.0


def backward(loss: Tensor) -> None:
    loss.backward()


# -- plumbing ----------------------------------------------------------------

def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(out_data, parents, backward_fn):
    tape = _active_tape()
    requires = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data)
    if requires:
        out.requires_grad = True
        out.grad = None  # allocated lazily on first accumulation
        live = frozenset(id(p) for p in parents if p.requires_grad)
        tape.nodes.append(_Node(out, parents, backward_fn, live))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a_shape, b_shape):
    for x, y in zip(reversed(a_shape), reversed(b_shape)):
        if x != y and x != 1 and y != 1:
            raise ContractError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible")


# -- arithmetic ----------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)
    return _record(a.data + b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)
    return _record(a.data - b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))))


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)
    return _record(a.data * b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                              (b, _unbroadcast(g * a.data, b.shape))))


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)
    if (b.data == 0).any():
        raise DomainError("division by exact zero")
    inv = 1.0 / b.data
    out = a.data * inv
    return _record(out, (a, b),
                   lambda g: ((a, _unbroadcast(g * inv, a.shape)),
                              (b, _unbroadcast(-g * out * inv, b.shape))))


def neg(a):
    return _record(-a.data, (a,), lambda g: ((a, -g),))


def matmul(a: Tensor, b: Tensor):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def transpose(a: Tensor):
    if a.data.ndim != 2:
        raise ContractError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: ((a, g.T),))


# -- elementwise nonlinearities ------------------------------------------------

def tanh(a: Tensor):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def relu(a: Tensor):
    # gradient at exactly 0 is 0 (subgradient choice, keeps tests deterministic)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                   lambda g: ((a, g * mask),))


def exp(a: Tensor):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor):
    if (a.data <= 0).any():
        raise DomainError("log of non-positive input")
    return _record(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def square(a: Tensor):
    return _record(a.data * a.data, (a,), lambda g: ((a, g * (2.0 * a.data)),))


def sqrt(a: Tensor):
    if (a.data < 0).any():
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: ((a, g * (0.5 / out)),))


def clip(a: Tensor, lo: float, hi: float):
    """Clamp with pass-through gradient on the closed interval [lo, hi]."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: ((a, g * mask),))


def minimum(a: Tensor, b: Tensor):
    """Elementwise min; on ties the gradient goes to the first argument."""
    if a.shape != b.shape:
        raise ContractError(f"minimum expects matching shapes, got {a.shape} and {b.shape}")
    take_a = a.data <= b.data
    return _record(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: ((a, g * take_a), (b, g * ~take_a)))


# -- reductions ----------------------------------------------------------------

def _check_axis(a, axis):
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ContractError(f"axis {axis} invalid for shape {a.shape}")
    if axis is not None and a.shape[axis] == 0:
        raise ContractError("reduction over empty axis")
    if axis is None and a.size == 0:
        raise ContractError("reduction over empty tensor")


def tsum(a: Tensor, axis=None, keepdims=False):
    _check_axis(a, axis)

    def back(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) * np.ones_like(a.data)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape) * np.ones_like(a.data)),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False):
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]
    inv_n = 1.0 / n

    def back(g):
        if axis is None:
            return ((a, np.full_like(a.data, inv_n) * g),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape) * inv_n),)

    return _record(a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


def tvar(a: Tensor, axis=None, keepdims=False):
    """Biased (divide-by-N) variance, composed so the reverse rule falls out."""
    m = tmean(a, axis=axis, keepdims=True)
    sq = square(sub(a, m))
    return tmean(sq, axis=axis, keepdims=keepdims)


# -- structural ops --------------------------------------------------------------

def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    if axis not in (0, 1):
        raise ContractError(f"concat supports axis 0 or 1, got {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        pairs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = g[start:stop] if axis == 0 else g[:, start:stop]
            pairs.append((t, sl))
        return pairs

    return _record(out, tuple(tensors), back)


def narrow(a: Tensor, axis: int, start: int, length: int):
    """Contiguous slice along ``axis``; the backward scatters into zeros."""
    if axis not in (0, 1) or a.data.ndim != 2:
        raise ContractError("narrow supports 2-D tensors on axis 0 or 1")
    if start < 0 or start + length > a.shape[axis]:
        raise ContractError(f"narrow range [{start}, {start + length}) outside extent {a.shape[axis]}")
    sl = (slice(start, start + length), slice(None)) if axis == 0 else (slice(None), slice(start, start + length))

    def back(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return ((a, full),)

    return _record(a.data[sl].copy(), (a,), back)
