"""Dense-tensor engine with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. While a :class:`Tape` is active,
every differentiable operation appends a record (output, inputs, backward
rule) in execution order; :meth:`Tape.backward` replays the records in
reverse, accumulating gradients into ``Tensor.grad``.

Training runs in float32 by default; gradient-check suites build float64
tensors and everything propagates the input dtype.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

# Set True in debugging sessions to fail fast on the first non-finite value
# produced by any forward op.
DEBUG_CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of one forward pass, replayed backwards for gradients.

    Inputs of every recorded operation precede it on the tape, so a single
    reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, rule):
        self._records.append((out, inputs, rule))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        ``loss`` must be scalar. Gradients are accumulated (not overwritten),
        matching the usual zero-then-step training idiom.
        """
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        # id -> [tensor, grad array]; arrays are never mutated in place
        # because backward rules may alias their upstream gradient.
        pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
        for out, inputs, rule in reversed(self._records):
            entry = pending.pop(id(out), None)
            if entry is None:
                continue
            grads = rule(entry[1])
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                held = pending.get(id(inp))
                if held is None:
                    pending[id(inp)] = [inp, g]
                else:
                    held[1] = held[1] + g
        for tensor, g in pending.values():
            if tensor.requires_grad:
                tensor.grad = g if tensor.grad is None else tensor.grad + g


class Tensor:
    """Dense array plus gradient slot; participates in tape recording."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, rule):
    """Wrap ``data``; record the op if a tape is active and grads are needed."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) or (
        isinstance(x, np.number) and np.ndim(x) == 0
    )


def add(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _result(a.data + b, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _result(a.data + b.data, (a, b), rule)


def sub(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _result(a.data - b, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _result(a.data - b.data, (a, b), rule)


def mul(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _result(a.data * b, (a,), lambda g: (g * b,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), rule)


def div(a, b):
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _result(ad / bd, (a, b), rule)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float):
    """Multiply by a python scalar without touching the array dtype."""
    return mul(a, s)


# -- nonlinearities -------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    a = as_tensor(a)
    out = np.logaddexp(np.asarray(0.0, dtype=a.data.dtype), a.data)
    sig = expit(a.data)
    return _result(out, (a,), lambda g: (g * sig,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def softmax_rows(x, scale: float = 1.0):
    """Row-stochastic softmax over the last axis of ``scale * x``.

    Stabilized by subtracting the row maximum (softmax is shift invariant,
    so the detached shift is exact).
    """
    x = as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax needs at least one column")
    z = x.data * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (scale * out * (g - inner),)

    return _result(out, (x,), rule)


def dropout(x, rate: float, training: bool, rng=None):
    """Inverted dropout: zero with probability ``rate``, rescale survivors.

    Identity when ``rate == 0`` or in eval mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    mask /= keep
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# -- structural ops -------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy's stacked-matmul broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), rule)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes[:-1])

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule
    )


def concat_rows(a, b):
    """Stack two row blocks vertically."""
    return concat([a, b], axis=0)


def take(a, index):
    """Slice or gather; the backward pass scatter-adds into the source shape."""
    a = as_tensor(a)
    shape, dtype = a.data.shape, a.data.dtype

    def rule(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), rule)


def take_rows(table, indices):
    """Gather rows of a 2-d table by integer index array."""
    return take(table, np.asarray(indices))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = math.prod(a.data.shape[i] for i in axis)
    else:
        n = a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)
