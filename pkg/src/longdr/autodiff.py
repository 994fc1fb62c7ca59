"""Reverse-mode automatic differentiation on dense float64 tensors.

Define-by-run: operations executed while a ``Tape`` is active are recorded
in execution order (which is already topological) and replayed in reverse by
``backward``. With no active tape, the same operations run as plain numpy
with zero recording overhead, which is how evaluation passes and target
network passes run.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_TAPE_STACK: list = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


class no_grad:
    """Context that suppresses recording even if a tape is active."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


class _Node:
    __slots__ = ("inputs", "out", "fn")

    def __init__(self, inputs, out, fn):
        self.inputs = inputs
        self.out = out
        self.fn = fn


class Tensor:
    """Dense float64 array with an optional gradient requirement.

    Tensors are hashable by identity; gradient maps returned by
    ``backward`` are keyed by the tensor objects themselves.
    """

    __slots__ = ("data", "requires_grad", "name")

    # defer mixed ndarray/Tensor arithmetic to the reflected operators here
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite values in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to module-level ops
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _wrap(arr):
    """Internal constructor for op outputs, skipping the finiteness check."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.name = None
    return t


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=np.float64))


def _record(out, inputs, fn):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(inputs, out, fn))
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _wrap(a.data + b.data)

    def fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _wrap(a.data - b.data)

    def fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _wrap(a.data * b.data)

    def fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), fn)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _wrap(a.data / b.data)

    def fn(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), fn)


def power(a, p):
    """Elementwise a**p for a python scalar exponent."""
    a = _as_tensor(a)
    p = float(p)
    out = _wrap(a.data ** p)

    def fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), fn)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = _wrap(np.matmul(a.data, b.data))

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    out_arr = np.empty_like(d)
    pos = d >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_arr[~pos] = ez / (1.0 + ez)
    out = _wrap(out_arr)

    def fn(g):
        return (g * out_arr * (1.0 - out_arr),)

    return _record(out, (x,), fn)


def tanh(x):
    x = _as_tensor(x)
    out_arr = np.tanh(x.data)
    out = _wrap(out_arr)

    def fn(g):
        return (g * (1.0 - out_arr * out_arr),)

    return _record(out, (x,), fn)


def relu(x):
    x = _as_tensor(x)
    out = _wrap(np.maximum(x.data, 0.0))

    def fn(g):
        return (g * (x.data > 0.0),)

    return _record(out, (x,), fn)


def exp(x):
    x = _as_tensor(x)
    out_arr = np.exp(x.data)
    out = _wrap(out_arr)

    def fn(g):
        return (g * out_arr,)

    return _record(out, (x,), fn)


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out = _wrap(np.log(x.data))

    def fn(g):
        return (g / x.data,)

    return _record(out, (x,), fn)


def clip01(x):
    """Clip to [0, 1]; hard clip with zero gradient outside the interval."""
    x = _as_tensor(x)
    out = _wrap(np.clip(x.data, 0.0, 1.0))

    def fn(g):
        return (g * ((x.data > 0.0) & (x.data < 1.0)),)

    return _record(out, (x,), fn)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "exp": exp,
    "clip01": clip01,
}


def elementwise(kind, x):
    """Dispatch by name over the supported elementwise primitives."""
    try:
        f = _ELEMENTWISE[kind]
    except KeyError:
        raise DomainError(f"unknown elementwise kind {kind!r}") from None
    return f(x)


# ---------------------------------------------------------------------------
# shape & reduction


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = _wrap(np.sum(x.data, axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, x.data.shape).copy(),)

    return _record(out, (x,), fn)


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = _wrap(np.mean(x.data, axis=axis, keepdims=keepdims))
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx / count, x.data.shape).copy(),)

    return _record(out, (x,), fn)


def reshape(x, shape):
    x = _as_tensor(x)
    out = _wrap(x.data.reshape(shape))

    def fn(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), fn)


def swapaxes(x, a, b):
    x = _as_tensor(x)
    out = _wrap(np.swapaxes(x.data, a, b).copy())

    def fn(g):
        return (np.swapaxes(g, a, b),)

    return _record(out, (x,), fn)


def getitem(x, idx):
    """Basic (slice/int) indexing; backward scatters into a zero buffer."""
    x = _as_tensor(x)
    out = _wrap(np.array(x.data[idx]))

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), fn)


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    out = _wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        grads = []
        for k in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(out, tuple(parts), fn)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_arr = e / np.sum(e, axis=axis, keepdims=True)
    out = _wrap(out_arr)

    def fn(g):
        dot = np.sum(g * out_arr, axis=axis, keepdims=True)
        return (out_arr * (g - dot),)

    return _record(out, (x,), fn)


def dropout(x, p, rng):
    """Inverted dropout; identity when p == 0."""
    if p == 0.0:
        return x
    x = _as_tensor(x)
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, _wrap(mask))


# ---------------------------------------------------------------------------
# backward


def backward(tape, loss):
    """Walk the tape in reverse and return gradients for every leaf.

    A leaf is a requires_grad tensor that is not itself the output of a
    recorded operation (parameters, and any inputs marked requires_grad).
    Gradients accumulate additively across fan-out. Leaves unreachable from
    the loss get zero gradients.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    output_ids = {id(n.out) for n in tape.nodes}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        gs = node.fn(g)
        for inp, gi in zip(node.inputs, gs):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in output_ids and inp not in result:
                g = grads.get(id(inp))
                result[inp] = np.zeros_like(inp.data) if g is None else g
    if loss.requires_grad and id(loss) not in output_ids and loss not in result:
        result[loss] = np.ones_like(loss.data)
    return result
