"""Reverse-mode automatic differentiation over numpy float64 arrays.

Operations executed while a :class:`Tape` is active (and at least one input
requires a gradient) are recorded; :meth:`Tape.backward` walks the record in
reverse and returns gradients for every tracked leaf.  Outside a tape the
same functions are plain numpy forward passes, which is what inference uses.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NonFiniteError, RankError

_TAPES: list = []


class Tensor:
    """A float64 array with an optional gradient requirement.

    User-constructed tensors are validated (finite values, float64 copy).
    Tensors produced by operations skip validation; the training loop checks
    finiteness after every step instead.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            label = f" {name!r}" if name else ""
            raise NonFiniteError(f"tensor{label} contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False, name=None):
        obj = cls.__new__(cls)
        obj.data = arr
        obj.requires_grad = requires_grad
        obj.name = name
        return obj

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op evaluated inside the ``with`` block
    whose inputs require gradients is appended in execution order, which is
    a valid topological order by construction.
    """

    def __init__(self):
        self.records = []
        self._produced = set()
        self._leaves = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def _append(self, outputs, inputs, backward):
        produced = self._produced
        for t in inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in self._leaves:
                self._leaves[id(t)] = t
        for o in outputs:
            produced.add(id(o))
        self.records.append((outputs, inputs, backward))

    @property
    def leaves(self):
        return list(self._leaves.values())

    def backward(self, loss, wrt=None):
        """Gradients of scalar ``loss`` w.r.t. tracked leaves.

        Returns a dict mapping each leaf tensor to its gradient array.  Leaves
        in ``wrt`` (or recorded on the tape) that do not influence the loss
        get zeros.
        """
        if loss.data.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        owned = set()   # keys whose gradient buffer was allocated here, safe to += into
        for outputs, inputs, fn in reversed(self.records):
            if len(outputs) == 1:
                g = grads.pop(id(outputs[0]), None)
                if g is None:
                    continue
                gin = fn(g)
            else:
                gouts = [grads.pop(id(o), None) for o in outputs]
                if all(g is None for g in gouts):
                    continue
                gouts = [np.zeros_like(o.data) if g is None else g
                         for o, g in zip(outputs, gouts)]
                gin = fn(*gouts)
            for t, g in zip(inputs, gin):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = g
                elif key in owned:
                    prev += g
                else:
                    grads[key] = prev + g
                    owned.add(key)
        targets = self.leaves if wrt is None else list(wrt)
        out = {}
        for leaf in targets:
            g = grads.get(id(leaf))
            out[leaf] = np.zeros_like(leaf.data) if g is None else g
        return out


def backward(tape, loss, wrt=None):
    return tape.backward(loss, wrt)


class no_grad:
    """Suspend recording inside an enclosing tape."""

    def __enter__(self):
        _TAPES.append(None)

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def grad_enabled():
    return bool(_TAPES) and _TAPES[-1] is not None


def record(out_arrays, inputs, backward):
    """Wrap op results and record them on the active tape when needed.

    ``backward`` receives one gradient per output and returns one gradient
    (or None) per input.
    """
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor._wrap(a, track) for a in out_arrays)
    if track:
        tape._append(outs, tuple(inputs), backward)
    return outs


def record1(arr, inputs, backward):
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor._wrap(arr, True)
                tape._append((out,), tuple(inputs), backward)
                return out
    return Tensor._wrap(arr, False)


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(opname, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return record1(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return record1(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return record1(ad * bd, (a, b), bw)


def matmul(a, b):
    """Matrix product of 2-D tensors (or equally batched stacks)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return record1(ad @ bd, (a, b), bw)


def linear(x, w, b=None, activation=None):
    """``act(x @ w + b)`` for ``x`` of shape [N, in] and ``w`` of shape [in, out].

    ``b`` may be [out] or a per-row [N, out]; ``activation`` is None or "relu".
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd
    inputs = (x, w)
    if b is not None:
        if b.shape[-1] != wd.shape[1]:
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
        y += b.data
        inputs = (x, w, b)
        bshape = b.shape
    if activation == "relu":
        active = y > 0
        y *= active
    elif activation is not None:
        raise ValueError(f"unsupported fused activation {activation!r}")

    def bw(g):
        if activation is not None:
            g = g * active
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, unbroadcast(g, bshape)
    return record1(y, inputs, bw)


def relu(x):
    x = as_tensor(x)
    active = x.data > 0
    return record1(x.data * active, (x,), lambda g: (g * active,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record1(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return record1(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def softplus(x):
    x = as_tensor(x)
    xd = x.data
    return record1(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return record1(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return record1(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return record1(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return record1(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x, axis=-1):
    """Max-subtracted softmax."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return record1(y, (x,), bw)


def activation(x, kind):
    """Dispatch by name: relu, tanh, sigmoid or softmax (over the last axis)."""
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ----------------------------------------------------------------------
# reductions and shape manipulation

def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    y = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return record1(y, (x,), bw)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {shape}") from None
    return record1(y, (x,), lambda g: (g.reshape(old),))


def getitem(x, idx):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g) if _has_advanced(idx) else out.__setitem__(idx, g)
        return (out,)
    return record1(np.array(x.data[idx]), (x,), bw)


def _has_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record1(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: shapes differ {shapes}") from None
    n = len(tensors)
    return record1(y, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tile_last(x, reps):
    """Repeat ``x`` ``reps`` times along its last axis."""
    x = as_tensor(x)
    d = x.shape[-1]
    y = np.tile(x.data, (1,) * (x.ndim - 1) + (reps,))
    return record1(y, (x,),
                   lambda g: (g.reshape(g.shape[:-1] + (reps, d)).sum(axis=-2),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return record1(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),))


def broadcast_rows(x, n):
    """Repeat a [1, D] tensor to [n, D]; identity when it already has n rows."""
    x = as_tensor(x)
    if x.shape[0] == n:
        return x
    if x.shape[0] != 1:
        raise DimensionError(f"cannot broadcast {x.shape} to {n} rows")
    return record1(np.repeat(x.data, n, axis=0), (x,),
                   lambda g: (g.sum(axis=0, keepdims=True),))
