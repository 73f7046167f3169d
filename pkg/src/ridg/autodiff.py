"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed. Every operation whose inputs require gradients records its
parents and a backward closure on the output tensor; ``backward`` replays
those records in exact reverse construction order. Broadcasting is
deliberately restricted to the batch axis (always the second-to-last
axis), which is the only pattern the losses here need and keeps every
adjoint a plain sum.

A tensor created with ``requires_grad=False`` (or through ``detach``) is a
constant: it never receives a gradient and is safe to share across
threads. One graph must stay on one thread.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64
_node_counter = itertools.count()

BATCH_AXIS = -2
NORMALIZATIONS = ("element_mean", "sample_sum_over_batch")


def set_default_dtype(name):
    """Select run-level precision, ``"f32"`` or ``"f64"``."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


def precision_name():
    return "f32" if _default_dtype is np.float32 else "f64"


class Tensor:
    """Dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant view of the same values, cut out of any graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self):
        return tsum(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data, parents, backward_fn):
    """Wrap an op result; the closure returns one gradient per parent."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), dtype=data.dtype)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _batch_reduced(small, big):
    # True when `small` equals `big` with the batch axis removed.
    return len(small) + 1 == len(big) and small == big[:-2] + big[-1:]


def _aligned(name, a, b):
    """Forward views plus flags marking which side must sum over the batch
    axis in the backward pass."""
    if a.shape == b.shape:
        return a.data, b.data, False, False
    if a.ndim >= 2 and _batch_reduced(b.shape, a.shape):
        return a.data, np.expand_dims(b.data, BATCH_AXIS), False, True
    if b.ndim >= 2 and _batch_reduced(a.shape, b.shape):
        return np.expand_dims(a.data, BATCH_AXIS), b.data, True, False
    raise DimensionError(
        f"{name}: shapes {a.shape} and {b.shape} are neither equal nor "
        f"broadcastable along the batch axis")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv, ra, rb = _aligned("add", a, b)

    def bwd(g):
        ga = (g.sum(axis=BATCH_AXIS) if ra else g) if a.requires_grad else None
        gb = (g.sum(axis=BATCH_AXIS) if rb else g) if b.requires_grad else None
        return ga, gb

    return _from_op(av + bv, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv, ra, rb = _aligned("sub", a, b)

    def bwd(g):
        ga = (g.sum(axis=BATCH_AXIS) if ra else g) if a.requires_grad else None
        gb = (-(g.sum(axis=BATCH_AXIS)) if rb else -g) if b.requires_grad else None
        return ga, gb

    return _from_op(av - bv, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv, ra, rb = _aligned("mul", a, b)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g * bv
            if ra:
                ga = ga.sum(axis=BATCH_AXIS)
        if b.requires_grad:
            gb = g * av
            if rb:
                gb = gb.sum(axis=BATCH_AXIS)
        return ga, gb

    return _from_op(av * bv, (a, b), bwd)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _from_op(np.maximum(a.data, 0), (a,), bwd)


def square(a):
    a = _as_tensor(a)

    def bwd(g):
        return (2.0 * a.data * g,)

    return _from_op(a.data * a.data, (a,), bwd)


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _from_op(a.data * c, (a,), bwd)


def tsum(a):
    """Sum of all entries, as a scalar tensor."""
    a = _as_tensor(a)

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _from_op(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _from_op(a.data @ b.data, (a, b), bwd)


def take_batch(a, indices):
    """Select samples along the batch axis; gradients scatter back."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"take_batch: needs a batch axis, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    axis = a.ndim - 2

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)

    return _from_op(np.take(a.data, idx, axis=axis), (a,), bwd)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax probability at the given class indices.

    Stabilized by per-row max subtraction, so huge logits do not overflow.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"softmax_cross_entropy: {logits.shape[0]} rows of logits vs labels of shape {y.shape}")
    if y.size == 0:
        raise ValidationError("softmax_cross_entropy: empty batch")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {y.dtype}")
    k = logits.shape[1]
    bad = np.flatnonzero((y < 0) | (y >= k))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"label {int(y[i])} at position {i} outside [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = y.shape[0]
    rows = np.arange(n)

    def bwd(g):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        grad /= n
        return (grad * g,)

    return _from_op(np.asarray(-logp[rows, y].mean(), dtype=logits.data.dtype), (logits,), bwd)


def mean_squared(a, b, normalization="element_mean"):
    """Squared deviation between ``a`` and a possibly batch-broadcast ``b``.

    ``element_mean`` divides the summed squared differences by the total
    element count; ``sample_sum_over_batch`` sums each sample's squared
    norm and divides by the batch size only.
    """
    if normalization not in NORMALIZATIONS:
        raise ContractError(
            f"unknown normalization {normalization!r}, expected one of {NORMALIZATIONS}")
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv, ra, rb = _aligned("mean_squared", a, b)
    diff = av - bv
    if normalization == "element_mean":
        denom = diff.size
    else:
        if diff.ndim < 2:
            raise DimensionError(
                f"sample_sum_over_batch needs a batch axis, got shape {diff.shape}")
        denom = diff.shape[BATCH_AXIS]

    def bwd(g):
        base = (2.0 / denom) * diff * g
        ga = gb = None
        if a.requires_grad:
            ga = base.sum(axis=BATCH_AXIS) if ra else base
        if b.requires_grad:
            gb = -(base.sum(axis=BATCH_AXIS) if rb else base)
        return ga, gb

    return _from_op(np.asarray((diff * diff).sum() / denom, dtype=diff.dtype), (a, b), bwd)


def backward(loss):
    """Propagate d(loss)/d(node) to every reachable gradient-requiring tensor.

    Repeated calls accumulate into ``grad``; callers zero grads between
    optimization steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to any gradient tape")

    nodes = {id(loss): loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in nodes:
                nodes[id(p)] = p
                stack.append(p)

    pending = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = pending.get(id(p))
            pending[id(p)] = gp if prev is None else prev + gp


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
