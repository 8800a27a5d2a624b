"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable. Operations are recorded on every active
:class:`GradTape` when at least one input requires a gradient; the tape then
replays the records in exact reverse order to accumulate gradients.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([6.])
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from mocl.errors import DegenerateInputError, LabelIndexError, NonFiniteError

_ACTIVE: list["GradTape"] = []

MASK_VALUE = -1e9


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of differentiable operations.

    Records are ``(output, inputs, backward)`` triples. ``gradient`` walks them
    back to front; leaves that never reached the target get zero gradients.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        for p in parents:
            if p.requires_grad and id(p) not in self._leaves:
                self._leaves[id(p)] = p
        self._records.append((out, parents, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.data.size != 1:
            raise ValueError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, parents, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + gp if k in grads else gp
        return [np.array(grads[id(s)]) if id(s) in grads else np.zeros_like(s.data) for s in sources]


def _result(arr, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tracked = bool(_ACTIVE) and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, tracked)
    if tracked:
        for tape in _ACTIVE:
            tape._record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(0.5 * x * (1.0 + t), (a,), backward, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes where ``lo <= a <= hi``."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if len(ts) == 1:
        return ts[0]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts)

    def backward(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), backward, "getitem")


def take_rows(table, ids) -> Tensor:
    """Embedding lookup ``table[ids]`` for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (z,)

    return _result(table.data[ids], (table,), backward, "take_rows")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- normalisers and losses ----------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                   "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _result(out, (a,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
                   "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = mean(x, -1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, -1, keepdims=True)
    return xc / sqrt(var + eps) * gamma + beta


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``logsumexp(logits) - logits[label]``.

    A 1-D ``logits`` with an integer label gives a scalar loss for one example;
    a ``(B, C)`` batch gives the batch mean.
    """
    logits = as_tensor(logits)
    n_cls = logits.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if np.any(lab < 0) or np.any(lab >= n_cls):
        raise LabelIndexError(f"label out of range for {n_cls} classes: {labels}")
    lp = log_softmax(logits, -1)
    if logits.ndim == 1:
        return -lp[int(lab)]
    picked = lp[np.arange(lp.shape[0]), lab]
    return -mean(picked)


def _norms(a: Tensor) -> Tensor:
    return sqrt(tsum(a * a, -1))


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis (broadcasting leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1] or a.shape[-1] < 1:
        raise ValueError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    if np.any(np.abs(a.data).sum(-1) == 0) or np.any(np.abs(b.data).sum(-1) == 0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return clip(tsum(a * b, -1) / (_norms(a) * _norms(b)), -1.0, 1.0)


def cosine_matrix(x, v) -> Tensor:
    """Pairwise cosine scores between rows of ``x`` (B, D) and rows of ``v`` (n, D)."""
    x, v = as_tensor(x), as_tensor(v)
    if np.any(np.abs(x.data).sum(-1) == 0) or np.any(np.abs(v.data).sum(-1) == 0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    xn = x / reshape(_norms(x), x.shape[:-1] + (1,))
    vn = v / reshape(_norms(v), v.shape[:-1] + (1,))
    return clip(matmul(xn, transpose(vn)), -1.0, 1.0)


# -- validation ----------------------------------------------------------------

def numerical_gradient(f: Callable[[Tensor], Tensor], theta: np.ndarray, eps: float) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)
    fd = np.empty_like(theta)
    for i in np.ndindex(theta.shape):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += eps
        tm[i] -= eps
        try:
            fp = f(Tensor(tp)).item()
            fm = f(Tensor(tm)).item()
        except NonFiniteError as exc:
            raise NonFiniteError(f"numerical instability at component {i}: {exc}") from exc
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"numerical instability at component {i}")
        fd[i] = (fp - fm) / (2.0 * eps)
    return fd


def grad_check(f: Callable[[Tensor], Tensor], theta, eps: float = 1e-6, floor: float = 1e-4) -> float:
    """Max component-wise relative error between tape and central-difference gradients.

    The denominator is ``max(|g_tape|, |g_fd|, floor)`` so components whose
    true gradient is ~0 are judged on absolute error.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    theta = np.array(theta, dtype=np.float64)
    x = Tensor(theta, requires_grad=True)
    with GradTape() as tape:
        y = f(x)
    (g,) = tape.gradient(y, [x])
    fd = numerical_gradient(f, theta, eps)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return float(np.max(np.abs(g - fd) / denom))
