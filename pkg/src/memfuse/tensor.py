"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = mean(mul(err, err))
    tape.backward(loss)

Outside a tape every operation is a plain numpy computation, which is what
inference uses. A tape can be replayed exactly once.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateRowError, DimensionError, EmptyReductionError, GraphError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "memfuse_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_param", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, param: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad or param)
        self.is_param = param
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def param(cls, data, name: str | None = None) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), param=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise GraphError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> list[str]:
        """Reverse-accumulate dloss/dx into ``.grad`` of every grad-requiring input.

        Returns the visited op names in visiting order. ``params`` that the
        loss does not depend on get an all-zero grad.
        """
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GraphError("loss was not produced on this tape (detached graph)")
        if self.consumed:
            raise GraphError("tape already replayed; record a new tape before calling backward again")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        visited = []
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            visited.append(node.op)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad = inp.grad + gi
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        return visited


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> list[str]:
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise GraphError("loss is detached: it was not computed inside an active Tape")
    return loss._tape.backward(loss, params)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None or tape.consumed or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._tape = tape
    tape.nodes.append(_Node(op, inputs, out, bw))
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient produced under batch broadcasting back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree or ``b`` is 2-D."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape, "inner extents must match")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul", a.shape, b.shape, "batch extents must match")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _sum_to(ga, ad.shape), _sum_to(gb, bd.shape)

    return _emit("matmul", out, (a, b), bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is (out, in)."""
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError("affine", x.shape, weight.shape, bias.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1]), g2.sum(axis=0)

    return _emit("affine", out, (x, weight, bias), bw)


# ------------------------------------------------------------ elementwise

def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a vector matching ``a``'s last axis (bias add)."""
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise DimensionError("add", a.shape, b.shape)
    bshape = b.shape

    def bw(g):
        return g, _sum_to(g, bshape)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid, "scale": scale}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args, **kwargs)


# ---------------------------------------------------------------- softmax

def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is True.

    Masked positions come out exactly 0. ``mask`` must broadcast to the
    logits' shape. A row without any valid position raises.
    """
    x = logits.data
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        try:
            m = np.broadcast_to(m, x.shape)
        except ValueError:
            raise DimensionError("masked_softmax", x.shape, m.shape) from None
    valid = m.any(axis=-1)
    if not valid.all():
        bad = np.argwhere(~valid)[0]
        raise DegenerateRowError(f"masked_softmax: row {tuple(int(i) for i in bad)} has no valid position")
    shifted = np.where(m, x, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("masked_softmax", y, (logits,), bw)


# ------------------------------------------------------------- reductions

def _expand_mask(mask, shape: tuple[int, ...], axis: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape[: axis + 1]:
        raise DimensionError("mask", shape, m.shape, f"mask must cover axes 0..{axis}")
    return m.reshape(m.shape + (1,) * (len(shape) - m.ndim))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError("reduce", (ndim,), (axis,), "axis out of range")
    return axis % ndim


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor, axis: int | None = None, mask=None) -> Tensor:
    """Mean over ``axis`` (all entries if None); ``mask`` restricts to valid positions.

    ``mask`` has shape ``a.shape[:axis+1]``, e.g. ``(B, L)`` for a ``(B, L, D)`` input.
    """
    x = a.data
    if axis is None:
        if x.size == 0:
            raise EmptyReductionError("mean over an empty tensor")
        n = x.size
        shape = x.shape
        return _emit("mean", np.array(x.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))
    axis = _norm_axis(axis, x.ndim)
    if mask is None:
        if x.shape[axis] == 0:
            raise EmptyReductionError("mean over an empty axis")
        n = x.shape[axis]
        out = x.mean(axis=axis)

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape),)

        return _emit("mean", out, (a,), bw)
    m = _expand_mask(mask, x.shape, axis)
    count = m.sum(axis=axis, keepdims=True)
    if (count == 0).any():
        raise EmptyReductionError("masked mean: a reduced slice has no valid position")
    out = (np.where(m, x, 0.0).sum(axis=axis, keepdims=True) / count).squeeze(axis)

    def bw_masked(g):
        return (np.expand_dims(g, axis) * m / count,)

    return _emit("masked_mean", out, (a,), bw_masked)


def max_reduce(a: Tensor, axis: int, mask=None) -> Tensor:
    """Max over ``axis``; ties route the whole gradient to the first index."""
    x = a.data
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise EmptyReductionError("max over an empty axis")
    if mask is not None:
        m = _expand_mask(mask, x.shape, axis)
        if (~m.any(axis=axis)).any():
            raise EmptyReductionError("masked max: a reduced slice has no valid position")
        x = np.where(m, x, -np.inf)
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        gi = np.zeros(shape)
        np.put_along_axis(gi, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gi,)

    return _emit("max", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise EmptyReductionError("concat of no tensors")
    nd = tensors[0].ndim
    axis = _norm_axis(axis, nd)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), bw)


def reductions(op: str, *args, **kwargs) -> Tensor:
    table = {"sum": sum_all, "mean_over_axis": mean, "max_over_axis": max_reduce, "concat": concat}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](*args, **kwargs)


# ------------------------------------------------------------ shape ops

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", old, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


# ------------------------------------------------------ composite layers

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float) -> Tensor:
    """gain * (x - mean) / sqrt(var + eps) + shift over the last axis (biased variance)."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gain.shape, shift.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + shift.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to(g * xhat, (d,)), _sum_to(g, (d,))

    return _emit("layer_norm", out, (x, gain, shift), bw)


def dropout_mask(x: Tensor, keep: np.ndarray, rate: float) -> Tensor:
    """Apply a precomputed Bernoulli keep-mask with inverted scaling 1/(1-rate)."""
    if keep.shape != x.shape:
        raise DimensionError("dropout", x.shape, keep.shape)
    factor = np.where(keep, 1.0 / (1.0 - rate), 0.0)
    return _emit("dropout", x.data * factor, (x,), lambda g: (g * factor,))
