"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Ops record themselves on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape every op is a plain numpy
computation, which is what evaluation uses.

Conventions shared by every op:

* spatial ops act on the trailing ``(C, H, W)`` axes and accept any number of
  leading batch axes;
* bilinear resampling uses half-pixel centres
  (``src = (dst + 0.5) * in / out - 0.5``, clamped to the valid range);
* convolutions use same-padding with zero fill.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape (dead tape, non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.scopes = []
    return _state.tapes


def _scope_stack() -> list[str]:
    _tape_stack()
    return _state.scopes


@contextmanager
def scope(name: str):
    """Tag every op recorded inside the block with ``name`` (nested with dots)."""
    stack = _scope_stack()
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced under a live tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class OpRecord:
    """Lightweight trace of one executed op, kept after the tape is consumed."""

    op: str
    scope: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class _Node:
    record: OpRecord
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed ops; replayed in reverse by :meth:`backward`."""

    records: list[OpRecord] = field(default_factory=list)
    alive: bool = True
    _nodes: list[_Node] = field(default_factory=list, repr=False)
    _leaves: dict[int, Tensor] = field(default_factory=dict, repr=False)
    _produced: set[int] = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, op, inputs, output, backward) -> None:
        if not self.alive:
            raise TapeError("cannot record on a consumed tape")
        rec = OpRecord(op, ".".join(_scope_stack()), tuple(id(t) for t in inputs), id(output))
        self.records.append(rec)
        self._nodes.append(_Node(rec, tuple(inputs), output, backward))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self._produced.add(id(output))
        output._tape = self

    def backward(self, loss: Tensor) -> None:
        if not self.alive:
            raise TapeError("tape already consumed; run the forward pass again")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)
        self.alive = False
        self._nodes.clear()
        self._leaves.clear()

    def census(self) -> Counter:
        """Count recorded ops per scope."""
        return Counter(r.scope for r in self.records)

    def readers(self, t: Tensor) -> list[OpRecord]:
        """Records of every op that consumed ``t``."""
        return [r for r in self.records if id(t) in r.input_ids]


@contextmanager
def no_tape():
    """Temporarily hide active tapes so ops run as plain numpy."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def _check_finite(name: str, arr: np.ndarray) -> None:
    # A sum is non-finite iff some entry is (or the sum overflows past 1e308).
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"{name} produced non-finite values")


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = (1.0 - th * th) * dinner
        d *= 0.5 * x
        d += 0.5 * (1.0 + th)
        d *= g
        return (d,)

    return _emit("gelu", out, (a,), back)


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    nd = as_tensor(a).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    """Slicing, strided slicing and integer-array gathers."""
    a = as_tensor(a)
    shape = a.shape

    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in idx)

    def back(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _emit("slice", np.array(a.data[index]), (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, ts, back)


def scatter_add(base, index, values) -> Tensor:
    """Copy of ``base`` with ``values`` added at ``index`` (unique positions).

    Positions outside ``index`` are copied bit-exactly.
    """
    base, values = as_tensor(base), as_tensor(values)
    out = base.data.copy()
    out[index] += values.data
    return _emit("scatter_add", out, (base, values), lambda g: (g, np.array(g[index])))


def topk_indices(values: np.ndarray, k: int, smallest: bool = True) -> np.ndarray:
    """Indices of the ``k`` smallest (or largest) entries along the last axis.

    Ties are broken by position (lower index first). Not differentiable.
    """
    v = np.asarray(values.data if isinstance(values, Tensor) else values)
    n = v.shape[-1]
    k = max(0, min(int(k), n))
    key = v if smallest else -v
    order = np.argsort(key, axis=-1, kind="stable")
    return order[..., :k]


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # Shared weight: fold the batch axes into one GEMM.
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", out, (a, b), back)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = g - dot
        gx *= out
        return (gx,)

    return _emit("softmax", out, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Composed from sub/exp/sum/log with a constant max shift."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    shifted = a - shift
    return shifted - log(tsum(exp(shifted), axis=axis, keepdims=True))


# ---------------------------------------------------------------- spatial ops


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out x n_in`` half-pixel bilinear interpolation weights along one axis."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize extents must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _emit("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = ry @ x.data @ rx.T

    def back(g):
        return (ry.T @ g @ rx,)

    return _emit("bilinear_resize", out, (x,), back)


def depthwise_conv2d(x, k, dilation: int = 1) -> Tensor:
    """Per-channel 2-D convolution (cross-correlation) with same zero padding.

    ``x``: ``(..., C, H, W)``; ``k``: ``(C, kh, kw)`` with odd extents.
    """
    x, k = as_tensor(x), as_tensor(k)
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    c, h, w = x.shape[-3:]
    if k.ndim != 3 or k.shape[0] != c:
        raise ValueError(f"kernel shape {k.shape} does not match {c} input channels")
    kh, kw = k.shape[1:]
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad)
    kd = k.data
    out = np.zeros(x.shape)
    for i in range(kh):
        for j in range(kw):
            win = xp[..., i * dilation:i * dilation + h, j * dilation:j * dilation + w]
            out += kd[:, i, j][:, None, None] * win

    def back(g):
        gxp = np.zeros(xp.shape)
        gk = np.zeros(kd.shape)
        lead = tuple(range(g.ndim - 3))
        for i in range(kh):
            for j in range(kw):
                sl = (..., slice(i * dilation, i * dilation + h), slice(j * dilation, j * dilation + w))
                gxp[sl] += kd[:, i, j][:, None, None] * g
                gk[:, i, j] = (xp[sl] * g).sum(axis=lead + (-2, -1))
        return gxp[..., ph:ph + h, pw:pw + w], gk

    return _emit("depthwise_conv2d", out, (x, k), back)


def pointwise_conv(x, w, b=None) -> Tensor:
    """Per-pixel linear map: ``w`` is ``(Cout, Cin)``, ``b`` is ``(Cout,)``."""
    x, w = as_tensor(x), as_tensor(w)
    cin = x.shape[-3]
    if w.ndim != 2 or w.shape[1] != cin:
        raise ValueError(f"weight shape {w.shape} does not match {cin} input channels")
    h, wd = x.shape[-2:]
    lead = x.shape[:-3]
    xf = x.data.reshape(lead + (cin, h * wd))
    wdat = w.data
    out = (wdat @ xf).reshape(lead + (w.shape[0], h, wd))
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        inputs.append(b)

    def back(g):
        gf = g.reshape(lead + (w.shape[0], h * wd))
        gx = (wdat.T @ gf).reshape(x.shape)
        gw = (gf @ np.swapaxes(xf, -1, -2)).reshape(-1, *wdat.shape).sum(axis=0)
        res = [gx, gw]
        if b is not None:
            res.append(gf.sum(axis=-1).reshape(-1, wdat.shape[0]).sum(axis=0))
        return res

    return _emit("pointwise_conv", out, inputs, back)


def pad2d(x, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return _emit("pad", np.pad(x.data, widths), (x,),
                 lambda g: (g[..., pad:-pad, pad:-pad],))
