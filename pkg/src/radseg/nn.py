"""Small layer toolkit built from the ops in :mod:`radseg.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter container, loosely modelled on torch."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


class Linear(Module):
    """Token-wise affine map on the last axis: ``x @ w + b`` with ``w`` of shape (in, out)."""

    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(n_in)
        self.w = param(normal(rng, (n_in, n_out), std))
        self.b = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Pointwise(Module):
    """1x1 convolution on ``(..., C, H, W)`` maps."""

    def __init__(self, rng, c_in: int, c_out: int, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(c_in)
        self.w = param(normal(rng, (c_out, c_in), std))
        self.b = param(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.pointwise_conv(x, self.w, self.b)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution composed of padded, strided slices and 1x1 convs.

    ``w`` has shape ``(Cout, Cin, kh, kw)``.
    """
    c_out, c_in, kh, kw = w.shape
    if x.shape[-3] != c_in:
        raise ValueError(f"conv weight expects {c_in} channels, input has {x.shape[-3]}")
    h, wd = x.shape[-2:]
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    xp = T.pad2d(x, padding)
    # Unfold: stack every strided tap along channels, then one 1x1 conv.
    taps = [xp[..., i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]
            for i in range(kh) for j in range(kw)]
    cols = taps[0] if len(taps) == 1 else T.concat(taps, axis=-3)
    wmat = T.reshape(T.transpose(w, (0, 2, 3, 1)), (c_out, kh * kw * c_in))
    return T.pointwise_conv(cols, wmat, b)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(c_in * k * k)
        self.w = param(normal(rng, (c_out, c_in, k, k), std))
        self.b = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.padding)


class LayerNorm(Module):
    """Normalise over the last axis."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.gamma + self.beta


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., N, D)`` -> ``(..., heads, N, D/heads)``."""
    *lead, n, d = x.shape
    x = T.reshape(x, tuple(lead) + (n, heads, d // heads))
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = x.ndim
    x = T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return T.reshape(x, tuple(lead) + (n, h * dh))


class MultiHeadAttention(Module):
    """softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, concatenated, then W_o.

    Queries come from ``x_q``; keys and values from ``x_kv`` (self-attention when
    they are the same tensor). Projections carry no bias.
    """

    def __init__(self, rng, dim: int, heads: int, kv_dim: int | None = None,
                 zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.wq = param(normal(rng, (dim, dim), 1.0 / math.sqrt(dim)))
        self.wk = param(normal(rng, (kv_dim, dim), 1.0 / math.sqrt(kv_dim)))
        self.wv = param(normal(rng, (kv_dim, dim), 1.0 / math.sqrt(kv_dim)))
        self.wo = param(normal(rng, (dim, dim), 0.0 if zero_out else 1.0 / math.sqrt(dim)))

    def __call__(self, x_q: Tensor, x_kv: Tensor | None = None) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        q = split_heads(T.matmul(x_q, self.wq), self.heads)
        k = split_heads(T.matmul(x_kv, self.wk), self.heads)
        v = split_heads(T.matmul(x_kv, self.wv), self.heads)
        # Scaling Q (N x d_h) instead of the N x M score matrix is cheaper.
        q = q * (1.0 / math.sqrt(q.shape[-1]))
        attn = T.softmax(T.matmul(q, T.swap_last(k)), axis=-1)
        return T.matmul(merge_heads(T.matmul(attn, v)), self.wo)


def to_tokens(x: Tensor) -> Tensor:
    """``(..., C, H, W)`` -> ``(..., H*W, C)`` in raster order."""
    *lead, c, h, w = x.shape
    x = T.reshape(x, tuple(lead) + (c, h * w))
    return T.swap_last(x)


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    *lead, n, c = x.shape
    return T.reshape(T.swap_last(x), tuple(lead) + (c, h, w))
