"""Class-aware point refinement on upsampled logits.

The K pixels with the smallest top-2 probability margin get a residual
correction from a small MLP fed with the local high-resolution feature and the
pixel's current logits. All other pixels are passed through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


@dataclass
class CaprConfig:
    k: int | None = None  # None -> min(1024, 5% of pixels)
    iters: int = 1
    hidden: int = 64
    max_k: int = 1024
    fraction: float = 0.05

    def resolve_k(self, n_pixels: int) -> int:
        if self.k is not None:
            return max(0, int(self.k))
        return min(self.max_k, int(self.fraction * n_pixels))


@dataclass
class UncertaintySelection:
    """Raster indices (flattened ``H*W``) and their margins, per image.

    ``indices`` and ``margins`` have shape ``(..., K)``; margins are sorted
    non-decreasing along the last axis.
    """

    indices: np.ndarray
    margins: np.ndarray
    shape: tuple[int, int]

    @property
    def coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.indices, self.shape), axis=-1)


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    return T.bilinear_resize(logits, h, w)


def margin_map(logits_up) -> np.ndarray:
    """Top-2 softmax probability gap per pixel, shape ``(..., H, W)``."""
    z = logits_up.data if isinstance(logits_up, Tensor) else np.asarray(logits_up, dtype=np.float64)
    if z.shape[-3] < 2:
        raise ValueError(f"margin needs at least 2 classes, got {z.shape[-3]}")
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    p = e / e.sum(axis=-3, keepdims=True)
    top2 = -np.partition(-p, 1, axis=-3)[..., :2, :, :]
    return np.clip(top2[..., 0, :, :] - top2[..., 1, :, :], 0.0, 1.0)


def select_topk(margins: np.ndarray, k: int) -> UncertaintySelection:
    """The ``k`` smallest margins; ties resolve in raster order."""
    m = np.asarray(margins, dtype=np.float64)
    h, w = m.shape[-2:]
    flat = m.reshape(m.shape[:-2] + (h * w,))
    idx = T.topk_indices(flat, max(0, k), smallest=True)
    return UncertaintySelection(idx, np.take_along_axis(flat, idx, axis=-1), (h, w))


class PointHead(nn.Module):
    """Two-layer GELU MLP; output layer starts at zero so refinement is initially identity."""

    def __init__(self, rng, n_in: int, hidden: int, n_out: int):
        self.fc1 = nn.Linear(rng, n_in, hidden)
        self.fc2 = nn.Linear(rng, hidden, n_out, zero=True)
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += int(np.prod(x.shape[:-1]))
        return self.fc2(T.gelu(self.fc1(x)))


class PointRefiner(nn.Module):
    def __init__(self, cfg: CaprConfig, hr_channels: int, num_classes: int, seed: int):
        self.cfg = cfg
        self.mlp = PointHead(np.random.default_rng([seed, 300]), hr_channels + num_classes,
                             cfg.hidden, num_classes)

    @property
    def mlp_calls(self) -> int:
        return self.mlp.calls

    def refine(self, logits_up: Tensor, selection: UncertaintySelection, f_hr_up: Tensor) -> Tensor:
        """Residual update at the selected pixels only."""
        h, w = logits_up.shape[-2:]
        if f_hr_up.shape[-2:] != (h, w):
            raise ValueError(f"HR features {f_hr_up.shape[-2:]} do not match logits {(h, w)}")
        idx = np.asarray(selection.indices)
        if idx.size and (idx.min() < 0 or idx.max() >= h * w):
            raise IndexError(f"selection index out of range for {h}x{w} grid")
        if idx.shape[-1] == 0:
            return logits_up
        lead = logits_up.shape[:-3]
        nc, nh = logits_up.shape[-3], f_hr_up.shape[-3]
        flat_logits = T.reshape(logits_up, lead + (nc, h * w))
        flat_hr = T.reshape(f_hr_up, lead + (nh, h * w))
        index = _pixel_index(lead, idx)
        picked = T.concat([flat_hr[index(nh)], flat_logits[index(nc)]], axis=-2)
        delta = T.swap_last(self.mlp(T.swap_last(picked)))
        out = T.scatter_add(flat_logits, index(nc), delta)
        return T.reshape(out, logits_up.shape)

    def __call__(self, logits_up: Tensor, f_hr_up: Tensor, k: int | None = None,
                 fixed: list[UncertaintySelection] | None = None):
        """Run ``cfg.iters`` select-and-refine passes; returns (logits, selections).

        ``fixed`` replaces the margin-based selection (one entry per pass).
        """
        h, w = logits_up.shape[-2:]
        k = self.cfg.resolve_k(h * w) if k is None else k
        selections = []
        out = logits_up
        for it in range(self.cfg.iters):
            sel = fixed[it] if fixed is not None else select_topk(margin_map(out), k)
            selections.append(sel)
            out = self.refine(out, sel, f_hr_up)
        return out, selections


def _pixel_index(lead: tuple[int, ...], idx: np.ndarray):
    """Fancy index picking ``(..., C, K)`` from ``(..., C, H*W)`` at per-image pixels."""
    idx = np.asarray(idx)

    def build(channels: int):
        chan = np.arange(channels)[:, None]
        if not lead:
            return (chan, idx[None, :])
        batch = np.indices(lead, sparse=True)
        batch = tuple(b[..., None, None] for b in batch)
        return batch + (chan, idx[..., None, :])

    return build
