"""Training objective: segmentation CE + diagonal supervision + boundary-band loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import IGNORE, LabelMask
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda_diag: float = 0.1
    bbl_start: float = 0.01
    bbl_end: float = 0.1
    bbl_ramp: float = 0.5

    def validate(self) -> None:
        if self.lambda_diag < 0 or self.bbl_start < 0:
            raise ValueError("loss weights must be non-negative")
        if self.bbl_end < self.bbl_start:
            raise ValueError("bbl schedule must be non-decreasing (end >= start)")
        if self.bbl_ramp <= 0:
            raise ValueError("bbl_ramp must be positive")

    def lambda_bbl(self, progress: float) -> float:
        ramp = min(max(progress, 0.0) / self.bbl_ramp, 1.0)
        return self.bbl_start + (self.bbl_end - self.bbl_start) * ramp


@dataclass
class BoundaryBand:
    """Band cells on the lattice and the ordered (i, j) pairs, as raster indices."""

    band: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    @property
    def empty(self) -> bool:
        return len(self.pairs) == 0


def _labels(gt) -> tuple[np.ndarray, int]:
    if isinstance(gt, LabelMask):
        return gt.labels, gt.ignore_value
    return np.asarray(gt), IGNORE


def cross_entropy(logits: Tensor, gt) -> Tensor:
    """Mean CE over non-ignored pixels; ``logits`` is ``(..., C, H, W)``.

    Returns a zero scalar (with a ``RuntimeWarning``) when every pixel is ignored.
    """
    labels, ignore = _labels(gt)
    nc = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore
    n = int(valid.sum())
    if n == 0:
        warnings.warn("all pixels ignored; loss defined as 0", RuntimeWarning, stacklevel=2)
        return T.mul(T.tsum(logits), 0.0)
    if np.any(labels[valid] >= nc) or np.any(labels[valid] < 0):
        raise ValueError("label id outside class range")
    onehot = np.zeros(logits.shape)
    cls = np.where(valid, labels, 0)
    np.put_along_axis(onehot, np.expand_dims(cls, -3), 1.0, axis=-3)
    onehot *= np.expand_dims(valid, -3)
    logp = T.log_softmax(logits, axis=-3)
    return T.neg(T.tsum(logp * onehot)) * (1.0 / n)


def seg_loss(logits_up: Tensor, gt) -> Tensor:
    return cross_entropy(logits_up, gt)


def diag_loss(class_attn: Tensor, gt_ds) -> Tensor:
    return cross_entropy(class_attn, gt_ds)


def build_band(gt_ds, r_band: int = 2, r_ring: int = 1) -> BoundaryBand:
    """Band = cells whose (2r+1)^2 window holds >= 2 distinct non-ignore labels.

    Pairs join each band cell ``i`` to the cells ``j`` at Chebyshev distance
    exactly ``r_ring``; pairs touching an ignored cell are dropped.
    """
    if r_band < 1 or r_ring < 1:
        raise ValueError("r_band and r_ring must be >= 1")
    labels, ignore = _labels(gt_ds)
    h, w = labels.shape
    band = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            win = labels[max(0, y - r_band):y + r_band + 1, max(0, x - r_band):x + r_band + 1]
            vals = np.unique(win[win != ignore])
            band[y, x] = len(vals) >= 2
    ring = [(dy, dx) for dy in range(-r_ring, r_ring + 1) for dx in range(-r_ring, r_ring + 1)
            if max(abs(dy), abs(dx)) == r_ring]
    pairs = []
    for y, x in zip(*np.nonzero(band)):
        if labels[y, x] == ignore:
            continue
        for dy, dx in ring:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] != ignore:
                pairs.append((y * w + x, yy * w + xx))
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return BoundaryBand(band, arr)


def pair_targets(gt_ds, band: BoundaryBand) -> np.ndarray:
    labels, _ = _labels(gt_ds)
    flat = labels.reshape(-1)
    return (flat[band.pairs[:, 0]] == flat[band.pairs[:, 1]]).astype(np.float64)


def cosine_scores(tokens: Tensor, i_idx, j_idx, w_s: Tensor, b_s: Tensor) -> Tensor:
    """``w_s * cos(tok_i, tok_j) + b_s`` for flattened ``(D, N)`` tokens; zero vectors give cos 0."""
    a = tokens[:, np.asarray(i_idx)]
    b = tokens[:, np.asarray(j_idx)]
    dot = T.tsum(a * b, axis=0)
    na = T.tsum(a * a, axis=0)
    nb = T.tsum(b * b, axis=0)
    cos = dot / T.sqrt(na * nb + 1e-24)
    return cos * w_s + b_s


def pair_score(tokens: Tensor, i: int, j: int, w_s, b_s) -> Tensor:
    """Same-class score for one pair of lattice cells (raster indices) of a ``(D, H, W)`` lattice."""
    d = tokens.shape[-3]
    flat = T.reshape(tokens, (d, -1))
    return T.reshape(cosine_scores(flat, [i], [j], T.as_tensor(w_s), T.as_tensor(b_s)), ())


def bce_with_logits(s: Tensor, t: np.ndarray) -> Tensor:
    """Elementwise ``softplus(s) - t*s``."""
    return T.softplus(s) - s * t


def bbl_loss(tokens: Tensor, bands, gts, w_s, b_s) -> Tensor:
    """Mean BCE over all boundary pairs in the batch; 0 when there are none.

    ``tokens`` is ``(D, H, W)`` with a single band/gt, or ``(B, D, H, W)`` with
    one band and one gt per image.
    """
    if tokens.ndim == 3:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
        bands, gts = [bands], [gts]
    nb, d, h, w = tokens.shape
    n = h * w
    ii, jj, tt = [], [], []
    for k, (band, gt) in enumerate(zip(bands, gts)):
        if band.empty:
            continue
        ii.append(band.pairs[:, 0] + k * n)
        jj.append(band.pairs[:, 1] + k * n)
        tt.append(pair_targets(gt, band))
    if not ii:
        return T.mul(T.tsum(tokens), 0.0)
    flat = T.reshape(T.transpose(tokens, (1, 0, 2, 3)), (d, nb * n))
    s = cosine_scores(flat, np.concatenate(ii), np.concatenate(jj), T.as_tensor(w_s), T.as_tensor(b_s))
    t = np.concatenate(tt)
    return T.tsum(bce_with_logits(s, t)) * (1.0 / len(t))


def total_loss(seg, diag, bbl, weights: LossWeights, progress: float):
    """``seg + lambda_diag * diag + lambda_bbl(t) * bbl``; ``diag``/``bbl`` may be ``None``."""
    out = seg
    if diag is not None:
        out = out + diag * weights.lambda_diag
    if bbl is not None:
        out = out + bbl * weights.lambda_bbl(progress)
    return out
