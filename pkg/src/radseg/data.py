"""Synthetic off-road scenes and a loader for image/mask directories.

Randomness comes from PCG64 seeded through numpy's ``SeedSequence`` with
entropy ``[seed, index, stream]``; uniform doubles are the top 53 bits of each
raw 64-bit draw times 2**-53. Only raw draws are used, so a sample is
bit-identical wherever the same numpy bit generator is available.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import metrics
from .metrics import NUM_GROUPS, OBSTACLES, LabelMask, RemapTable
from .tensor import Tensor

# Per-group base colours (RGB in [0, 1]).
PALETTE = np.array([
    [0.62, 0.62, 0.60],  # Smooth: asphalt / concrete grey
    [0.42, 0.56, 0.24],  # Rough: grass / dirt
    [0.58, 0.42, 0.30],  # Bumpy: rock / mud
    [0.18, 0.36, 0.52],  # Forbidden: water / bush
    [0.14, 0.11, 0.09],  # Obstacles: trunks, poles
    [0.74, 0.82, 0.95],  # Background: sky
])

_STREAM_LAYOUT, _STREAM_TEXTURE, _STREAM_THIN, _STREAM_NOISE = range(4)


class _Stream:
    def __init__(self, seed: int, index: int, stream: int):
        ss = np.random.SeedSequence([int(seed), int(index), int(stream)])
        self._bg = np.random.PCG64(ss)

    def uniform(self, n: int | tuple = ()) -> np.ndarray | float:
        shape = (n,) if isinstance(n, int) else tuple(n)
        count = int(np.prod(shape)) if shape else 1
        raw = self._bg.random_raw(count).astype(np.uint64)
        vals = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return vals.reshape(shape) if shape else float(vals[0])

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in ``[low, high]``."""
        return low + min(int(self.uniform() * (high - low + 1)), high - low)


@dataclass
class SceneSpec:
    seed: int = 0
    size: tuple[int, int] = (64, 96)
    class_frequencies: list[float] = field(default_factory=lambda: [1.0 / NUM_GROUPS] * NUM_GROUPS)
    thin_structure_count: int = 2
    boundary_noise_px: int = 2
    texture_scales: list[float] = field(default_factory=lambda: [12.0, 4.0, 6.0, 16.0, 3.0, 24.0])
    texture_amplitude: float = 0.12
    cells: int = 10

    def validate(self) -> None:
        h, w = self.size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ValueError(f"scene size {self.size} must be positive multiples of 32")
        f = np.asarray(self.class_frequencies, dtype=np.float64)
        if f.shape != (NUM_GROUPS,) or (f < 0).any() or abs(f.sum() - 1.0) > 1e-9:
            raise ValueError("class_frequencies must be 6 non-negative values summing to 1")
        if len(self.texture_scales) != NUM_GROUPS or min(self.texture_scales) <= 0:
            raise ValueError("texture_scales needs 6 positive entries")
        if self.thin_structure_count < 0 or self.boundary_noise_px < 0 or self.cells < 1:
            raise ValueError("counts must be non-negative (cells >= 1)")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Sample:
    image: Tensor
    gt_clean: LabelMask
    gt_noisy: LabelMask
    meta: dict


def _voronoi(spec: SceneSpec, rs: _Stream) -> np.ndarray:
    h, w = spec.size
    n = spec.cells
    sites = rs.uniform((n, 2)) * np.array([h, w])
    # Stratified label draw keeps per-scene class counts close to n * freq.
    cum = np.cumsum(spec.class_frequencies)
    cum[-1] = 1.0 + 1e-12
    u0 = rs.uniform()
    labels = np.searchsorted(cum, (u0 + np.arange(n)) / n, side="right")
    labels = np.minimum(labels, NUM_GROUPS - 1)
    for i in range(n - 1, 0, -1):
        j = rs.integer(0, i)
        labels[i], labels[j] = labels[j], labels[i]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return labels[np.argmin(d, axis=0)].astype(np.int64)


def _value_noise(rs: _Stream, h: int, w: int, scale: float) -> np.ndarray:
    gh = int(np.ceil(h / scale)) + 2
    gw = int(np.ceil(w / scale)) + 2
    grid = rs.uniform((gh, gw)) * 2.0 - 1.0
    ys = (np.arange(h) + 0.5) / scale
    xs = (np.arange(w) + 0.5) / scale
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _thin_structures(spec: SceneSpec, rs: _Stream) -> np.ndarray:
    h, w = spec.size
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(spec.thin_structure_count):
        width = rs.integer(1, 2)
        y, x = rs.uniform() * h, rs.uniform() * w
        for _ in range(rs.integer(2, 4)):
            ang = rs.uniform() * 2 * np.pi
            length = 15 + rs.uniform() * 35
            ny, nx = y + length * np.sin(ang), x + length * np.cos(ang)
            steps = int(np.ceil(length * 2)) + 1
            t = np.linspace(0.0, 1.0, steps)
            py = np.floor(y + (ny - y) * t).astype(int)
            px = np.floor(x + (nx - x) * t).astype(int)
            pts = [(py, px)]
            if width == 2:
                pts.append((py, px + 1) if abs(np.sin(ang)) > abs(np.cos(ang)) else (py + 1, px))
            for qy, qx in pts:
                ok = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
                mask[qy[ok], qx[ok]] = True
            y, x = ny, nx
    return mask


def _boundary_noise(labels: np.ndarray, radius: int, rs: _Stream) -> np.ndarray:
    """Random per-boundary-pixel dilation/erosion of up to ``radius`` pixels."""
    if radius == 0:
        return labels.copy()
    h, w = labels.shape
    out = labels.copy()
    edge = metrics.boundary_pixels(labels)
    ys, xs = np.nonzero(edge)
    draws = rs.uniform((len(ys), 3))
    for (y, x), (u_r, u_mode, u_nb) in zip(zip(ys, xs), draws):
        r = min(int(u_r * (radius + 1)), radius)
        if r == 0:
            continue
        lab = labels[y, x]
        if u_mode >= 0.5:
            nbs = [labels[yy, xx] for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1))
                   if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] != lab]
            lab = nbs[min(int(u_nb * len(nbs)), len(nbs) - 1)]
        out[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = lab
    return out


def generate(spec: SceneSpec, index: int) -> Sample:
    """Sample ``index`` of the scene family ``spec``; a pure function of both."""
    spec.validate()
    h, w = spec.size
    labels = _voronoi(spec, _Stream(spec.seed, index, _STREAM_LAYOUT))
    thin = _thin_structures(spec, _Stream(spec.seed, index, _STREAM_THIN))
    labels[thin] = OBSTACLES

    rs = _Stream(spec.seed, index, _STREAM_TEXTURE)
    gain = 0.85 + 0.3 * rs.uniform()
    image = np.zeros((3, h, w))
    for c in range(NUM_GROUPS):
        sel = labels == c
        tex = spec.texture_amplitude * _value_noise(rs, h, w, spec.texture_scales[c])
        grain = 0.04 * (rs.uniform((h, w)) * 2.0 - 1.0)
        if not sel.any():
            continue
        for ch in range(3):
            image[ch][sel] = (PALETTE[c, ch] + tex + grain)[sel]
    image = np.clip(image * gain, 0.0, 1.0)

    noisy = _boundary_noise(labels, spec.boundary_noise_px, _Stream(spec.seed, index, _STREAM_NOISE))
    meta = {"seed": spec.seed, "index": int(index), "spec_hash": spec.digest()}
    return Sample(Tensor(image), LabelMask(labels), LabelMask(noisy), meta)


# ---------------------------------------------------------------- files

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def write_sample(sample: Sample, images_dir, masks_dir, stem: str) -> tuple[Path, Path]:
    from PIL import Image

    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.transpose(sample.image.data, (1, 2, 0)) * 255.0).astype(np.uint8)
    ip = images_dir / f"{stem}.png"
    mp = masks_dir / f"{stem}.png"
    Image.fromarray(rgb, mode="RGB").save(ip)
    Image.fromarray(sample.gt_clean.labels.astype(np.uint8), mode="L").save(mp)
    return ip, mp


def write_dataset(spec: SceneSpec, count: int, out_dir) -> Path:
    """Write ``count`` samples plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for i in range(count):
        s = generate(spec, i)
        ip, mp = write_sample(s, out / "images", out / "masks", f"{i:05d}")
        entries.append({"image": str(ip.relative_to(out)), "mask": str(mp.relative_to(out)),
                        "seed": spec.seed, "index": i, "spec_hash": s.meta["spec_hash"]})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"spec": asdict(spec), "samples": entries}, indent=2,
                                   default=list))
    return manifest


def load_dir(images_path, masks_path, remap_table: RemapTable) -> Iterator[Sample]:
    """Yield samples for every image with a same-stem mask, in sorted order.

    ``gt_clean`` is the evaluation mask (void -> Background); ``gt_noisy`` is
    the training target, identical except void pixels become ignore.
    """
    from PIL import Image, UnidentifiedImageError

    images_path, masks_path = Path(images_path), Path(masks_path)
    masks = {p.stem: p for p in masks_path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES} \
        if masks_path.exists() else {}
    images = sorted(p for p in images_path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) \
        if images_path.exists() else []
    for ip in images:
        mp = masks.get(ip.stem)
        if mp is None:
            raise FileNotFoundError(f"no mask for image {ip.name} in {masks_path}")
        try:
            rgb = np.asarray(Image.open(ip).convert("RGB"), dtype=np.float64) / 255.0
            raw = np.asarray(Image.open(mp), dtype=np.int64)
        except (UnidentifiedImageError, OSError) as err:
            raise ValueError(f"cannot decode {ip.name} / {mp.name}: {err}") from err
        if raw.ndim != 2:
            raise ValueError(f"mask {mp.name} must be single-channel, got shape {raw.shape}")
        if raw.shape != rgb.shape[:2]:
            raise ValueError(f"image {ip.name} {rgb.shape[:2]} and mask {raw.shape} differ in size")
        fine = LabelMask(raw, ignore_value=metrics.IGNORE, class_count=256)
        yield Sample(Tensor(np.transpose(rgb, (2, 0, 1)).copy()),
                     metrics.remap(fine, remap_table),
                     metrics.remap(fine, remap_table, for_loss=True),
                     {"image": ip.name, "mask": mp.name})
