"""Evaluation: confusion-matrix mIoU/aAcc, boundary-band IoU and 6-group label remapping."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

IGNORE = 255
GROUPS = ("Smooth", "Rough", "Bumpy", "Forbidden", "Obstacles", "Background")
NUM_GROUPS = len(GROUPS)
SMOOTH, ROUGH, BUMPY, FORBIDDEN, OBSTACLES, BACKGROUND = range(NUM_GROUPS)


@dataclass
class LabelMask:
    labels: np.ndarray
    ignore_value: int = IGNORE
    class_count: int = NUM_GROUPS
    remapped_from: str | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        bad = (self.labels != self.ignore_value) & ((self.labels < 0) | (self.labels >= self.class_count))
        if bad.any():
            raise ValueError(f"labels {sorted(set(self.labels[bad].tolist()))[:10]} outside "
                             f"[0, {self.class_count}) and not ignore={self.ignore_value}")

    @property
    def shape(self):
        return self.labels.shape


def _arr(mask) -> tuple[np.ndarray, int]:
    if isinstance(mask, LabelMask):
        return mask.labels, mask.ignore_value
    return np.asarray(mask, dtype=np.int64), IGNORE


# ---------------------------------------------------------------- remapping


class UnknownLabelError(KeyError):
    pass


@dataclass
class RemapTable:
    """Fine label -> 6-group mapping, by name and by integer id.

    ``loss_ignore`` lists fine ids that map to Background for evaluation but
    become the ignore value in training targets (void).
    """

    dataset: str
    by_id: dict[int, int]
    names: dict[int, str] = field(default_factory=dict)
    by_name: dict[str, int] = field(default_factory=dict)
    loss_ignore: frozenset[int] = frozenset()

    def group_of(self, name: str) -> str:
        key = _norm_name(name)
        if key not in self.by_name:
            raise UnknownLabelError(f"{self.dataset}: unknown fine label {name!r}")
        return GROUPS[self.by_name[key]]

    def lut(self, for_loss: bool = False) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int64)
        for fid, gid in self.by_id.items():
            table[fid] = IGNORE if (for_loss and fid in self.loss_ignore) else gid
        table[IGNORE] = IGNORE
        return table

    def write(self, path) -> None:
        lines = [f"# {self.dataset}: fine_id group_id  # name"]
        for fid in sorted(self.by_id):
            tag = " void" if fid in self.loss_ignore else ""
            lines.append(f"{fid} {self.by_id[fid]}  # {self.names.get(fid, '')}{tag}")
        Path(path).write_text("\n".join(lines) + "\n")


def _norm_name(name: str) -> str:
    return re.sub(r"[\s_\-/]+", " ", name.strip().lower())


def parse_remap(text: str, dataset: str = "custom") -> RemapTable:
    """Parse ``fine_id group_id  # name [void]`` lines; ``#``-only lines are comments."""
    by_id, names, by_name, void = {}, {}, {}, set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        body, _, comment = raw.partition("#")
        if not body.strip():
            continue
        parts = body.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'fine_id group_id', got {raw!r}")
        fid, gid = int(parts[0]), int(parts[1])
        if not 0 <= gid < NUM_GROUPS:
            raise ValueError(f"line {lineno}: group id {gid} out of range")
        if fid in by_id:
            raise ValueError(f"line {lineno}: duplicate fine id {fid}")
        by_id[fid] = gid
        words = comment.split()
        if words and words[-1] == "void":
            void.add(fid)
            words = words[:-1]
        name = " ".join(words)
        if name:
            names[fid] = name
            by_name[_norm_name(name)] = gid
    return RemapTable(dataset, by_id, names, by_name, frozenset(void))


def read_remap(path) -> RemapTable:
    p = Path(path)
    return parse_remap(p.read_text(), p.stem)


# Plural / descriptive row names from the grouping tables that are not fine
# label names in the datasets' own ontologies.
_ALIASES = {
    "rugd": {"rock bed": BUMPY, "bushes": FORBIDDEN, "tall vegetation": FORBIDDEN,
             "trees": OBSTACLES, "poles": OBSTACLES, "logs": OBSTACLES, "signs": BACKGROUND},
    "rellis3d": {},
}


def builtin_remap(dataset: str) -> RemapTable:
    """Shipped tables: ``"rugd"`` or ``"rellis3d"``."""
    key = dataset.lower().replace("-", "")
    text = resources.files("radseg").joinpath("remaps", f"{key}.txt").read_text()
    table = parse_remap(text, key)
    for name, gid in _ALIASES.get(key, {}).items():
        table.by_name.setdefault(_norm_name(name), gid)
    return table


def remap(fine: LabelMask, table: RemapTable, for_loss: bool = False) -> LabelMask:
    """Map fine ids to the 6 groups. Already-remapped masks pass through unchanged."""
    if fine.remapped_from is not None:
        return fine
    labels = fine.labels
    lut = table.lut(for_loss)
    src = np.where(labels == fine.ignore_value, IGNORE, labels)
    if src.size and (src.max() > 255 or src.min() < 0):
        raise UnknownLabelError(f"{table.dataset}: label ids outside 0..255")
    out = lut[src]
    if (out < 0).any():
        unknown = sorted(set(src[out < 0].tolist()))
        raise UnknownLabelError(f"{table.dataset}: unknown fine label id(s) {unknown}")
    return LabelMask(out, IGNORE, NUM_GROUPS, remapped_from=table.dataset)


# ---------------------------------------------------------------- confusion / IoU


def confusion(pred, gt, num_classes: int = NUM_GROUPS, where: np.ndarray | None = None) -> np.ndarray:
    """``M[a, b]`` = number of pixels with gt ``a`` and prediction ``b``; ignore excluded."""
    p, _ = _arr(pred)
    g, ignore = _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != gt shape {g.shape}")
    keep = g != ignore
    if where is not None:
        keep &= where
    idx = num_classes * g[keep] + p[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class Scores:
    per_class_iou: np.ndarray
    miou: float
    aacc: float
    empty: bool = False


def iou_scores(m: np.ndarray) -> Scores:
    """IoU per class (NaN where a class is absent from both gt and pred), mIoU, aAcc."""
    m = np.asarray(m, dtype=np.int64)
    total = int(m.sum())
    if total == 0:
        return Scores(np.full(m.shape[0], np.nan), 0.0, 0.0, empty=True)
    tp = np.diag(m).astype(np.float64)
    union = m.sum(axis=0) + m.sum(axis=1) - np.diag(m)
    present = union > 0
    iou = np.full(m.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return Scores(iou, float(iou[present].mean()), float(tp.sum() / total))


def miou_aacc(m: np.ndarray) -> tuple[float, float]:
    s = iou_scores(m)
    return s.miou, s.aacc


def boundary_pixels(gt) -> np.ndarray:
    """Pixels with a 4-neighbour carrying a different label (both non-ignore)."""
    g, ignore = _arr(gt)
    out = np.zeros(g.shape, dtype=bool)
    valid = g != ignore
    dv = (g[1:, :] != g[:-1, :]) & valid[1:, :] & valid[:-1, :]
    dh = (g[:, 1:] != g[:, :-1]) & valid[:, 1:] & valid[:, :-1]
    out[1:, :] |= dv
    out[:-1, :] |= dv
    out[:, 1:] |= dh
    out[:, :-1] |= dh
    return out


def boundary_band(gt, radius: int = 3) -> np.ndarray:
    """Chebyshev dilation of the boundary pixels by ``radius``."""
    if radius < 1:
        raise ValueError("band radius must be >= 1")
    edge = boundary_pixels(gt)
    if not edge.any():
        return edge
    return ndimage.binary_dilation(edge, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))


def biou_from_band(pred, gt, band: np.ndarray, num_classes: int = NUM_GROUPS) -> tuple[float, bool]:
    """mIoU restricted to ``band``; ``(1.0, True)`` when the band is empty."""
    if not np.any(band):
        return 1.0, True
    s = iou_scores(confusion(pred, gt, num_classes, where=band))
    if s.empty:
        return 1.0, True
    return s.miou, False


def biou(pred, gt, radius: int = 3, num_classes: int = NUM_GROUPS) -> float:
    return biou_from_band(pred, gt, boundary_band(gt, radius), num_classes)[0]


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    per_class_iou: list[float]
    miou: float
    aacc: float
    biou: float
    pixels: int
    band_pixels: int
    band_radius: int
    empty_band: bool = False
    name: str = "aggregate"

    def row(self) -> dict:
        out = {"image": self.name}
        for gname, v in zip(GROUPS, self.per_class_iou):
            out[f"iou_{gname.lower()}"] = v
        out.update(miou=self.miou, aacc=self.aacc, biou=self.biou)
        return out


CSV_COLUMNS = ["image"] + [f"iou_{g.lower()}" for g in GROUPS] + ["miou", "aacc", "biou"]


class Evaluator:
    """Accumulates full and band-restricted confusion matrices over images."""

    def __init__(self, num_classes: int = NUM_GROUPS, band_radius: int = 3):
        self.num_classes = num_classes
        self.band_radius = band_radius
        self.full = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.band = np.zeros_like(self.full)
        self.band_pixels = 0
        self.rows: list[MetricReport] = []

    def add(self, pred, gt, name: str = "") -> MetricReport:
        band = boundary_band(gt, self.band_radius)
        m = confusion(pred, gt, self.num_classes)
        mb = confusion(pred, gt, self.num_classes, where=band)
        self.full += m
        self.band += mb
        self.band_pixels += int(band.sum())
        rep = _report(m, mb, int(band.sum()), self.band_radius, name)
        self.rows.append(rep)
        return rep

    def report(self) -> MetricReport:
        return _report(self.full, self.band, self.band_pixels, self.band_radius, "aggregate")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            wr.writeheader()
            for rep in self.rows + [self.report()]:
                wr.writerow(rep.row())


def _report(m, mb, band_pixels, radius, name) -> MetricReport:
    s = iou_scores(m)
    sb = iou_scores(mb)
    empty_band = sb.empty
    return MetricReport([float(v) for v in s.per_class_iou], s.miou, s.aacc,
                        1.0 if empty_band else sb.miou, int(m.sum()), band_pixels, radius,
                        empty_band, name)
