"""Training, evaluation, ablation and gradient checking."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Sample, generate
from .metrics import Evaluator, MetricReport
from .model import VARIANTS, Ablation, SegModel, compute_losses

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int, epoch: int):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


def build_model(cfg: RunConfig) -> SegModel:
    return SegModel(cfg.encoder, cfg.decoder, cfg.capr, cfg.ablation, seed=cfg.seed)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with decoupled weight decay (AdamW when ``decoupled``)."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, decoupled: bool = True):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not self.decoupled and self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.decoupled and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = np.asarray(p.data - self.lr * update, dtype=np.float64)
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"])
            self.v[k] = np.array(state[f"v/{k}"])


def learning_rate(o, step: int, total_steps: int) -> float:
    """Rate for ``step`` (0-based): linear warm-up, then constant or cosine decay to 0."""
    t = step / max(total_steps, 1)
    if t < o.warmup_fraction:
        return o.lr * (step + 1) / (o.warmup_fraction * total_steps)
    if o.schedule == "cosine":
        u = (t - o.warmup_fraction) / (1.0 - o.warmup_fraction)
        return o.lr * 0.5 * (1.0 + np.cos(np.pi * u))
    return o.lr


def make_optimizer(model: SegModel, cfg: RunConfig) -> Adam:
    o = cfg.optimizer
    return Adam(dict(model.named_parameters()), o.lr, o.weight_decay, (o.beta1, o.beta2), o.eps,
                decoupled=o.kind == "adamw")


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    config: RunConfig
    epoch: int

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def model(self) -> SegModel:
        m = build_model(self.config)
        m.load_state_dict(self.params)
        return m

    def save(self, path) -> Path:
        """Write a zip of ``.npy`` members with fixed timestamps (byte-reproducible)."""
        path = Path(path)
        meta = {"config": self.config.to_dict(), "config_hash": self.config_hash,
                "epoch": self.epoch}
        entries = {f"param/{k}": v for k, v in self.params.items()}
        entries.update({f"optim/{k}": v for k, v in self.optimizer.items()})
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(meta, sort_keys=True))
            for key in sorted(entries):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(entries[key], order="C"),
                                        allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        params, optim = {}, {}
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    continue
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                kind, key = name[:-4].split("/", 1)
                (params if kind == "param" else optim)[key] = arr
        cfg = RunConfig.from_dict(meta["config"])
        if cfg.digest() != meta["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        return cls(params, optim, cfg, int(meta["epoch"]))


# ---------------------------------------------------------------- data helpers


def make_split(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    spec = cfg.data.scene
    train = [generate(spec, i) for i in range(cfg.data.n_train)]
    val = [generate(spec, cfg.data.n_train + i) for i in range(cfg.data.n_val)]
    return train, val


def _stack(samples: Sequence[Sample], attr: str) -> np.ndarray:
    if attr == "image":
        return np.stack([s.image.data for s in samples])
    return np.stack([getattr(s, attr).labels for s in samples])


# ---------------------------------------------------------------- evaluation


def evaluate(model: SegModel | Checkpoint, samples: Iterable[Sample], biou_band: int = 3,
             capr_k: int | None = None, batch_size: int = 4, target: str = "gt_clean",
             evaluator: Evaluator | None = None) -> MetricReport:
    """Single-scale forward, argmax at sample resolution, aggregate metrics."""
    if isinstance(model, Checkpoint):
        model = model.model()
    ev = evaluator or Evaluator(model.num_classes, biou_band)
    batch: list[Sample] = []

    def flush():
        preds = model.predict(_stack(batch, "image"), capr_k)
        for s, p in zip(batch, preds):
            gt = getattr(s, target)
            if gt.class_count != model.num_classes:
                raise ValueError(f"data has {gt.class_count} classes, model predicts "
                                 f"{model.num_classes}")
            name = str(s.meta.get("index", s.meta.get("image", "")))
            ev.add(p, gt, name)
        batch.clear()

    for s in samples:
        batch.append(s)
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    return ev.report()


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    model: SegModel | None = None


def train(cfg: RunConfig, train_set: Sequence[Sample] | None = None,
          val_set: Sequence[Sample] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the full objective on ``gt_noisy``; log losses and validation metrics per epoch."""
    cfg.validate()
    if train_set is None:
        train_set, gen_val = make_split(cfg)
        val_set = gen_val if val_set is None else val_set
    val_set = val_set or []
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    order_rng = np.random.default_rng([cfg.seed, 7])
    history: list[dict] = []
    step = 0
    total_steps = cfg.epochs * -(-len(train_set) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        progress = epoch / cfg.epochs
        order = order_rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            try:
                with T.Tape() as tape:
                    out = model(T.Tensor(_stack(batch, "image")))
                    parts = compute_losses(model, out, _stack(batch, "gt_noisy"), cfg.losses,
                                           progress, cfg.losses.r_band, cfg.losses.r_ring)
                if not np.isfinite(parts.total.item()):
                    raise T.NonFiniteError("loss is not finite")
                tape.backward(parts.total)
            except T.NonFiniteError as err:
                raise TrainingError(f"non-finite value at step {step}: {err}", step, epoch) from err
            opt.lr = learning_rate(cfg.optimizer, step, total_steps)
            opt.step()
            step += 1
            nb += 1
            for k, v in parts.scalars().items():
                sums[k] = sums.get(k, 0.0) + v
        entry = {"epoch": epoch, "steps": step, "progress": progress}
        entry.update({k: v / max(nb, 1) for k, v in sums.items()})
        if val_set and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            try:
                rep = evaluate(model, val_set, cfg.metrics.biou_band, batch_size=cfg.batch_size)
            except T.NonFiniteError as err:
                raise TrainingError(f"non-finite value in validation after step {step}: {err}",
                                    step, epoch) from err
            entry.update(val_miou=rep.miou, val_biou=rep.biou, val_aacc=rep.aacc)
        entry["seconds"] = time.perf_counter() - t0
        history.append(entry)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in entry.items()
                                         if isinstance(v, float)})
        if on_epoch:
            on_epoch(entry)
    ckpt = Checkpoint(model.state_dict(), opt.state_dict(), copy.deepcopy(cfg), cfg.epochs)
    return TrainResult(ckpt, history, model)


def deterministic_log(history: list[dict]) -> list[dict]:
    """Log entries without wall-clock fields."""
    return [{k: v for k, v in e.items() if k != "seconds"} for e in history]


# ---------------------------------------------------------------- ablation


ABLATION_COLUMNS = ["variant", "miou", "biou", "aacc"]


def ablate(cfg: RunConfig, out_csv=None, train_set=None, eval_set=None,
           variants=VARIANTS) -> list[tuple[str, MetricReport]]:
    """Train and evaluate every incremental variant on identical data and seeds."""
    if train_set is None:
        train_set, gen_val = make_split(cfg)
        eval_set = gen_val if eval_set is None else eval_set
    rows = []
    for name, flags in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg.ablation = copy.deepcopy(flags)
        res = train(vcfg, train_set, [])
        rep = evaluate(res.model, eval_set, cfg.metrics.biou_band, batch_size=cfg.batch_size)
        rows.append((name, rep))
        log.info("ablation %s miou=%.4f biou=%.4f aacc=%.4f", name, rep.miou, rep.biou, rep.aacc)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(ABLATION_COLUMNS)
            for name, rep in rows:
                wr.writerow([name, f"{rep.miou:.6f}", f"{rep.biou:.6f}", f"{rep.aacc:.6f}"])
    return rows


# ---------------------------------------------------------------- gradient check


def tiny_config(in_channels: int = 4, seed: int = 0) -> RunConfig:
    """Small model on a 64x96 input (4x6 lattice) for finite-difference checks."""
    from .capr import CaprConfig
    from .data import SceneSpec
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig

    cfg = RunConfig(
        encoder=EncoderConfig(in_channels=in_channels, stage_channels=[4, 6, 8, 10],
                              stage_depths=[1, 1, 1, 1], heads_per_stage=[1, 1, 2, 2], mlp_ratio=2),
        decoder=DecoderConfig(width=8, heads=2),
        capr=CaprConfig(k=24, hidden=8),
        seed=seed,
    )
    cfg.data.scene = SceneSpec(seed=seed, size=(64, 96), thin_structure_count=1, boundary_noise_px=0)
    return cfg


@dataclass
class GradcheckReport:
    groups: dict[str, float]
    tolerance: float
    checked: int
    seconds: float

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.groups.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "checked": self.checked,
                "seconds": self.seconds, "failed": self.failed, "max_rel_err": self.groups}


def relative_error(a, n, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(cfg: RunConfig | None = None, per_group: int = 6, eps: float = 1e-5,
              tol: float = 1e-4, progress: float = 1.0, model: SegModel | None = None,
              image: np.ndarray | None = None, labels: np.ndarray | None = None) -> GradcheckReport:
    """Compare tape gradients of the total loss with central differences, per parameter.

    All-zero parameters (zero-initialised output layers, gate vectors) are
    first filled with small random values so every path carries signal. The
    refinement selection is computed once and held fixed, since the hard
    top-K is not differentiable.
    """
    t_start = time.perf_counter()
    cfg = cfg or tiny_config()
    rng = np.random.default_rng([cfg.seed, 11])
    model = model or build_model(cfg)
    params = dict(model.named_parameters())
    for p in params.values():
        if not np.any(p.data):
            p.data = np.asarray(rng.standard_normal(p.shape) * 0.1, dtype=np.float64)
    h, w = cfg.data.scene.size
    if image is None:
        image = rng.uniform(-1.0, 1.0, (cfg.encoder.in_channels, h, w))
    if labels is None:
        labels = generate(cfg.data.scene, 0).gt_noisy.labels
    x = T.Tensor(image)

    with T.no_tape():
        base_out = model(x)
    frozen = base_out.selections

    def loss_value() -> float:
        with T.no_tape():
            out = _forward_frozen(model, x, frozen)
            return compute_losses(model, out, labels, cfg.losses, progress,
                                  cfg.losses.r_band, cfg.losses.r_ring).total.item()

    with T.Tape() as tape:
        out = _forward_frozen(model, x, frozen)
        parts = compute_losses(model, out, labels, cfg.losses, progress,
                               cfg.losses.r_band, cfg.losses.r_ring)
    tape.backward(parts.total)

    groups: dict[str, float] = {}
    checked = 0
    for name, p in params.items():
        if p.grad is None:
            # a parameter the loss never reached is a wiring error, not a pass
            groups[name] = float("inf")
            continue
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= per_group else \
            rng.choice(flat.size, per_group, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            down = loss_value()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], num)))
            checked += 1
        groups[name] = worst
    return GradcheckReport(groups, tol, checked, time.perf_counter() - t_start)


def _forward_frozen(model: SegModel, x: T.Tensor, selections):
    """Model forward with the refinement selections fixed in advance."""
    if model.capr is None:
        return model(x)
    return model(x, fixed_selections=selections)
