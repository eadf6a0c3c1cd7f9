"""Command-line driver: ``radseg {train,eval,ablate,gradcheck,synth-data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import harness
from .config import RunConfig
from .data import load_dir, write_dataset
from .metrics import builtin_remap, read_remap


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the run seed (model and data)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--capr-k", type=int, help="number of refined pixels per image")
    p.add_argument("--capr-iters", type=int, help="refinement passes")
    p.add_argument("--capr-off", action="store_true")
    p.add_argument("--bbl-off", action="store_true")
    p.add_argument("--gltr-off", action="store_true")
    p.add_argument("--rad-off", action="store_true")
    p.add_argument("--biou-band", type=int, help="boundary band radius in pixels")
    p.add_argument("--epochs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint and log")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, help="image directory (default: synthetic val split)")
    p.add_argument("--masks", type=Path)
    p.add_argument("--dataset", default="rugd",
                   help="built-in remap (rugd, rellis3d, synthetic) or a remap file path")

    p = sub.add_parser("ablate", help="train and evaluate the incremental variants")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--per-group", type=int, default=6)

    p = sub.add_parser("synth-data", help="write synthetic images, masks and a manifest")
    _add_common(p)
    p.add_argument("--count", type=int, default=8)
    return parser


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else (base or RunConfig())
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.scene.seed = args.seed
    if args.capr_k is not None:
        cfg.capr.k = args.capr_k
    if args.capr_iters is not None:
        cfg.capr.iters = args.capr_iters
    if args.biou_band is not None:
        cfg.metrics.biou_band = args.biou_band
    if args.epochs is not None:
        cfg.epochs = args.epochs
    for flag in ("capr", "bbl", "gltr", "rad"):
        if getattr(args, f"{flag}_off"):
            setattr(cfg.ablation, flag, False)
    cfg.validate()
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float))


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    res = harness.train(cfg)
    ckpt_path = res.checkpoint.save(args.out / "checkpoint.zip")
    (args.out / "config.json").write_text(cfg.to_json())
    (args.out / "train_log.json").write_text(
        json.dumps(harness.deterministic_log(res.log), indent=2, sort_keys=True))
    last = res.log[-1] if res.log else {}
    return {"checkpoint": str(ckpt_path), "epochs": cfg.epochs,
            "final": {k: v for k, v in last.items() if k != "seconds"}}


def cmd_eval(args) -> dict:
    ckpt = harness.Checkpoint.load(args.checkpoint)
    cfg = resolve_config(args, ckpt.config)
    model = ckpt.model()
    if args.capr_iters is not None and model.capr is not None:
        model.capr.cfg.iters = args.capr_iters
    if args.images:
        if args.masks is None:
            raise ValueError("--images requires --masks")
        table = builtin_remap(args.dataset) if not Path(args.dataset).exists() \
            else read_remap(args.dataset)
        samples = load_dir(args.images, args.masks, table)
    else:
        _, samples = harness.make_split(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    from .metrics import Evaluator

    ev = Evaluator(model.num_classes, cfg.metrics.biou_band)
    rep = harness.evaluate(model, samples, cfg.metrics.biou_band, capr_k=args.capr_k,
                           batch_size=cfg.batch_size, evaluator=ev)
    ev.write_csv(args.out / "eval.csv")
    return {"report": str(args.out / "eval.csv"), **rep.row()}


def cmd_ablate(args) -> dict:
    cfg = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = harness.ablate(cfg, args.out / "ablation.csv")
    return {"csv": str(args.out / "ablation.csv"),
            "rows": {name: {"miou": r.miou, "biou": r.biou, "aacc": r.aacc} for name, r in rows}}


def cmd_gradcheck(args) -> dict:
    cfg = resolve_config(args, harness.tiny_config())
    rep = harness.gradcheck(cfg, per_group=args.per_group, tol=args.tol)
    out = rep.to_dict()
    if not rep.passed:
        raise GradcheckFailed(out)
    return out


def cmd_synth(args) -> dict:
    cfg = resolve_config(args)
    manifest = write_dataset(cfg.data.scene, args.count, args.out)
    return {"manifest": str(manifest), "count": args.count}


class GradcheckFailed(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"gradient check failed for {report['failed']}")
        self.report = report


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "synth-data": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except Exception as err:  # noqa: BLE001 - every failure becomes an error document
        doc = {"ok": False, "command": args.command, "error": type(err).__name__,
               "message": str(err)}
        if isinstance(err, harness.TrainingError):
            doc.update(step=err.step, epoch=err.epoch)
        if isinstance(err, GradcheckFailed):
            doc["report"] = err.report
        if args.verbose:
            doc["traceback"] = traceback.format_exc()
        _emit(doc)
        return 1
    _emit({"ok": True, "command": args.command, **result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
