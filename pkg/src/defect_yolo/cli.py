"""Command-line entry point: gen-data, train, eval, detect, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import DEFAULT_WARMUP, SCENARIOS, run_bench
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .data import DatasetManifest, load_dataset, load_samples, read_image, to_float, write_image
from .errors import DefectYoloError, StateError, TrainingError
from .inference import EvalConfig, detect, evaluate
from .loss import LossWeights
from .metrics import DEFAULT_CONF, DEFAULT_NMS_IOU
from .model import Detector, ModelConfig
from .optim import TrainConfig, expand_grid, grid_search
from .synth import GenSpec, gen_dataset
from .train import train_loop, write_epoch_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
CONFIG_SECTIONS = ("model", "train", "loss")

log = logging.getLogger("defect_yolo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- config

def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def load_run_config(path) -> tuple[dict, TrainConfig, LossWeights]:
    """Config file: {"model": {...}, "train": {...}, "loss": {...}}, all optional."""
    raw = read_json(path) if path else {}
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}; allowed: {list(CONFIG_SECTIONS)}")
    loss = raw.get("loss", {})
    bad = set(loss) - set(LossWeights.__dataclass_fields__)
    if bad:
        raise ValueError(f"unknown loss config keys: {sorted(bad)}")
    return dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {})), LossWeights(**loss)


def _model_config(model_dict: dict, num_classes: int) -> ModelConfig:
    d = dict(model_dict)
    if d.setdefault("num_classes", num_classes) != num_classes:
        raise ValueError(f"config num_classes {d['num_classes']} but dataset has {num_classes} classes")
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    manifest = gen_dataset(GenSpec.load(args.spec), args.out)
    n_train = len(manifest.split("train"))
    print(f"wrote {len(manifest.entries)} images ({n_train} train, {len(manifest.entries) - n_train} test) "
          f"to {args.out}")
    return EXIT_OK


def _trial(cfg: TrainConfig, epochs: int, model_cfg: ModelConfig, dataset, weights: LossWeights):
    from dataclasses import replace
    model = Detector(model_cfg)
    res = train_loop(model, dataset, replace(cfg, max_epochs=epochs), weights, restore_best=False)
    last = res.log[-1]
    return last.val_map, last.val_loss


def cmd_train(args) -> int:
    model_dict, train_cfg, weights = load_run_config(args.config)
    manifest = DatasetManifest.load(args.data)
    dataset = load_dataset(manifest)
    model_cfg = _model_config(model_dict, dataset.num_classes)
    if args.grid:
        grid_raw = read_json(args.grid)
        budget = int(grid_raw.pop("budget_epochs", 10))
        workers = int(grid_raw.pop("workers", args.workers))
        grid = expand_grid(train_cfg, grid_raw)
        fn = functools.partial(_trial, model_cfg=model_cfg, dataset=dataset, weights=weights)
        result = grid_search(grid, budget, fn, workers)
        print(result.table())
        train_cfg = result.best
    model = Detector(model_cfg)

    def report(row):
        print(f"epoch {row.epoch:4d}  lr {row.lr:.1e}  train {row.train_loss:.4f}  "
              f"val {row.val_loss:.4f}  mAP {row.val_map:.4f}", flush=True)

    res = train_loop(model, dataset, train_cfg, weights, on_epoch=None if args.quiet else report)
    meta = CheckpointMeta(res.best_epoch, res.best_map, train_cfg.seed, tuple(dataset.class_names))
    save_checkpoint(res.model, args.out, meta)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    write_epoch_log(log_path, res.log)
    print(f"best val mAP {res.best_map:.4f} at epoch {res.best_epoch}; checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def _load_model(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    samples = load_samples(manifest, None if args.split == "all" else args.split)
    cfg = EvalConfig(conf_thresh=args.conf, nms_iou=args.iou)
    report = evaluate(model, samples, manifest.class_names, cfg)
    print(report.table())
    for note in report.notes:
        print(f"note: {note}")
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".metrics.json")
    out.write_text(report.to_json() + "\n")
    return EXIT_OK


def _draw(image: np.ndarray, boxes) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    out = img.copy()
    h, w = out.shape[:2]
    for b in boxes:
        x1, y1, x2, y2 = (int(round(v)) for v in b.corners())
        x1, x2 = np.clip([x1, x2], 0, w - 1)
        y1, y2 = np.clip([y1, y2], 0, h - 1)
        color = (255, 0, 0) if out.dtype == np.uint8 else (1.0, 0.0, 0.0)
        out[y1, x1:x2 + 1] = color
        out[y2, x1:x2 + 1] = color
        out[y1:y2 + 1, x1] = color
        out[y1:y2 + 1, x2] = color
    return out


def cmd_detect(args) -> int:
    model, meta = _load_model(args.ckpt)
    image = read_image(args.image)
    boxes = detect(model, to_float(image), args.conf, args.iou)
    names = meta.class_names or tuple(f"class{k}" for k in range(model.config.num_classes))
    for b in boxes:
        x1, y1, x2, y2 = b.corners()
        print(f"{names[b.class_id]} {b.score:.4f} {x1:.1f} {y1:.1f} {x2:.1f} {y2:.1f}")
    if args.out_image:
        write_image(args.out_image, _draw(image, boxes))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = _load_model(args.ckpt)
    names = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    report = run_bench(model, names, args.n, args.warmup, args.seed)
    print(report.table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="defect-yolo", description="Lightweight defect detector: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--spec", required=True, help="generation spec (JSON)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--config", help="run config (JSON with model/train/loss sections)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--grid", help="grid file: {axis: [values], budget_epochs, workers}")
    t.add_argument("--workers", type=int, default=1, help="grid-search worker processes")
    t.add_argument("--log", help="epoch log CSV (default: <out>.log.csv)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset manifest.json")
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.add_argument("--conf", type=float, default=DEFAULT_CONF)
    e.add_argument("--iou", type=float, default=DEFAULT_NMS_IOU)
    e.add_argument("--out", help="metrics JSON path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect defects in one image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True, help="PPM/PGM image")
    d.add_argument("--conf", type=float, default=DEFAULT_CONF)
    d.add_argument("--iou", type=float, default=DEFAULT_NMS_IOU)
    d.add_argument("--out-image", help="write an annotated copy here")
    d.set_defaults(func=cmd_detect)

    b = sub.add_parser("bench", help="latency / FPS benchmark")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--scenario", default="all", choices=[*SCENARIOS, "all"])
    b.add_argument("--n", type=int, default=20, help="timed images per scenario")
    b.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="report JSON path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DefectYoloError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
