"""Epoch training loop with per-epoch validation, step decay and early stopping."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import augment
from .data import DetectionDataset, Sample
from .errors import ConfigError
from .inference import EvalConfig, Prepared, batches, postprocess, prepare
from .loss import LossWeights, TargetMap, assign_targets, total_loss
from .metrics import evaluate_detections
from .model import Detector
from .optim import AdamState, TrainConfig, ValHistory, adam_step, early_stop, step_decay
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)

AUGMENT_PROB = 0.5
LOG_HEADER = ("epoch", "lr", "train_loss", "val_loss", "val_mAP")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_map: float


@dataclass
class TrainResult:
    model: Detector
    log: list[EpochLog]
    history: ValHistory
    best_map: float
    best_epoch: int
    adam: AdamState
    stopped_early: bool = False


def epoch_log_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss), repr(r.val_map)])
    return buf.getvalue()


def write_epoch_log(path, rows: Sequence[EpochLog]) -> None:
    Path(path).write_text(epoch_log_csv(rows))


def _targets(prepared: Prepared, model: Detector) -> TargetMap:
    return assign_targets(prepared.boxes, model.config)


def _training_item(sample: Sample, model: Detector, config: TrainConfig, epoch: int, index: int) -> Prepared:
    mc = model.config
    if config.augment:
        rng = np.random.default_rng([config.seed, epoch, index])
        ops = [op for op in config.augment if rng.uniform() < AUGMENT_PROB]
        image, records = augment(sample.image, sample.records, ops, rng)
        sample = Sample(image, records, sample.part, sample.source)
    return prepare(sample, mc.input_channels, mc.input_size)


def _validate(model: Detector, val: list[Prepared], targets: list[TargetMap], class_names,
              weights: LossWeights, eval_cfg: EvalConfig, batch_size: int) -> tuple[float, float]:
    loss_sum = 0.0
    dets = []
    with no_grad():
        for start in range(0, len(val), batch_size):
            chunk = val[start:start + batch_size]
            preds = model(Tensor(np.stack([p.array for p in chunk])))
            tmap = TargetMap.stack(targets[start:start + batch_size])
            loss_sum += total_loss(preds, tmap, weights).item() * len(chunk)
            dets.extend(postprocess(preds, k, eval_cfg.ap_conf_floor, eval_cfg.nms_iou) for k in range(len(chunk)))
    report = evaluate_detections(dets, [p.boxes for p in val], class_names, eval_cfg.conf_thresh, eval_cfg.match_iou)
    return loss_sum / len(val), report.map


def train_loop(model: Detector, dataset: DetectionDataset, config: TrainConfig,
               weights: LossWeights = LossWeights(), eval_cfg: EvalConfig = EvalConfig(),
               restore_best: bool = True,
               on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train ``model`` in place.

    Each epoch shuffles with a seed derived from ``(config.seed, epoch)``,
    trains over mini-batches with Adam, then validates. The learning rate
    drops on a validation-loss plateau and training stops when validation
    mAP stalls. With ``restore_best`` the weights of the best-mAP epoch
    (lowest validation loss among ties) are put back before returning.
    """
    if not dataset.train:
        raise ConfigError("training split is empty")
    if not dataset.val:
        raise ConfigError("validation split is empty")
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model expects {model.config.num_classes}")
    mc = model.config
    params = model.parameters()
    adam = AdamState(alpha=config.learning_rate, weight_decay=config.weight_decay)
    val = [prepare(s, mc.input_channels, mc.input_size) for s in dataset.val]
    val_targets = [_targets(p, model) for p in val]
    cached = None
    if not config.augment:
        cached = [prepare(s, mc.input_channels, mc.input_size) for s in dataset.train]
        cached_targets = [_targets(p, model) for p in cached]

    history = ValHistory()
    rows: list[EpochLog] = []
    lr, last_decay = config.learning_rate, -1
    best_map, best_loss, best_epoch, best_weights = -1.0, float("inf"), 0, None
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset.train))
        loss_sum = 0.0
        for chunk in batches(order, config.batch_size):
            if cached is not None:
                items = [cached[k] for k in chunk]
                tmap = TargetMap.stack([cached_targets[k] for k in chunk])
            else:
                items = [_training_item(dataset.train[k], model, config, epoch, int(k)) for k in chunk]
                tmap = TargetMap.stack([_targets(p, model) for p in items])
            x = Tensor(np.stack([p.array for p in items]))
            with Tape() as tape:
                loss = total_loss(model(x), tmap, weights)
            tape.backward(loss)
            grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
            adam_step(params, grads, adam)
            for p in params.values():
                p.grad = None
            loss_sum += loss.item() * len(chunk)
        train_loss = loss_sum / len(order)
        val_loss, val_map = _validate(model, val, val_targets, dataset.class_names, weights, eval_cfg,
                                      config.batch_size)
        row = EpochLog(epoch, lr, train_loss, val_loss, val_map)
        rows.append(row)
        history.add(epoch, val_loss, val_map)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d lr %.2e train %.4f val %.4f mAP %.4f", epoch, lr, train_loss, val_loss, val_map)
        # ties on mAP go to the lower validation loss
        if val_map > best_map or (val_map == best_map and val_loss < best_loss):
            best_map, best_loss, best_epoch = val_map, val_loss, epoch
            if restore_best:
                best_weights = {n: p.data.copy() for n, p in params.items()}
        new_lr = step_decay(lr, history, config, last_decay)
        if new_lr != lr:
            lr, last_decay = new_lr, len(history) - 1
            adam.alpha = lr
        if early_stop(history, config.stop_patience):
            stopped = True
            break
    if restore_best and best_weights is not None:
        for n, p in params.items():
            p.data[...] = best_weights[n]
    return TrainResult(model, rows, history, best_map, best_epoch, adam, stopped)
