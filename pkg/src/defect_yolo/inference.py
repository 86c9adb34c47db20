"""Batched prediction, detection on raw images, and dataset evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .boxes import DetBox
from .data import Letterbox, Sample, letterbox_array, preprocess, to_channels
from .errors import ArgumentError
from .metrics import AP_CONF_FLOOR, DEFAULT_CONF, DEFAULT_NMS_IOU, MATCH_IOU, MetricsReport, evaluate_detections, nms
from .model import Detector, PredGrid, decode_all
from .tensor import Tensor, no_grad

MAX_CANDIDATES = 300


@dataclass(frozen=True)
class EvalConfig:
    conf_thresh: float = DEFAULT_CONF
    nms_iou: float = DEFAULT_NMS_IOU
    ap_conf_floor: float = AP_CONF_FLOOR
    match_iou: float = MATCH_IOU
    batch_size: int = 16


@dataclass
class Prepared:
    """A sample letterboxed to the network input, with boxes in input pixels."""

    array: np.ndarray  # (C, S, S)
    boxes: list[DetBox]
    letterbox: Letterbox


def prepare(sample: Sample, channels: int, size: int) -> Prepared:
    arr, lb = letterbox_array(to_channels(sample.image, channels), size)
    return Prepared(arr, [lb.record_to_box(r) for r in sample.records], lb)


def batches(items: Sequence, size: int) -> Iterator[Sequence]:
    for start in range(0, len(items), size):
        yield items[start:start + size]


def predict(model: Detector, arrays: np.ndarray) -> list[PredGrid]:
    with no_grad():
        return model(Tensor(arrays))


def postprocess(grids: list[PredGrid], index: int, conf_floor: float = AP_CONF_FLOOR,
                nms_iou: float = DEFAULT_NMS_IOU) -> list[DetBox]:
    """Decode every scale for one image, keep the top candidates, then NMS."""
    cands = decode_all(grids, index, conf_floor)
    if len(cands) > MAX_CANDIDATES:
        cands = sorted(cands, key=lambda d: -d.score)[:MAX_CANDIDATES]
    return nms(cands, nms_iou, conf_floor)


def detections_for(model: Detector, prepared: Sequence[Prepared], cfg: EvalConfig = EvalConfig()) -> list[list[DetBox]]:
    out = []
    for chunk in batches(prepared, cfg.batch_size):
        grids = predict(model, np.stack([p.array for p in chunk]))
        out.extend(postprocess(grids, k, cfg.ap_conf_floor, cfg.nms_iou) for k in range(len(chunk)))
    return out


def evaluate(model: Detector, samples: Sequence[Sample], class_names: Sequence[str],
             cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Forward, decode and NMS every sample, then score against its records."""
    if not samples:
        raise ArgumentError("cannot evaluate an empty split")
    mc = model.config
    prepared = [s if isinstance(s, Prepared) else prepare(s, mc.input_channels, mc.input_size) for s in samples]
    dets = detections_for(model, prepared, cfg)
    return evaluate_detections(dets, [p.boxes for p in prepared], class_names, cfg.conf_thresh, cfg.match_iou)


def detect(model: Detector, image: np.ndarray, conf_thresh: float = DEFAULT_CONF,
           nms_iou: float = DEFAULT_NMS_IOU) -> list[DetBox]:
    """Detections on a raw raster, mapped back to its pixel coordinates."""
    x, lb = preprocess(image, model.config)
    grids = predict(model, x.data)
    return [lb.box_to_source(d) for d in postprocess(grids, 0, conf_thresh, nms_iou)]
