"""Post-processing and detection metrics at a single IoU threshold."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import DetBox, iou
from .errors import ArgumentError

DEFAULT_NMS_IOU = 0.45
DEFAULT_CONF = 0.25
# detections below this never enter the precision/recall curve
AP_CONF_FLOOR = 0.001
MATCH_IOU = 0.5


def nms(dets: Sequence[DetBox], iou_thresh: float = DEFAULT_NMS_IOU,
        conf_thresh: float = DEFAULT_CONF) -> list[DetBox]:
    """Class-aware greedy non-maximum suppression.

    Candidates are visited by descending score (ties: lower class id, then
    input order); a candidate survives unless a kept box of its class
    overlaps it by more than ``iou_thresh``.
    """
    order = sorted((k for k, d in enumerate(dets) if d.score >= conf_thresh),
                   key=lambda k: (-dets[k].score, dets[k].class_id, k))
    if not order:
        return []
    arr = np.array([dets[k].corners() for k in order], dtype=np.float64)
    cls = np.array([dets[k].class_id for k in order])
    area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(dets[order[pos]])
        rest = np.flatnonzero(alive[pos + 1:] & (cls[pos + 1:] == cls[pos])) + pos + 1
        if rest.size == 0:
            continue
        iw = np.minimum(arr[pos, 2], arr[rest, 2]) - np.maximum(arr[pos, 0], arr[rest, 0])
        ih = np.minimum(arr[pos, 3], arr[rest, 3]) - np.maximum(arr[pos, 1], arr[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = area[pos] + area[rest] - inter
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        alive[rest[overlap > iou_thresh]] = False
    return kept


@dataclass
class MatchResult:
    det_tp: list[bool]
    gt_matched: list[bool]
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)


def match_detections(dets: Sequence[DetBox], gts: Sequence[DetBox], iou_thresh: float = MATCH_IOU) -> MatchResult:
    """Greedy matching; ``dets`` must already be sorted by descending score."""
    matched = [False] * len(gts)
    flags = []
    tp: dict[int, int] = {}
    fp: dict[int, int] = {}
    for d in dets:
        best, best_iou = -1, iou_thresh
        for g_idx, g in enumerate(gts):
            if matched[g_idx] or g.class_id != d.class_id:
                continue
            overlap = iou(d, g)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g_idx, overlap
        if best >= 0:
            matched[best] = True
            flags.append(True)
            tp[d.class_id] = tp.get(d.class_id, 0) + 1
        else:
            flags.append(False)
            fp[d.class_id] = fp.get(d.class_id, 0) + 1
    fn: dict[int, int] = {}
    for g, hit in zip(gts, matched):
        if not hit:
            fn[g.class_id] = fn.get(g.class_id, 0) + 1
    return MatchResult(flags, matched, tp, fp, fn)


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def _sort_by_score(dets: Sequence[DetBox]) -> list[DetBox]:
    return sorted(dets, key=lambda d: -d.score)


def average_precision(dets: Sequence[Sequence[DetBox]], gts: Sequence[Sequence[DetBox]],
                      iou_thresh: float = MATCH_IOU) -> float | None:
    """All-points interpolated AP for one class over a dataset.

    ``dets[k]`` and ``gts[k]`` belong to image ``k``. Returns ``None`` when
    the class has no ground truth.
    """
    if len(dets) != len(gts):
        raise ArgumentError("dets and gts must cover the same images")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    pool = [(d.score, img, k) for img, ds in enumerate(dets) for k, d in enumerate(ds)]
    pool.sort(key=lambda e: -e[0])
    matched = [[False] * len(g) for g in gts]
    hits = np.zeros(len(pool))
    for rank, (_, img, k) in enumerate(pool):
        d = dets[img][k]
        best, best_iou = -1, iou_thresh
        for g_idx, g in enumerate(gts[img]):
            if matched[img][g_idx]:
                continue
            overlap = iou(d, g)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g_idx, overlap
        if best >= 0:
            matched[img][best] = True
            hits[rank] = 1.0
    return ap_from_hits(hits, n_gt)


def ap_from_hits(hits: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope for a ranked TP/FP sequence."""
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    ap: float | None
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class MetricsReport:
    classes: list[ClassMetrics]
    overall: ClassMetrics
    map: float
    notes: list[str] = field(default_factory=list)

    def rows(self) -> list[ClassMetrics]:
        return [*self.classes, self.overall]

    def to_dict(self, digits: int = 4) -> dict:
        def num(x):
            return None if x is None else round(float(x), digits)

        return {
            "classes": [
                {"name": c.name, "precision": num(c.precision), "recall": num(c.recall),
                 "f1": num(c.f1), "ap": num(c.ap), "tp": c.tp, "fp": c.fp, "fn": c.fn}
                for c in self.classes
            ],
            "overall": {"precision": num(self.overall.precision), "recall": num(self.overall.recall),
                        "f1": num(self.overall.f1), "mAP": num(self.map),
                        "tp": self.overall.tp, "fp": self.overall.fp, "fn": self.overall.fn},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        name_w = max(len("Defect Type"), *(len(r.name) for r in self.rows()))
        head = f"{'Defect Type':<{name_w}}  {'Precision':>9}  {'Recall':>9}  {'F1 Score':>9}  {'mAP':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows():
            ap = self.map if r is self.overall else r.ap
            # round first so the table and to_dict() agree digit for digit
            p, rc, f1 = (round(v, 4) for v in (r.precision, r.recall, r.f1))
            ap_s = "n/a" if ap is None else f"{round(ap, 4):.4f}"
            lines.append(f"{r.name:<{name_w}}  {p:>9.4f}  {rc:>9.4f}  {f1:>9.4f}  {ap_s:>9}")
        return "\n".join(lines)


def evaluate_detections(dets: Sequence[Sequence[DetBox]], gts: Sequence[Sequence[DetBox]],
                        class_names: Sequence[str], conf_thresh: float = DEFAULT_CONF,
                        iou_thresh: float = MATCH_IOU) -> MetricsReport:
    """Aggregate per-image detections into a report.

    P/R/F1 count detections with ``score >= conf_thresh``; AP uses every
    detection supplied. The overall row micro-averages counts, mAP is the
    mean AP over classes that have ground truth.
    """
    if len(dets) != len(gts):
        raise ArgumentError("dets and gts must cover the same images")
    if not gts:
        raise ArgumentError("cannot evaluate an empty split")
    nc = len(class_names)
    tp, fp, fn = [0] * nc, [0] * nc, [0] * nc
    for ds, gs in zip(dets, gts):
        confident = _sort_by_score([d for d in ds if d.score >= conf_thresh])
        res = match_detections(confident, gs, iou_thresh)
        for c in range(nc):
            tp[c] += res.tp.get(c, 0)
            fp[c] += res.fp.get(c, 0)
            fn[c] += res.fn.get(c, 0)
    rows, notes, aps = [], [], []
    for c, name in enumerate(class_names):
        ap = average_precision([[d for d in ds if d.class_id == c] for ds in dets],
                               [[g for g in gs if g.class_id == c] for gs in gts], iou_thresh)
        if ap is None:
            notes.append(f"class {name!r} has no ground truth; AP undefined and excluded from mAP")
        else:
            aps.append(ap)
        rows.append(ClassMetrics(name, *precision_recall_f1(tp[c], fp[c], fn[c]), ap, tp[c], fp[c], fn[c]))
    T, F, N = sum(tp), sum(fp), sum(fn)
    overall = ClassMetrics("Overall Defect Detection", *precision_recall_f1(T, F, N), None, T, F, N)
    if not aps:
        notes.append("no class has ground truth; mAP reported as 0")
    return MetricsReport(rows, overall, float(np.mean(aps)) if aps else 0.0, notes)
