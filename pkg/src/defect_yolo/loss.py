"""Ground-truth assignment to grid cells and the three-part detection loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import DetBox
from .errors import AnnotationError, DimensionError
from .model import TW_CLAMP, ModelConfig, PredGrid
from .tensor import Tensor

log = logging.getLogger(__name__)

# size bands at a 160 px input; they scale linearly with input_size
BAND_REFERENCE_SIZE = 160
BAND_LIMITS = (64.0, 128.0)
OFFSET_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_cls: float = 1.0
    neg_weight: float = 0.5

    def __post_init__(self):
        for name in ("lambda_box", "lambda_obj", "lambda_cls", "neg_weight"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not 0 < self.neg_weight <= 1:
            raise ValueError(f"neg_weight must lie in (0, 1], got {self.neg_weight}")


@dataclass
class ScaleTargets:
    stride: int
    obj: np.ndarray   # (N, S, S) in {0, 1}
    box: np.ndarray   # (N, S, S, 4) pixel cx, cy, w, h
    cls: np.ndarray   # (N, S, S, C) one-hot
    mask: np.ndarray  # (N, S, S) bool, responsible cells

    @property
    def size(self) -> int:
        return self.obj.shape[1]


@dataclass
class TargetMap:
    scales: list[ScaleTargets]
    dropped: list[DetBox] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.scales[0].obj.shape[0]

    def num_positives(self) -> int:
        return int(sum(s.mask.sum() for s in self.scales))

    @classmethod
    def stack(cls, maps: list["TargetMap"]) -> "TargetMap":
        scales = []
        for parts in zip(*(m.scales for m in maps)):
            scales.append(ScaleTargets(
                parts[0].stride,
                np.concatenate([p.obj for p in parts]),
                np.concatenate([p.box for p in parts]),
                np.concatenate([p.cls for p in parts]),
                np.concatenate([p.mask for p in parts]),
            ))
        return cls(scales, [d for m in maps for d in m.dropped])


def scale_index(box: DetBox, config: ModelConfig) -> int:
    """Pick the stride level whose size band holds ``max(w, h)``."""
    factor = config.input_size / BAND_REFERENCE_SIZE
    side = max(box.w, box.h)
    for level, limit in enumerate(BAND_LIMITS):
        if side <= limit * factor:
            return level
    return len(BAND_LIMITS)


def _cell_of(value: float, stride: int, size: int) -> int:
    return min(max(int(math.floor(value / stride)), 0), size - 1)


def encode_box(box: DetBox, stride: int, cell: tuple[int, int] | None = None) -> tuple[float, float, float, float]:
    """Raw head values (tx, ty, tw, th) that decode back to ``box`` at ``cell``."""
    if cell is None:
        cell = (int(math.floor(box.cy / stride)), int(math.floor(box.cx / stride)))
    i, j = cell
    ox = min(max(box.cx / stride - j, OFFSET_EPS), 1 - OFFSET_EPS)
    oy = min(max(box.cy / stride - i, OFFSET_EPS), 1 - OFFSET_EPS)
    return (math.log(ox / (1 - ox)), math.log(oy / (1 - oy)),
            math.log(box.w / stride), math.log(box.h / stride))


def assign_targets(gts: list[DetBox], config: ModelConfig) -> TargetMap:
    """Assign each ground-truth box (input pixels) to one scale and one cell.

    Larger boxes claim cells first. A box whose cell is taken moves to the
    nearest free neighbouring cell on its scale; failing that it is dropped
    and reported in ``TargetMap.dropped``.
    """
    c = config.num_classes
    scales = []
    for stride, size in zip(config.strides, config.grid_sizes()):
        scales.append(ScaleTargets(
            stride,
            np.zeros((1, size, size)),
            np.zeros((1, size, size, 4)),
            np.zeros((1, size, size, c)),
            np.zeros((1, size, size), dtype=bool),
        ))
    dropped = []
    order = sorted(range(len(gts)), key=lambda k: (-gts[k].area, k))
    for k in order:
        box = gts[k]
        if not (box.w > 0 and box.h > 0):
            raise AnnotationError(f"zero-area ground truth box {box}")
        if not 0 <= box.class_id < c:
            raise AnnotationError(f"class id {box.class_id} outside [0, {c})")
        st = scales[scale_index(box, config)]
        i = _cell_of(box.cy, st.stride, st.size)
        j = _cell_of(box.cx, st.stride, st.size)
        if st.mask[0, i, j]:
            cell = _nearest_free(st, box, i, j)
            if cell is None:
                log.warning("dropping ground truth %s: no free cell at stride %d", box, st.stride)
                dropped.append(box)
                continue
            i, j = cell
        st.mask[0, i, j] = True
        st.obj[0, i, j] = 1.0
        st.box[0, i, j] = (box.cx, box.cy, box.w, box.h)
        st.cls[0, i, j, box.class_id] = 1.0
    return TargetMap(scales, dropped)


def _nearest_free(st: ScaleTargets, box: DetBox, i: int, j: int):
    candidates = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ni, nj = i + di, j + dj
            if (di or dj) and 0 <= ni < st.size and 0 <= nj < st.size and not st.mask[0, ni, nj]:
                d = ((nj + 0.5) * st.stride - box.cx) ** 2 + ((ni + 0.5) * st.stride - box.cy) ** 2
                candidates.append((d, ni, nj))
    if not candidates:
        return None
    _, ni, nj = min(candidates)
    return ni, nj


# ---------------------------------------------------------------- loss terms

def _check_geometry(preds: list[PredGrid], targets: TargetMap) -> None:
    if len(preds) != len(targets.scales):
        raise DimensionError(f"{len(preds)} prediction grids vs {len(targets.scales)} target scales")
    for p, t in zip(preds, targets.scales):
        n, ch, s, s2 = p.tensor.shape
        if p.stride != t.stride or s != t.size or s2 != t.size or n != t.obj.shape[0]:
            raise DimensionError(
                f"prediction grid (stride {p.stride}, {n}x{s}x{s2}) does not match "
                f"targets (stride {t.stride}, {t.obj.shape[0]}x{t.size}x{t.size})")
        if ch != 5 + t.cls.shape[-1]:
            raise DimensionError(f"prediction has {ch} channels, targets need {5 + t.cls.shape[-1]}")


def _flat_index(shape, n, ch, i, j) -> np.ndarray:
    _, c, s, _ = shape
    return ((n * c + ch) * s + i) * s + j


def _zero(preds: list[PredGrid]) -> Tensor:
    return Tensor(np.zeros(1), dtype=preds[0].tensor.data.dtype)


def _positive_ious(preds: list[PredGrid], targets: TargetMap) -> Tensor | None:
    ious = []
    for p, t in zip(preds, targets.scales):
        n, i, j = np.nonzero(t.mask)
        if n.size == 0:
            continue
        raw = p.tensor
        dtype = raw.data.dtype
        s = float(p.stride)

        def chan(c):
            return T.take(raw, _flat_index(raw.shape, n, c, i, j))

        def const(v):
            return Tensor(v, dtype=dtype)

        px = T.mul(T.add(T.sigmoid(chan(0)), const(j)), s)
        py = T.mul(T.add(T.sigmoid(chan(1)), const(i)), s)
        pw = T.mul(T.exp(T.clip(chan(2), -TW_CLAMP, TW_CLAMP)), s)
        ph = T.mul(T.exp(T.clip(chan(3), -TW_CLAMP, TW_CLAMP)), s)
        g = t.box[n, i, j]
        gx1, gy1 = const(g[:, 0] - g[:, 2] / 2), const(g[:, 1] - g[:, 3] / 2)
        gx2, gy2 = const(g[:, 0] + g[:, 2] / 2), const(g[:, 1] + g[:, 3] / 2)
        hw, hh = T.mul(pw, 0.5), T.mul(ph, 0.5)
        px1, px2 = T.sub(px, hw), T.add(px, hw)
        py1, py2 = T.sub(py, hh), T.add(py, hh)
        iw = T.clip(T.sub(T.minimum(px2, gx2), T.maximum(px1, gx1)), 0.0, np.inf)
        ih = T.clip(T.sub(T.minimum(py2, gy2), T.maximum(py1, gy1)), 0.0, np.inf)
        inter = T.mul(iw, ih)
        union = T.sub(T.add(T.mul(pw, ph), const(g[:, 2] * g[:, 3])), inter)
        ious.append(T.div(inter, union))
    if not ious:
        return None
    return ious[0] if len(ious) == 1 else T.concat(ious, axis=0)


def localization_loss(preds: list[PredGrid], targets: TargetMap) -> Tensor:
    """Mean of ``1 - IoU`` between decoded predictions and targets at positive cells."""
    _check_geometry(preds, targets)
    ious = _positive_ious(preds, targets)
    if ious is None:
        return _zero(preds)
    return T.mean(T.sub(Tensor(np.ones(ious.shape), dtype=ious.data.dtype), ious))


def confidence_loss(preds: list[PredGrid], targets: TargetMap, weights: LossWeights = LossWeights()) -> Tensor:
    """Objectness BCE, negatives down-weighted by ``neg_weight``, averaged over all cells."""
    _check_geometry(preds, targets)
    total, cells = None, 0
    for p, t in zip(preds, targets.scales):
        raw = p.tensor
        n, i, j = np.indices(t.obj.shape).reshape(3, -1)
        prob = T.sigmoid(T.take(raw, _flat_index(raw.shape, n, 4, i, j)))
        target = t.obj.reshape(-1).astype(raw.data.dtype)
        cell_w = np.where(target > 0, 1.0, weights.neg_weight).astype(raw.data.dtype)
        term = T.sum(T.mul(T.bce(prob, target), Tensor(cell_w, dtype=raw.data.dtype)))
        total = term if total is None else T.add(total, term)
        cells += target.size
    return T.mul(total, 1.0 / cells)


def classification_loss(preds: list[PredGrid], targets: TargetMap) -> Tensor:
    """Per-class BCE at positive cells, averaged over positives times classes."""
    _check_geometry(preds, targets)
    terms = []
    count = 0
    for p, t in zip(preds, targets.scales):
        n, i, j = np.nonzero(t.mask)
        if n.size == 0:
            continue
        raw = p.tensor
        c = t.cls.shape[-1]
        # (P, C) layout, row-major per positive
        ch = np.arange(c)[None, :] + 5
        idx = _flat_index(raw.shape, n[:, None], ch, i[:, None], j[:, None]).reshape(-1)
        prob = T.sigmoid(T.take(raw, idx))
        target = t.cls[n, i, j].reshape(-1).astype(raw.data.dtype)
        terms.append(T.sum(T.bce(prob, target)))
        count += target.size
    if not terms:
        return _zero(preds)
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / count)


def loss_components(preds, targets, weights: LossWeights = LossWeights()) -> dict[str, Tensor]:
    return {
        "box": localization_loss(preds, targets),
        "obj": confidence_loss(preds, targets, weights),
        "cls": classification_loss(preds, targets),
    }


def combine(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    return T.add(T.add(T.mul(components["box"], weights.lambda_box),
                       T.mul(components["obj"], weights.lambda_obj)),
                 T.mul(components["cls"], weights.lambda_cls))


def total_loss(preds, targets, weights: LossWeights = LossWeights()) -> Tensor:
    return combine(loss_components(preds, targets, weights), weights)
