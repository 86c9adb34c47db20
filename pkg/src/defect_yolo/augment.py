"""Box-aware augmentations on float rasters with normalised annotation records."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import PAD_VALUE, AnnotationRecord

OPS = ("hflip", "rotate", "scale", "translate", "color_jitter", "random_crop")
MIN_BOX_PX = 2.0


@dataclass(frozen=True)
class AugmentParams:
    max_rotate_deg: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    max_translate: float = 0.1
    brightness: float = 0.2
    contrast: float = 0.2
    min_crop: float = 0.6


@dataclass
class AugmentReport:
    dropped: int = 0


def augment(image: np.ndarray, records: Sequence[AnnotationRecord], ops: Sequence[str],
            rng: np.random.Generator, params: AugmentParams = AugmentParams(),
            report: AugmentReport | None = None) -> tuple[np.ndarray, list[AnnotationRecord]]:
    """Apply ``ops`` in order. Boxes shrinking below 2 px are dropped and counted."""
    unknown = set(ops) - set(OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    report = report if report is not None else AugmentReport()
    img = np.asarray(image, dtype=np.float64)
    recs = list(records)
    for op in ops:
        if op == "hflip":
            img = img[:, ::-1].copy()
            recs = [replace(r, cx=1.0 - r.cx) for r in recs]
        elif op == "color_jitter":
            img = color_jitter(img, rng, params)
        elif op == "random_crop":
            img, recs = _random_crop(img, recs, rng, params, report)
        else:
            h, w = img.shape[:2]
            if op == "rotate":
                m = _rotation(w, h, math.radians(rng.uniform(-params.max_rotate_deg, params.max_rotate_deg)))
            elif op == "scale":
                m = _scaling(w, h, rng.uniform(*params.scale_range))
            else:
                m = np.array([[1.0, 0.0, rng.uniform(-1, 1) * params.max_translate * w],
                              [0.0, 1.0, rng.uniform(-1, 1) * params.max_translate * h]])
            img = warp_affine(img, m)
            recs = _warp_records(recs, m, w, h, report)
    return img, recs


def color_jitter(img: np.ndarray, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Brightness shift and contrast stretch about the mean; geometry untouched."""
    b = rng.uniform(-params.brightness, params.brightness)
    c = rng.uniform(1 - params.contrast, 1 + params.contrast)
    mean = img.mean()
    return np.clip((img - mean) * c + mean + b, 0.0, 1.0)


def _rotation(w, h, theta):
    cx, cy = w / 2, h / 2
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, cx - c * cx + s * cy],
                     [s, c, cy - s * cx - c * cy]])


def _scaling(w, h, f):
    cx, cy = w / 2, h / 2
    return np.array([[f, 0.0, cx - f * cx], [0.0, f, cy - f * cy]])


def warp_affine(img: np.ndarray, m: np.ndarray, fill: float = PAD_VALUE) -> np.ndarray:
    """Nearest-neighbour warp; ``m`` maps source pixel coords to destination."""
    h, w = img.shape[:2]
    full = np.vstack([m, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(full)
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5
    sx = inv[0, 0] * px + inv[0, 1] * py + inv[0, 2]
    sy = inv[1, 0] * px + inv[1, 1] * py + inv[1, 2]
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full(img.shape, fill, dtype=img.dtype)
    out[valid] = img[iy[valid], ix[valid]]
    return out


def _keep(rec: AnnotationRecord, x1, y1, x2, y2, w, h, report) -> AnnotationRecord | None:
    x1, x2 = max(x1, 0.0), min(x2, float(w))
    y1, y2 = max(y1, 0.0), min(y2, float(h))
    if x2 - x1 < MIN_BOX_PX or y2 - y1 < MIN_BOX_PX:
        report.dropped += 1
        return None
    return AnnotationRecord.from_corners(rec.class_id, x1 / w, y1 / h, x2 / w, y2 / h, rec.severity)


def _warp_records(recs, m, w, h, report) -> list[AnnotationRecord]:
    out = []
    for r in recs:
        x1, y1, x2, y2 = r.corners()
        corners = np.array([[x1 * w, y1 * h], [x2 * w, y1 * h], [x1 * w, y2 * h], [x2 * w, y2 * h]])
        moved = corners @ m[:, :2].T + m[:, 2]
        kept = _keep(r, moved[:, 0].min(), moved[:, 1].min(), moved[:, 0].max(), moved[:, 1].max(), w, h, report)
        if kept is not None:
            out.append(kept)
    return out


def _random_crop(img, recs, rng, params, report):
    h, w = img.shape[:2]
    cw = max(1, int(round(w * rng.uniform(params.min_crop, 1.0))))
    ch = max(1, int(round(h * rng.uniform(params.min_crop, 1.0))))
    ox = int(rng.integers(0, w - cw + 1))
    oy = int(rng.integers(0, h - ch + 1))
    out = []
    for r in recs:
        cx, cy = r.cx * w, r.cy * h
        if not (ox <= cx < ox + cw and oy <= cy < oy + ch):
            report.dropped += 1
            continue
        x1, y1, x2, y2 = r.corners()
        kept = _keep(r, x1 * w - ox, y1 * h - oy, x2 * w - ox, y2 * h - oy, cw, ch, report)
        if kept is not None:
            out.append(kept)
    return img[oy:oy + ch, ox:ox + cw].copy(), out
