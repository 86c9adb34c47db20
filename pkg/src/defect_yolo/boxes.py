"""Axis-aligned boxes in center format and their overlap."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class DetBox:
    """A box in pixel units. ``score`` is only meaningful for predictions."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float = 1.0

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, class_id: int = 0, score: float = 1.0) -> "DetBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, class_id, score)


def iou(a: DetBox, b: DetBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))
