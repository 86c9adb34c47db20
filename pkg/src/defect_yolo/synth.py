"""Procedural machine-part images with rendered defects and exact boxes.

Every defect renderer edits a uint8 RGB raster in place; the recorded box is
the tight bound of the pixels that actually changed, so ground truth is exact
by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (AnnotationRecord, DatasetManifest, LabelStrategy, ManifestEntry,
                   dominant_type, split_dataset, write_annotations, write_image)
from .errors import ArgumentError, ConfigError, GenerationError
from .taxonomy import DEFECT_TYPES, PART_DEFECTS, PART_KINDS, SEVERITIES

MIN_SIZE = 64
GEAR_TEETH = 12
BACKGROUND = 45.0
METAL = 165.0
SEVERITY_SCALE = {"minor": 1.0, "moderate": 1.5, "severe": 2.1}


@dataclass(frozen=True)
class PartGeometry:
    kind: str
    width: int
    height: int

    @property
    def center(self) -> tuple[float, float]:
        return self.width / 2, self.height / 2

    @property
    def radius(self) -> float:
        return 0.4 * min(self.width, self.height)

    def coords(self):
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        cx, cy = self.center
        return xs + 0.5 - cx, ys + 0.5 - cy

    def polar(self):
        dx, dy = self.coords()
        return np.hypot(dx, dy), np.arctan2(dy, dx)

    # gear tooth k spans angles centred on k * 2pi / GEAR_TEETH
    def tooth_mask(self, k: int, outer_fraction: float = 1.0) -> np.ndarray:
        r, th = self.polar()
        R = self.radius
        root, tip = 0.78 * R, R
        pitch = 2 * math.pi / GEAR_TEETH
        rel = np.angle(np.exp(1j * (th - k * pitch)))
        # trapezoid: half-width shrinks linearly from root to tip
        t = np.clip((r - root) / (tip - root), 0.0, 1.0)
        half = pitch * (0.28 - 0.12 * t)
        inner = tip - outer_fraction * (tip - root)
        return (r >= inner) & (r <= tip) & (r > root - 0.5) & (np.abs(rel) <= half)

    def mask(self) -> np.ndarray:
        """Boolean silhouette of the part (True = metal)."""
        R = self.radius
        dx, dy = self.coords()
        if self.kind == "bearing":
            r = np.hypot(dx, dy)
            return (r <= R) & (r >= 0.38 * R)
        if self.kind == "gear":
            r = np.hypot(dx, dy)
            body = (r <= 0.78 * R) & (r >= 0.18 * R)
            for k in range(GEAR_TEETH):
                body |= self.tooth_mask(k)
            return body
        if self.kind == "bolt":
            return self._hexagon(dx, dy) | self._shaft(dx, dy)
        raise ArgumentError(f"unknown part kind {self.kind!r}")

    def head_center(self) -> tuple[float, float]:
        return 0.0, -0.55 * self.radius

    def _hexagon(self, dx, dy):
        hx, hy = self.head_center()
        rad = 0.42 * self.radius
        x, y = np.abs(dx - hx), np.abs(dy - hy)
        # flat-topped hexagon with circumradius ``rad``
        return (y <= rad * math.sqrt(3) / 2) & (math.sqrt(3) * x + y <= math.sqrt(3) * rad)

    def shaft_bounds(self) -> tuple[float, float, float, float]:
        R = self.radius
        return -0.2 * R, 0.2 * R, -0.3 * R, 0.95 * R

    def _shaft(self, dx, dy):
        x0, x1, y0, y1 = self.shaft_bounds()
        return (dx >= x0) & (dx <= x1) & (dy >= y0) & (dy <= y1)


def _geometry(kind: str, size) -> PartGeometry:
    if kind not in PART_KINDS:
        raise ArgumentError(f"unknown part kind {kind!r}")
    w, h = (size, size) if isinstance(size, (int, np.integer)) else (int(size[0]), int(size[1]))
    if min(w, h) < MIN_SIZE:
        raise ArgumentError(f"image size must be >= {MIN_SIZE}, got {w}x{h}")
    return PartGeometry(kind, w, h)


def _background(geo: PartGeometry, rng, textured: bool) -> np.ndarray:
    base = np.full((geo.height, geo.width), BACKGROUND)
    if textured:
        # coarse random blotches, upsampled, plus fine grain
        cells = rng.uniform(-25, 25, size=(geo.height // 16 + 2, geo.width // 16 + 2))
        coarse = np.kron(cells, np.ones((16, 16)))[:geo.height, :geo.width]
        base = base + coarse + rng.normal(0, 10, size=base.shape)
    return base


def gen_part(kind: str, size, rng: np.random.Generator, textured: bool = False) -> np.ndarray:
    """Render a clean part as an (H, W, 3) uint8 raster."""
    geo = _geometry(kind, size)
    gray = _background(geo, rng, textured)
    mask = geo.mask()
    metal = np.full_like(gray, METAL)
    if kind == "bearing":
        r, _ = geo.polar()
        metal = np.where((r < 0.72 * geo.radius) & (r > 0.5 * geo.radius), 110.0, METAL)
    elif kind == "bolt":
        dx, dy = geo.coords()
        # faint thread lines on the shaft
        threads = (np.floor(dy / max(2.0, geo.radius * 0.06)) % 2 == 0) & geo._shaft(dx, dy)
        metal = np.where(threads, METAL - 12, METAL)
    gray = np.where(mask, metal, gray)
    gray = gray * rng.uniform(0.92, 1.08) + rng.normal(0, 3.0, size=gray.shape)
    tint = np.array([1.0, 1.0, 1.03])
    return np.clip(np.round(gray[:, :, None] * tint), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- drawing helpers

def _polyline_mask(shape, points: np.ndarray, radius: float) -> np.ndarray:
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    for p, q in zip(points[:-1], points[1:]):
        x0 = max(int(math.floor(min(p[0], q[0]) - radius - 1)), 0)
        x1 = min(int(math.ceil(max(p[0], q[0]) + radius + 1)), w)
        y0 = max(int(math.floor(min(p[1], q[1]) - radius - 1)), 0)
        y1 = min(int(math.ceil(max(p[1], q[1]) + radius + 1)), h)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px, py = xs + 0.5, ys + 0.5
        d = q - p
        length2 = float(d @ d) or 1e-12
        t = np.clip(((px - p[0]) * d[0] + (py - p[1]) * d[1]) / length2, 0.0, 1.0)
        dist = np.hypot(px - (p[0] + t * d[0]), py - (p[1] + t * d[1]))
        out[y0:y1, x0:x1] |= dist <= radius
    return out


def _walk(start, angle, n_steps, step, jitter) -> np.ndarray:
    """Random-walk vertices from precomputed jitter; length scales with ``step``."""
    pts = [np.asarray(start, dtype=float)]
    a = angle
    for k in range(n_steps):
        a += jitter[k]
        pts.append(pts[-1] + step * np.array([math.cos(a), math.sin(a)]))
    return np.array(pts)


def _ellipse_mask(geo: PartGeometry, center, a, b, angle) -> np.ndarray:
    dx, dy = geo.coords()
    ux, uy = dx - center[0], dy - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (ux * c + uy * s) / a
    v = (-ux * s + uy * c) / b
    return u * u + v * v <= 1.0


def _on_part_point(geo: PartGeometry, rng, r_lo, r_hi):
    r = geo.radius * rng.uniform(r_lo, r_hi)
    t = rng.uniform(0, 2 * math.pi)
    return r * math.cos(t), r * math.sin(t)


def _bolt_point(geo: PartGeometry, rng):
    if rng.uniform() < 0.5:
        hx, hy = geo.head_center()
        return hx + rng.uniform(-0.2, 0.2) * geo.radius, hy + rng.uniform(-0.2, 0.2) * geo.radius
    x0, x1, y0, y1 = geo.shaft_bounds()
    return rng.uniform(x0 + 0.05 * geo.radius, x1 - 0.05 * geo.radius), rng.uniform(y0 + 0.2 * geo.radius, y1 - 0.2 * geo.radius)


def _defect_anchor(geo: PartGeometry, rng):
    if geo.kind == "bearing":
        # outer race only, so lines start on metal
        return _on_part_point(geo, rng, 0.76, 0.95)
    if geo.kind == "gear":
        return _on_part_point(geo, rng, 0.3, 0.7)
    return _bolt_point(geo, rng)


# ---------------------------------------------------------------- defect renderers
# Each takes (img int16 HxWx3, geo, rng, scale, sev_idx) and mutates img.

def _scratch(img, geo, rng, scale, sev):
    ax, ay = _defect_anchor(geo, rng)
    angle = rng.uniform(0, 2 * math.pi)
    jitter = rng.uniform(-0.35, 0.35, size=5)
    cx, cy = geo.center
    pts = _walk((ax + cx, ay + cy), angle, 5, 0.05 * geo.radius * scale, jitter)
    mask = _polyline_mask(img.shape[:2], pts, 0.6 + 0.4 * sev)
    img[mask] += 55 + 10 * sev


def _crack(img, geo, rng, scale, sev):
    ax, ay = _defect_anchor(geo, rng)
    angle = rng.uniform(0, 2 * math.pi)
    jitter = rng.uniform(-0.6, 0.6, size=6)
    branch_at = rng.integers(1, 5, size=2)
    branch_turn = rng.choice([-1.0, 1.0], size=2) * rng.uniform(0.5, 1.1, size=2)
    branch_jitter = rng.uniform(-0.5, 0.5, size=(2, 3))
    cx, cy = geo.center
    step = 0.045 * geo.radius * scale
    main = _walk((ax + cx, ay + cy), angle, 6, step, jitter)
    mask = _polyline_mask(img.shape[:2], main, 0.7 + 0.3 * sev)
    for k in range(2):
        v = main[branch_at[k]]
        seg = main[branch_at[k] + 1] - v
        a = math.atan2(seg[1], seg[0]) + branch_turn[k]
        mask |= _polyline_mask(img.shape[:2], _walk(v, a, 3, 0.6 * step, branch_jitter[k]), 0.6)
    img[mask] = np.round(img[mask] * 0.35)


def _wear(img, geo, rng, scale, sev):
    ax, ay = _defect_anchor(geo, rng)
    angle = rng.uniform(0, math.pi)
    a = 0.1 * geo.radius * scale
    b = a * rng.uniform(0.5, 0.8)
    mask = _ellipse_mask(geo, (ax, ay), a, b, angle) & geo.mask()
    img[mask] -= 22 + 6 * sev


def _broken_tooth(img, geo, rng, scale, sev):
    k = int(rng.integers(0, GEAR_TEETH))
    noise = rng.normal(0, 3.0, size=img.shape[:2])
    fraction = {0: 0.45, 1: 0.75, 2: 1.0}[sev]
    mask = geo.tooth_mask(k, fraction)
    fill = np.clip(np.round(BACKGROUND + noise), 1, 255)
    img[mask] = fill[mask][:, None]


def _burr(img, geo, rng, scale, sev):
    k = int(rng.integers(0, GEAR_TEETH))
    offset = rng.uniform(-0.08, 0.08)
    a = k * 2 * math.pi / GEAR_TEETH + offset
    rad = 0.05 * geo.radius * scale
    center = ((geo.radius + 0.4 * rad) * math.cos(a), (geo.radius + 0.4 * rad) * math.sin(a))
    mask = _ellipse_mask(geo, center, rad, rad, 0.0) & ~geo.mask()
    img[mask] = METAL


def _deformation(img, geo, rng, scale, sev):
    x0, x1, y0, y1 = geo.shaft_bounds()
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    span = 0.22 * geo.radius * (0.8 + 0.2 * scale)
    top = rng.uniform(y0 + 0.1 * geo.radius, y1 - span - 0.05 * geo.radius)
    amp = 0.05 * geo.radius * scale
    dx, dy = geo.coords()
    t = np.clip((dy - top) / span, 0.0, 1.0)
    bulge = amp * np.sin(math.pi * t)
    edge = x1 if side > 0 else x0
    outward = (dx - edge) * side
    mask = (dy >= top) & (dy <= top + span) & (outward > 0) & (outward <= bulge)
    img[mask] = METAL


def _rust(img, geo, rng, scale, sev):
    ax, ay = _bolt_point(geo, rng)
    a = 0.09 * geo.radius * scale
    b = a * rng.uniform(0.6, 0.9)
    angle = rng.uniform(0, math.pi)
    region = _ellipse_mask(geo, (ax, ay), a, b, angle) & geo.mask()
    speck = rng.uniform(size=img.shape[:2]) < 0.45 + 0.1 * sev
    red = rng.uniform(size=img.shape[:2]) < 0.5
    mask = region & speck
    img[mask & red] = (110, 38, 26)
    img[mask & ~red] = (68, 64, 60)


RENDERERS = {
    "scratch": _scratch,
    "crack": _crack,
    "wear": _wear,
    "broken_tooth": _broken_tooth,
    "burr": _burr,
    "deformation": _deformation,
    "rust": _rust,
}


def changed_box(before: np.ndarray, after: np.ndarray):
    """Tight pixel bound (x0, y0, x1, y1), inclusive, of pixels that differ."""
    diff = before != after
    if diff.ndim == 3:
        diff = diff.any(axis=2)
    ys, xs = np.nonzero(diff)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def gen_defect(image: np.ndarray, part: str, defect: str, severity: str,
               rng: np.random.Generator) -> tuple[np.ndarray, AnnotationRecord]:
    """Render one defect onto a copy of ``image`` and return its exact record."""
    if part not in PART_DEFECTS:
        raise GenerationError(f"unknown part kind {part!r}")
    if defect not in PART_DEFECTS[part]:
        raise GenerationError(f"defect {defect!r} does not occur on {part!r}; "
                              f"valid: {', '.join(PART_DEFECTS[part])}")
    if severity not in SEVERITIES:
        raise GenerationError(f"unknown severity {severity!r}")
    h, w = image.shape[:2]
    geo = _geometry(part, (w, h))
    work = image.astype(np.int16)
    RENDERERS[defect](work, geo, rng, SEVERITY_SCALE[severity], SEVERITIES.index(severity))
    out = np.clip(work, 0, 255).astype(np.uint8)
    bound = changed_box(image, out)
    if bound is None:
        raise GenerationError(f"{defect} renderer changed no pixels")
    x0, y0, x1, y1 = bound
    rec = AnnotationRecord.from_corners(DEFECT_TYPES.index(defect), x0 / w, y0 / h,
                                        (x1 + 1) / w, (y1 + 1) / h, severity)
    return out, rec


@dataclass
class GenSample:
    image: np.ndarray
    records: list[AnnotationRecord]
    part: str
    defects: list[str]
    seed: tuple
    clean: np.ndarray | None = None


def _overlaps(rec: AnnotationRecord, others: Sequence[AnnotationRecord]) -> bool:
    ax1, ay1, ax2, ay2 = rec.corners()
    for o in others:
        bx1, by1, bx2, by2 = o.corners()
        if ax1 < bx2 and bx1 < ax2 and ay1 < by2 and by1 < ay2:
            return True
    return False


def generate_sample(part: str, defects: Sequence[tuple[str, str]], size, rng: np.random.Generator,
                    textured: bool = False, seed: tuple = (), max_tries: int = 20) -> GenSample:
    """Part with several defects; later defects are redrawn until they do not
    overlap earlier boxes (given up after ``max_tries``)."""
    clean = gen_part(part, size, rng, textured)
    img = clean
    records: list[AnnotationRecord] = []
    placed: list[str] = []
    for defect, severity in defects:
        for _ in range(max_tries):
            cand, rec = gen_defect(img, part, defect, severity, rng)
            if not _overlaps(rec, records):
                img = cand
                records.append(rec)
                placed.append(defect)
                break
    return GenSample(img, records, part, placed, seed, clean)


# ---------------------------------------------------------------- datasets

@dataclass
class GenSpec:
    counts: dict[tuple[str, str], int]
    image_size: tuple[int, int] = (320, 320)
    severity_mix: dict[str, float] = field(default_factory=lambda: {s: 1 / 3 for s in SEVERITIES})
    seed: int = 0
    defect_free_fraction: float = 0.0
    strategy: str = "type_based"
    split_ratio: float = 0.8
    mixed: dict[str, int] = field(default_factory=dict)
    channels: int = 3

    def __post_init__(self):
        self.counts = {tuple(k): int(v) for k, v in self.counts.items()}
        for (part, defect), n in self.counts.items():
            if part not in PART_DEFECTS or defect not in PART_DEFECTS[part]:
                raise ConfigError(f"invalid (part, defect) pair ({part}, {defect})")
            if n < 0:
                raise ConfigError("counts must be >= 0")
        if set(self.severity_mix) - set(SEVERITIES) or abs(sum(self.severity_mix.values()) - 1) > 1e-9:
            raise ConfigError("severity_mix must cover known severities and sum to 1")
        if not 0 <= self.defect_free_fraction < 1:
            raise ConfigError("defect_free_fraction must lie in [0, 1)")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        for part, n in self.mixed.items():
            if part not in PART_DEFECTS or n < 0:
                raise ConfigError(f"invalid mixed entry {part}: {n}")
        self.image_size = tuple(self.image_size)

    def defect_types(self) -> tuple[str, ...]:
        present = {d for (_, d), n in self.counts.items() if n > 0}
        present |= {d for p, n in self.mixed.items() if n > 0 for d in PART_DEFECTS[p]}
        return tuple(t for t in DEFECT_TYPES if t in present)

    def num_defective(self) -> int:
        return sum(self.counts.values()) + sum(self.mixed.values())

    def num_defect_free(self) -> int:
        f = self.defect_free_fraction
        return int(round(self.num_defective() * f / (1 - f)))

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generation spec keys: {sorted(unknown)}")
        d = dict(d)
        counts = {}
        for key, n in d.pop("counts", {}).items():
            part, sep, defect = key.partition("/")
            if not sep:
                raise ConfigError(f"count key must look like 'part/defect', got {key!r}")
            counts[(part, defect)] = n
        return cls(counts=counts, **d)

    @classmethod
    def load(cls, path) -> "GenSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _severity(spec: GenSpec, rng) -> str:
    names = list(spec.severity_mix)
    probs = np.array([spec.severity_mix[n] for n in names])
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def plan_images(spec: GenSpec) -> list[tuple[str, str | None]]:
    """(part, defect) per image; defect None = defect-free, 'mixed' = several."""
    plan: list[tuple[str, str | None]] = []
    for (part, defect) in sorted(spec.counts, key=lambda k: (PART_KINDS.index(k[0]), DEFECT_TYPES.index(k[1]))):
        plan += [(part, defect)] * spec.counts[(part, defect)]
    for part in sorted(spec.mixed, key=PART_KINDS.index):
        plan += [(part, "mixed")] * spec.mixed[part]
    parts = [p for p in PART_KINDS if any(pp == p for pp, _ in plan)] or list(PART_KINDS)
    plan += [(parts[k % len(parts)], None) for k in range(spec.num_defect_free())]
    return plan


def render_planned(spec: GenSpec, index: int, part: str, defect: str | None) -> GenSample:
    rng = np.random.default_rng([spec.seed, index])
    if defect is None:
        defects = []
    elif defect == "mixed":
        options = PART_DEFECTS[part]
        n = int(rng.integers(2, 4))
        defects = [(options[int(rng.integers(len(options)))], _severity(spec, rng)) for _ in range(n)]
    else:
        defects = [(defect, _severity(spec, rng))]
    return generate_sample(part, defects, spec.image_size, rng, seed=(spec.seed, index))


def gen_dataset(spec: GenSpec, out_dir) -> DatasetManifest:
    """Write images, annotation files and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise GenerationError(f"cannot create output directory {out}: {exc}") from exc
    types = spec.defect_types() or (DEFECT_TYPES[0],)
    strategy = LabelStrategy(spec.strategy, types)
    ext = ".ppm" if spec.channels == 3 else ".pgm"
    entries = []
    for index, (part, defect) in enumerate(plan_images(spec)):
        sample = render_planned(spec, index, part, defect)
        image = sample.image if spec.channels == 3 else _to_gray_u8(sample.image)
        stem = f"{index:05d}"
        try:
            write_image(out / "images" / (stem + ext), image)
            write_annotations(out / "labels" / (stem + ".txt"), sample.records)
        except OSError as exc:
            raise GenerationError(f"cannot write sample {stem}: {exc}") from exc
        entries.append(ManifestEntry(f"images/{stem}{ext}", f"labels/{stem}.txt", part,
                                     None, dominant_type(sample.records)))
    manifest = DatasetManifest(entries, strategy, DEFECT_TYPES, out)
    manifest = split_dataset(manifest, spec.split_ratio, spec.seed)
    try:
        manifest.save(out / "manifest.json")
    except OSError as exc:
        raise GenerationError(f"cannot write manifest: {exc}") from exc
    return manifest


def _to_gray_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])), 0, 255).astype(np.uint8)
