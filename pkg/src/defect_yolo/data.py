"""Annotations, labeling strategies, manifests, splitting and letterbox preprocessing.

Annotation files hold one box per line::

    <class> <cx> <cy> <w> <h> [m|d|s]

with coordinates normalised to the image size and an optional severity token
(minor, moderate, severe). The raw class id indexes ``DEFECT_TYPES``; a
:class:`LabelStrategy` maps it to the training class space.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import DetBox
from .errors import AnnotationError, ArgumentError, InputError, StrategyError
from .model import ModelConfig
from .taxonomy import DEFECT_TYPES, SEVERITIES, SEVERITY_TOKENS, TOKEN_FOR_SEVERITY
from .tensor import Tensor

BOUNDS_TOL = 1e-6
PAD_VALUE = 0.5
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AnnotationRecord:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    severity: str | None = None

    def corners(self) -> tuple[float, float, float, float]:
        return self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2

    @classmethod
    def from_corners(cls, class_id, x1, y1, x2, y2, severity=None) -> "AnnotationRecord":
        return cls(class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, severity)

    def is_valid(self) -> bool:
        x1, y1, x2, y2 = self.corners()
        return (0 <= self.cx <= 1 and 0 <= self.cy <= 1 and 0 < self.w <= 1 and 0 < self.h <= 1
                and x1 >= -BOUNDS_TOL and y1 >= -BOUNDS_TOL
                and x2 <= 1 + BOUNDS_TOL and y2 <= 1 + BOUNDS_TOL)

    def to_line(self) -> str:
        line = f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"
        if self.severity is not None:
            line += f" {TOKEN_FOR_SEVERITY[self.severity]}"
        return line


def parse_annotation(line: str, num_classes: int = len(DEFECT_TYPES), line_no: int | None = None) -> AnnotationRecord:
    fields = line.split()
    if len(fields) not in (5, 6):
        raise AnnotationError(f"expected 5 or 6 fields, got {len(fields)}", line_no)
    try:
        class_id = int(fields[0])
        cx, cy, w, h = (float(f) for f in fields[1:5])
    except ValueError:
        raise AnnotationError(f"non-numeric field in {line.strip()!r}", line_no) from None
    if not 0 <= class_id < num_classes:
        raise AnnotationError(f"unknown class id {class_id}", line_no)
    if not all(math.isfinite(v) for v in (cx, cy, w, h)):
        raise AnnotationError("non-finite coordinate", line_no)
    if not (0 <= cx <= 1 and 0 <= cy <= 1):
        raise AnnotationError(f"center ({cx}, {cy}) outside [0, 1]", line_no)
    if not (0 < w <= 1 and 0 < h <= 1):
        raise AnnotationError(f"size ({w}, {h}) outside (0, 1]", line_no)
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    if min(x1, y1) < -BOUNDS_TOL or max(x2, y2) > 1 + BOUNDS_TOL:
        raise AnnotationError("box exceeds image bounds", line_no)
    severity = None
    if len(fields) == 6:
        try:
            severity = SEVERITY_TOKENS[fields[5]]
        except KeyError:
            raise AnnotationError(f"unknown severity token {fields[5]!r}", line_no) from None
    x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
    return AnnotationRecord.from_corners(class_id, x1, y1, x2, y2, severity)


def parse_annotation_text(text: str, num_classes: int = len(DEFECT_TYPES)) -> list[AnnotationRecord]:
    records = []
    for k, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            records.append(parse_annotation(line.strip(), num_classes, k))
    return records


def read_annotations(path, num_classes: int = len(DEFECT_TYPES)) -> list[AnnotationRecord]:
    return parse_annotation_text(Path(path).read_text(), num_classes)


def write_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    lines = [r.to_line() for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------- labeling strategies

STRATEGY_KINDS = ("severity_based", "type_based", "no_roi")


@dataclass(frozen=True)
class LabelStrategy:
    kind: str
    types: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise StrategyError(f"unknown strategy {self.kind!r}")
        object.__setattr__(self, "types", tuple(self.types))
        if len(set(self.types)) != len(self.types) or not self.types:
            raise StrategyError("strategy types must be nonempty and distinct")

    @property
    def class_table(self) -> dict[tuple, int]:
        if self.kind == "severity_based":
            return {(t, s): ti * len(SEVERITIES) + si
                    for ti, t in enumerate(self.types) for si, s in enumerate(SEVERITIES)}
        return {(t,): ti for ti, t in enumerate(self.types)}

    @property
    def num_classes(self) -> int:
        return len(self.class_table)

    @property
    def class_names(self) -> list[str]:
        names = [None] * self.num_classes
        for key, cid in self.class_table.items():
            names[cid] = "-".join(key)
        return names

    def to_dict(self) -> dict:
        return {"kind": self.kind, "types": list(self.types)}

    @classmethod
    def from_dict(cls, d) -> "LabelStrategy":
        return cls(d["kind"], tuple(d["types"]))


def apply_label_strategy(records: Sequence[AnnotationRecord], strategy: LabelStrategy,
                         type_names: Sequence[str] = DEFECT_TYPES) -> list[AnnotationRecord]:
    """Remap raw type ids into the strategy's class space."""
    table = strategy.class_table
    type_index = {t: k for k, t in enumerate(strategy.types)}
    out = []
    for r in records:
        name = type_names[r.class_id]
        if name not in type_index:
            raise StrategyError(f"defect type {name!r} not covered by strategy types {strategy.types}")
        if strategy.kind == "severity_based":
            if r.severity is None:
                raise StrategyError(f"record for {name!r} has no severity under severity_based labeling")
            out.append(replace(r, class_id=table[(name, r.severity)]))
        else:
            out.append(replace(r, class_id=type_index[name], severity=None))
    if strategy.kind == "no_roi":
        present = sorted({r.class_id for r in out})
        out = [AnnotationRecord(c, 0.5, 0.5, 1.0, 1.0) for c in present]
    return out


# ---------------------------------------------------------------- manifest

SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    part: str
    split: str | None = None
    dominant: str | None = None

    def to_dict(self) -> dict:
        return {"image": self.image, "annotation": self.annotation, "part": self.part,
                "split": self.split, "dominant": self.dominant}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    strategy: LabelStrategy
    defect_types: tuple[str, ...] = DEFECT_TYPES
    root: Path = field(default_factory=Path)

    @property
    def class_names(self) -> list[str]:
        return self.strategy.class_names

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def to_dict(self) -> dict:
        return {
            "format": "defect-yolo-manifest",
            "version": 1,
            "defect_types": list(self.defect_types),
            "strategy": self.strategy.to_dict(),
            "class_names": self.class_names,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        strategy = LabelStrategy.from_dict(d["strategy"])
        if d.get("class_names") not in (None, strategy.class_names):
            raise StrategyError("manifest class_names disagree with its strategy")
        entries = [ManifestEntry(**e) for e in d["entries"]]
        for e in entries:
            if e.split not in (None, *SPLITS):
                raise InputError(f"bad split tag {e.split!r} for {e.image}")
        return cls(entries, strategy, tuple(d.get("defect_types", DEFECT_TYPES)), path.parent)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def dominant_type(records: Sequence[AnnotationRecord], type_names: Sequence[str] = DEFECT_TYPES) -> str:
    """Most frequent raw defect type; ties go to the lower type index; 'none' if empty."""
    if not records:
        return "none"
    counts = Counter(r.class_id for r in records)
    best = min(counts, key=lambda c: (-counts[c], c))
    return type_names[best]


def _apportion(sizes: Sequence[int], ratio: float) -> list[int]:
    """Largest-remainder shares of ``ceil(ratio * sum(sizes))``; ties go to the earlier stratum."""
    exact = [ratio * n for n in sizes]
    shares = [math.floor(q + 1e-9) for q in exact]
    left = math.ceil(ratio * sum(sizes) - 1e-9) - sum(shares)
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - shares[i]), i))
    for i in order[:left]:
        shares[i] += 1
    return shares


def split_dataset(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Stratified split on (part kind, dominant defect type).

    Within each stratum the entries are shuffled with ``seed`` and the first
    ``n_train`` go to train. The overall train count is ``ceil(ratio * N)``,
    shared out by largest remainder, so every stratum gets the floor or the
    ceiling of its own ``ratio * n``.
    """
    if not manifest.entries:
        raise ArgumentError("cannot split an empty manifest")
    if not 0 < ratio < 1:
        raise ArgumentError(f"ratio must lie in (0, 1), got {ratio}")
    strata: dict[tuple[str, str], list[int]] = {}
    for k, e in enumerate(manifest.entries):
        dom = e.dominant
        if dom is None:
            recs = read_annotations(manifest.resolve(e.annotation), len(manifest.defect_types))
            dom = dominant_type(recs, manifest.defect_types)
        strata.setdefault((e.part, dom), []).append(k)
    quotas = _apportion([len(strata[key]) for key in sorted(strata)], ratio)
    rng = np.random.default_rng(seed)
    tags = [None] * len(manifest.entries)
    for key, n_train in zip(sorted(strata), quotas):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        for pos, k in enumerate(idx):
            tags[k] = "train" if pos < n_train else "test"
    entries = [replace(e, split=t) for e, t in zip(manifest.entries, tags)]
    return replace(manifest, entries=entries)


# ---------------------------------------------------------------- images

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) into a uint8/uint16 array."""
    try:
        magic, pos = _read_token(buf, 0)
        if magic not in (b"P5", b"P6"):
            raise InputError(f"unsupported image magic {magic!r}")
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise InputError(f"malformed image header: {exc}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise InputError("malformed image header")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * channels
    if len(buf) - pos < count * dtype.itemsize:
        raise InputError("truncated image data")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    arr = arr.reshape(height, width, channels) if channels == 3 else arr.reshape(height, width)
    if maxval == 255:
        return arr.copy()
    return np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)


def read_image(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return decode_pnm(buf)


def encode_pnm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise InputError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(image))


def to_float(image: np.ndarray) -> np.ndarray:
    """uint8 raster -> float64 in [0, 1]; floats are passed through."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


# ---------------------------------------------------------------- letterbox

@dataclass(frozen=True)
class Letterbox:
    src_w: int
    src_h: int
    size: int
    new_w: int
    new_h: int
    pad_x: int
    pad_y: int

    @classmethod
    def fit(cls, src_w: int, src_h: int, size: int) -> "Letterbox":
        scale = min(size / src_w, size / src_h)
        new_w = min(size, max(1, round(src_w * scale)))
        new_h = min(size, max(1, round(src_h * scale)))
        return cls(src_w, src_h, size, new_w, new_h, (size - new_w) // 2, (size - new_h) // 2)

    @property
    def sx(self) -> float:
        return self.new_w / self.src_w

    @property
    def sy(self) -> float:
        return self.new_h / self.src_h

    def point_to_input(self, x: float, y: float) -> tuple[float, float]:
        """Source pixel coordinates -> network input pixel coordinates."""
        return x * self.sx + self.pad_x, y * self.sy + self.pad_y

    def record_to_box(self, r: AnnotationRecord) -> DetBox:
        return DetBox(r.cx * self.new_w + self.pad_x, r.cy * self.new_h + self.pad_y,
                      r.w * self.new_w, r.h * self.new_h, r.class_id)

    def box_to_source(self, b: DetBox) -> DetBox:
        return DetBox((b.cx - self.pad_x) / self.sx, (b.cy - self.pad_y) / self.sy,
                      b.w / self.sx, b.h / self.sy, b.class_id, b.score)


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Float image -> (C, H, W) with luminance grayscale for C=1."""
    img = to_float(image)
    if channels == 1:
        gray = img @ LUMA if img.ndim == 3 else img
        return gray[None]
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img.transpose(2, 0, 1)


def letterbox_array(chw: np.ndarray, size: int) -> tuple[np.ndarray, Letterbox]:
    c, h, w = chw.shape
    lb = Letterbox.fit(w, h, size)
    ys = np.minimum(((np.arange(lb.new_h) + 0.5) * h / lb.new_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(lb.new_w) + 0.5) * w / lb.new_w).astype(np.int64), w - 1)
    out = np.full((c, size, size), PAD_VALUE)
    out[:, lb.pad_y:lb.pad_y + lb.new_h, lb.pad_x:lb.pad_x + lb.new_w] = chw[:, ys[:, None], xs[None, :]]
    return out, lb


def preprocess(image: np.ndarray, config: ModelConfig) -> tuple[Tensor, Letterbox]:
    """Raster -> (1, C, S, S) input tensor plus the letterbox transform used."""
    img = np.asarray(image)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)) or img.size == 0:
        raise InputError(f"cannot interpret raster of shape {img.shape}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    arr, lb = letterbox_array(to_channels(img, config.input_channels), config.input_size)
    return Tensor(arr[None]), lb


# ---------------------------------------------------------------- samples

@dataclass
class Sample:
    image: np.ndarray                 # float (H, W) or (H, W, 3) in [0, 1]
    records: list[AnnotationRecord]   # already in the strategy's class space
    part: str = ""
    source: str = ""


@dataclass
class DetectionDataset:
    train: list[Sample]
    val: list[Sample]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def load_samples(manifest: DatasetManifest, split: str | None = None) -> list[Sample]:
    entries = manifest.entries if split is None else manifest.split(split)
    samples = []
    for e in entries:
        image_path = manifest.resolve(e.image)
        ann_path = manifest.resolve(e.annotation)
        if not ann_path.exists():
            raise InputError(f"missing annotation file {ann_path} for {image_path}")
        raw = read_annotations(ann_path, len(manifest.defect_types))
        records = apply_label_strategy(raw, manifest.strategy, manifest.defect_types)
        samples.append(Sample(to_float(read_image(image_path)), records, e.part, str(image_path)))
    return samples


def load_dataset(manifest: DatasetManifest, val_split: str = "test") -> DetectionDataset:
    train = load_samples(manifest, "train")
    val = load_samples(manifest, val_split)
    return DetectionDataset(train, val, manifest.class_names)
