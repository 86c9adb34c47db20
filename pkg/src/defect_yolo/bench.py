"""Latency and FPS benchmark over generated scenarios."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .data import preprocess
from .errors import ArgumentError
from .inference import postprocess
from .metrics import DEFAULT_CONF, DEFAULT_NMS_IOU
from .model import Detector
from .synth import generate_sample
from .taxonomy import PART_DEFECTS, SEVERITIES
from .tensor import no_grad

DEFAULT_WARMUP = 5


@dataclass(frozen=True)
class Scenario:
    name: str
    size: tuple[int, int]  # (width, height) of the generated raster
    textured: bool = False
    defects: tuple[int, int] = (1, 1)  # inclusive range of defects per image


SCENARIOS = {
    "simple": Scenario("simple", (1280, 720)),
    "complex": Scenario("complex", (1280, 720), textured=True, defects=(1, 3)),
    "multi_target": Scenario("multi_target", (1280, 720), defects=(5, 10)),
    "high_res": Scenario("high_res", (1920, 1080)),
}


@dataclass(frozen=True)
class BenchRow:
    scenario: str
    input_size: str
    n_images: int
    warmup: int
    avg_ms: float
    p50_ms: float
    p95_ms: float
    fps: float

    @classmethod
    def from_times(cls, scenario: str, input_size: str, times_ms: Sequence[float], warmup: int) -> "BenchRow":
        if len(times_ms) == 0:
            raise ArgumentError("no timed samples")
        t = np.asarray(times_ms, dtype=np.float64)
        avg = float(t.mean())
        return cls(scenario, input_size, len(t), warmup, avg,
                   float(np.percentile(t, 50)), float(np.percentile(t, 95)), round(1000.0 / avg, 1))


@dataclass
class BenchReport:
    rows: list[BenchRow]
    times_ms: dict[str, list[float]]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def table(self) -> str:
        head = f"{'Scenario':<14}{'Input':>11}{'N':>6}{'Avg (ms)':>11}{'p50 (ms)':>11}{'p95 (ms)':>11}{'FPS':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.scenario:<14}{r.input_size:>11}{r.n_images:>6}{r.avg_ms:>11.2f}"
                         f"{r.p50_ms:>11.2f}{r.p95_ms:>11.2f}{r.fps:>8.1f}")
        return "\n".join(lines)


def scenario_images(scenario: str, n: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded rasters for a scenario; parts cycle through the known kinds."""
    if scenario not in SCENARIOS:
        raise ArgumentError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    sc = SCENARIOS[scenario]
    parts = list(PART_DEFECTS)
    images = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        part = parts[k % len(parts)]
        count = int(rng.integers(sc.defects[0], sc.defects[1] + 1))
        options = PART_DEFECTS[part]
        defects = [(options[int(rng.integers(len(options)))], SEVERITIES[int(rng.integers(len(SEVERITIES)))])
                   for _ in range(count)]
        images.append(generate_sample(part, defects, sc.size, rng, textured=sc.textured).image)
    return images


def detect_once(model: Detector, image: np.ndarray, conf_thresh: float = DEFAULT_CONF,
                nms_iou: float = DEFAULT_NMS_IOU):
    """The timed unit: preprocess, forward, decode and NMS for one raster."""
    x, _ = preprocess(image, model.config)
    with no_grad():
        grids = model(x)
    return postprocess(grids, 0, conf_thresh, nms_iou)


def bench_latency(model: Detector, scenario: str, n_images: int, warmup: int = DEFAULT_WARMUP,
                  seed: int = 0, clock: Callable[[], float] = time.perf_counter,
                  images: Sequence[np.ndarray] | None = None) -> tuple[BenchRow, list[float]]:
    """Time ``n_images`` detections after ``warmup`` untimed ones.

    ``clock`` returns seconds from a monotonic source; tests inject a fake.
    """
    if n_images < 1:
        raise ArgumentError(f"n_images must be >= 1, got {n_images}")
    if warmup < 0:
        raise ArgumentError(f"warmup must be >= 0, got {warmup}")
    if images is None:
        images = scenario_images(scenario, n_images, seed)
    for k in range(warmup):
        detect_once(model, images[k % len(images)])
    times = []
    for k in range(n_images):
        img = images[k % len(images)]
        start = clock()
        detect_once(model, img)
        times.append((clock() - start) * 1000.0)
    h, w = np.asarray(images[0]).shape[:2]
    return BenchRow.from_times(scenario, f"{w}x{h}", times, warmup), times


def run_bench(model: Detector, scenarios: Sequence[str], n_images: int, warmup: int = DEFAULT_WARMUP,
              seed: int = 0, clock: Callable[[], float] = time.perf_counter) -> BenchReport:
    rows, times = [], {}
    for name in scenarios:
        row, t = bench_latency(model, name, n_images, warmup, seed, clock)
        rows.append(row)
        times[name] = t
    return BenchReport(rows, times)
