import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from defect_yolo.data import DetectionDataset, LabelStrategy, Sample, apply_label_strategy, to_float  # noqa: E402
from defect_yolo.loss import LossWeights  # noqa: E402
from defect_yolo.model import Detector, ModelConfig  # noqa: E402
from defect_yolo.optim import TrainConfig  # noqa: E402
from defect_yolo.synth import GenSpec, plan_images, render_planned  # noqa: E402
from defect_yolo.train import TrainResult, train_loop  # noqa: E402

# 8 images, 2 classes, desk-scale input. The confidence term is averaged over
# all 336 cells, so lambda_obj = cells turns it back into a per-image sum;
# with lambda_obj = 1 objectness barely moves in 300 epochs.
OVERFIT_GEN = GenSpec(counts={("bearing", "scratch"): 4, ("bearing", "crack"): 4}, seed=1)
OVERFIT_MODEL = ModelConfig(input_size=128, num_classes=2, width=8)
OVERFIT_TRAIN = TrainConfig(learning_rate=5e-3, batch_size=2, weight_decay=0.0, max_epochs=300,
                            plateau_patience=30, stop_patience=300, augment=())
OVERFIT_WEIGHTS = LossWeights(lambda_obj=float(OVERFIT_MODEL.num_cells()))


def overfit_samples(spec: GenSpec = OVERFIT_GEN):
    """In-memory samples (plus the generator output) for the overfit set."""
    strategy = LabelStrategy("type_based", spec.defect_types())
    samples, rendered = [], []
    for k, (part, defect) in enumerate(plan_images(spec)):
        g = render_planned(spec, k, part, defect)
        rendered.append(g)
        samples.append(Sample(to_float(g.image), apply_label_strategy(g.records, strategy), part))
    return samples, strategy.class_names, rendered


@dataclass
class OverfitRun:
    result: TrainResult
    dataset: DetectionDataset
    rendered: list
    seconds: float


@pytest.fixture(scope="session")
def overfit_run() -> OverfitRun:
    samples, names, rendered = overfit_samples()
    ds = DetectionDataset(samples, samples, names)
    start = time.perf_counter()
    res = train_loop(Detector(OVERFIT_MODEL), ds, OVERFIT_TRAIN, OVERFIT_WEIGHTS)
    return OverfitRun(res, ds, rendered, time.perf_counter() - start)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
        lines[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
