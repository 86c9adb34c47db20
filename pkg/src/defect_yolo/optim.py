"""Adam with decoupled weight decay, plateau step decay, early stopping, grid search."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ArgumentError, ConfigError, TrainingError
from .tensor import Tensor

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6
PLATEAU_REL_TOL = 1e-4


@dataclass
class AdamState:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor | np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One Adam update, in place.

    Weight decay is decoupled: ``theta -= alpha * wd * theta`` happens before
    the moment-based step. Returns ``(params, state)`` for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        theta = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            theta -= state.alpha * state.weight_decay * theta
        m_hat = m / c1
        v_hat = v / c2
        theta -= state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    weight_decay: float = 0.0005
    max_epochs: int = 200
    decay_factor: float = 0.1
    plateau_patience: int = 10
    stop_patience: int = 20
    seed: int = 0
    augment: tuple[str, ...] = ("hflip", "rotate", "scale", "translate", "color_jitter", "random_crop")

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        for name in ("learning_rate", "batch_size", "max_epochs", "decay_factor",
                     "plateau_patience", "stop_patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.stop_patience < self.plateau_patience:
            raise ConfigError("stop_patience must be >= plateau_patience")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    val_loss: float
    val_map: float


class ValHistory(list):
    """Ordered ``EpochRecord`` list with strictly increasing epochs."""

    def append(self, record: EpochRecord) -> None:
        if self and record.epoch <= self[-1].epoch:
            raise ArgumentError(f"epoch {record.epoch} does not follow {self[-1].epoch}")
        super().append(record)

    def add(self, epoch: int, val_loss: float, val_map: float) -> None:
        self.append(EpochRecord(epoch, val_loss, val_map))


def _epochs_without_loss_improvement(history, start: int) -> int:
    best = math.inf
    stale = 0
    for k, rec in enumerate(history):
        if not math.isfinite(best) or rec.val_loss < best - PLATEAU_REL_TOL * abs(best):
            best = rec.val_loss
            stale = 0
        elif k >= start:
            # epochs up to the last decay only set the running best
            stale += 1
    return stale


def step_decay(lr: float, history, config: TrainConfig, last_decay: int = -1) -> float:
    """Decay ``lr`` once validation loss has stalled for ``plateau_patience`` epochs.

    ``last_decay`` is the index in ``history`` of the epoch at which the
    previous decay fired; the stall counter restarts there.
    """
    if not history:
        raise ArgumentError("step_decay needs a nonempty history")
    stale = _epochs_without_loss_improvement(history, last_decay + 1)
    if stale >= config.plateau_patience:
        return max(lr * config.decay_factor, LR_FLOOR) if lr > LR_FLOOR else lr
    return lr


def early_stop(history, stop_patience: int) -> bool:
    """True once the best validation mAP is ``stop_patience`` epochs old."""
    if not history:
        raise ArgumentError("early_stop needs a nonempty history")
    maps = [rec.val_map for rec in history]
    best_index = int(np.argmax(maps))
    return len(maps) - 1 - best_index >= stop_patience


@dataclass
class TrialResult:
    index: int
    config: TrainConfig
    val_map: float
    val_loss: float


@dataclass
class GridSearchResult:
    best: TrainConfig
    trials: list[TrialResult]

    def table(self) -> str:
        lines = ["index,learning_rate,weight_decay,batch_size,val_mAP,val_loss"]
        for r in self.trials:
            c = r.config
            lines.append(f"{r.index},{c.learning_rate!r},{c.weight_decay!r},{c.batch_size},"
                         f"{r.val_map!r},{r.val_loss!r}")
        return "\n".join(lines)


def expand_grid(base: TrainConfig, axes: Mapping[str, list]) -> list[TrainConfig]:
    """Cartesian product of ``axes`` values over ``base``."""
    unknown = set(axes) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    names = list(axes)
    return [replace(base, **dict(zip(names, combo)))
            for combo in itertools.product(*(axes[n] for n in names))]


DEFAULT_GRID = {"learning_rate": [1e-2, 1e-3, 1e-4], "weight_decay": [0.0, 5e-4]}


def grid_search(grid: list[TrainConfig], budget_epochs: int,
                train_eval_fn: Callable[[TrainConfig, int], tuple[float, float]],
                workers: int = 1) -> GridSearchResult:
    """Run every config for ``budget_epochs`` and rank by final val mAP.

    ``train_eval_fn(config, epochs)`` returns ``(val_map, val_loss)``. Ties on
    mAP go to the lower val loss, then to the earlier grid entry.
    """
    if not grid:
        raise ArgumentError("grid search needs at least one config")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(train_eval_fn, grid, [budget_epochs] * len(grid)))
    else:
        outcomes = [train_eval_fn(cfg, budget_epochs) for cfg in grid]
    trials = [TrialResult(k, cfg, float(m), float(l)) for k, (cfg, (m, l)) in enumerate(zip(grid, outcomes))]
    for t in trials:
        log.info("trial %d: lr=%g wd=%g -> mAP %.4f loss %.4f",
                 t.index, t.config.learning_rate, t.config.weight_decay, t.val_map, t.val_loss)
    winner = min(trials, key=lambda t: (-t.val_map, t.val_loss, t.index))
    return GridSearchResult(winner.config, trials)
