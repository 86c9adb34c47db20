"""Detector network: ResC2Net backbone, SPPF, PConv neck, anchor-free heads.

Layout for the default strides (8, 16, 32) and base width ``w``::

    stem   conv3x3/2 (w/2) -> conv3x3/2 (w)                         stride 4
    C3     conv3x3/2 (w)   -> ResC2Net                              stride 8
    C4     conv3x3/2 (2w)  -> ResC2Net                              stride 16
    C5     conv3x3/2 (4w)  -> ResC2Net -> SPPF                      stride 32
    P4     concat(up2(C5), C4) -> PConv -> conv1x1 (2w)
    P3     concat(up2(P4), C3) -> PConv -> conv1x1 (w)
    heads  conv1x1 -> 5 + num_classes per level
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import tensor as T
from .boxes import DetBox
from .errors import ArgumentError, ConfigError, DimensionError
from .tensor import Tensor

DEFAULT_STRIDES = (8, 16, 32)
TW_CLAMP = 8.0


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 160
    input_channels: int = 1
    num_classes: int = 7
    strides: tuple[int, ...] = DEFAULT_STRIDES
    width: int = 16
    resc2net_n: int = 4
    sppf_kernels: tuple[int, ...] = (5, 9, 13)
    pconv_ratio: Fraction = Fraction(1, 4)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "sppf_kernels", tuple(int(k) for k in self.sppf_kernels))
        object.__setattr__(self, "pconv_ratio", Fraction(self.pconv_ratio))
        self.validate()

    def validate(self) -> None:
        if self.strides != DEFAULT_STRIDES:
            raise ConfigError(f"strides must be {list(DEFAULT_STRIDES)}, got {list(self.strides)}")
        if self.input_size <= 0 or self.input_size % max(self.strides):
            raise ConfigError(f"input_size {self.input_size} not divisible by {max(self.strides)}")
        if self.input_channels not in (1, 3):
            raise ConfigError("input_channels must be 1 or 3")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0 < self.pconv_ratio <= 1:
            raise ConfigError("pconv_ratio must lie in (0, 1]")
        if self.width < 2 or self.width % 2:
            raise ConfigError("width must be a positive even number")
        if self.width % self.resc2net_n:
            raise ConfigError(f"width {self.width} not divisible by resc2net_n {self.resc2net_n}")
        if self.width % self.pconv_ratio.denominator:
            raise ConfigError(f"width {self.width} not divisible by pconv_ratio denominator")
        for k in self.sppf_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"sppf kernels must be odd, got {k}")

    def grid_sizes(self) -> list[int]:
        return [self.input_size // s for s in self.strides]

    def num_cells(self) -> int:
        """Prediction cells per image across all scales."""
        return sum(g * g for g in self.grid_sizes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["sppf_kernels"] = list(self.sppf_kernels)
        d["pconv_ratio"] = str(self.pconv_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "pconv_ratio" in d:
            d["pconv_ratio"] = Fraction(str(d["pconv_ratio"]))
        return cls(**d)


@dataclass
class PredGrid:
    """Raw head output for one stride; channels are tx, ty, tw, th, obj, classes."""

    stride: int
    tensor: Tensor

    @property
    def size(self) -> int:
        return self.tensor.shape[2]


# ---------------------------------------------------------------- layers

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    gain = math.sqrt(2.0 / (1.0 + T.LEAKY_SLOPE ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    """Conv with bias and optional leaky-relu; 'same' padding for odd kernels."""

    def __init__(self, rng, cin: int, cout: int, k: int = 1, stride: int = 1, act: bool = True):
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = k // 2
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        return T.leaky_relu(y) if self.act else y


class ResC2Net(Module):
    """Split-and-cascade residual block.

    A 1x1 conv feeds ``n`` channel groups. Group 1 passes through; group
    ``i >= 2`` becomes ``s_i + conv3x3(s_i + y_{i-1})``. The groups are
    concatenated, fused by a 1x1 conv, and added back to the block input.
    """

    def __init__(self, rng, channels: int, n: int):
        if channels % n:
            raise DimensionError(f"channels {channels} not divisible by n={n}")
        self.n = n
        self.conv_in = Conv(rng, channels, channels, 1)
        self.branches = [Conv(rng, channels // n, channels // n, 3) for _ in range(n - 1)]
        self.conv_out = Conv(rng, channels, channels, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return resc2net_block(x, self.n, self)


def resc2net_block(x: Tensor, n: int, block: ResC2Net) -> Tensor:
    if x.shape[1] % n:
        raise DimensionError(f"channels {x.shape[1]} not divisible by n={n}")
    parts = T.split_channels(block.conv_in(x), n)
    outs = [parts[0]]
    for s, conv in zip(parts[1:], block.branches):
        outs.append(T.add(s, conv(T.add(s, outs[-1]))))
    fused = block.conv_out(T.concat(outs, axis=1))
    return T.add(x, fused) if fused.shape == x.shape else fused


class PConv(Module):
    """3x3 conv over the leading ``channels * ratio`` channels; the rest pass through."""

    def __init__(self, rng, channels: int, ratio: Fraction):
        part = Fraction(channels) * Fraction(ratio)
        if part.denominator != 1 or part < 1:
            raise DimensionError(f"{channels} * {ratio} is not a positive integer")
        self.channels = channels
        self.part = int(part)
        self.conv = Conv(rng, self.part, self.part, 3, act=False)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"PConv built for {self.channels} channels, got {x.shape[1]}")
        if self.part == self.channels:
            return self.conv(x)
        head, tail = T.split_at(x, [self.part, self.channels - self.part])
        return T.concat([self.conv(head), tail], axis=1)


def pconv(x: Tensor, layer: PConv) -> Tensor:
    return layer(x)


class SPPF(Module):
    """Identity plus parallel same-size max pools, concatenated then projected."""

    def __init__(self, rng, channels: int, kernels=(5, 9, 13)):
        for k in kernels:
            if k % 2 == 0:
                raise ArgumentError(f"SPPF kernel must be odd, got {k}")
        self.kernels = tuple(kernels)
        self.project = Conv(rng, channels * (1 + len(self.kernels)), channels, 1)

    def branches(self, x: Tensor) -> Tensor:
        pooled = [T.maxpool2d(x, k, 1, (k - 1) // 2) for k in self.kernels]
        return T.concat([x, *pooled], axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(self.branches(x))


def sppf(x: Tensor, layer: SPPF) -> Tensor:
    return layer(x)


class Detector(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        w, n, r = config.width, config.resc2net_n, config.pconv_ratio
        head_out = 5 + config.num_classes
        self.stem1 = Conv(rng, config.input_channels, w // 2, 3, 2)
        self.stem2 = Conv(rng, w // 2, w, 3, 2)
        self.down3 = Conv(rng, w, w, 3, 2)
        self.block3 = ResC2Net(rng, w, n)
        self.down4 = Conv(rng, w, 2 * w, 3, 2)
        self.block4 = ResC2Net(rng, 2 * w, n)
        self.down5 = Conv(rng, 2 * w, 4 * w, 3, 2)
        self.block5 = ResC2Net(rng, 4 * w, n)
        self.sppf = SPPF(rng, 4 * w, config.sppf_kernels)
        self.pconv4 = PConv(rng, 6 * w, r)
        self.fuse4 = Conv(rng, 6 * w, 2 * w, 1)
        self.pconv3 = PConv(rng, 3 * w, r)
        self.fuse3 = Conv(rng, 3 * w, w, 1)
        self.head3 = Conv(rng, w, head_out, 1, act=False)
        self.head4 = Conv(rng, 2 * w, head_out, 1, act=False)
        self.head5 = Conv(rng, 4 * w, head_out, 1, act=False)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def __call__(self, image: Tensor) -> list[PredGrid]:
        return forward(self, image)


def forward(model: Detector, image: Tensor) -> list[PredGrid]:
    cfg = model.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if image.data.ndim != 4 or image.shape[1:] != expected:
        raise DimensionError(f"expected input (N, {', '.join(map(str, expected))}), got {image.shape}")
    x = model.stem2(model.stem1(image))
    c3 = model.block3(model.down3(x))
    c4 = model.block4(model.down4(c3))
    p5 = model.sppf(model.block5(model.down5(c4)))
    p4 = model.fuse4(model.pconv4(T.concat([T.upsample_nearest(p5, 2), c4], axis=1)))
    p3 = model.fuse3(model.pconv3(T.concat([T.upsample_nearest(p4, 2), c3], axis=1)))
    return [
        PredGrid(cfg.strides[0], model.head3(p3)),
        PredGrid(cfg.strides[1], model.head4(p4)),
        PredGrid(cfg.strides[2], model.head5(p5)),
    ]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def decode(grid: PredGrid, index: int = 0, conf_thresh: float = 0.0) -> list[DetBox]:
    """Turn one image's raw grid into boxes with ``score > conf_thresh``.

    Boxes are ordered row-major by cell.
    """
    raw = grid.tensor.data[index].astype(np.float64)
    s = grid.stride
    size = raw.shape[1]
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    cx = (jj + _sigmoid(raw[0])) * s
    cy = (ii + _sigmoid(raw[1])) * s
    w = np.exp(np.clip(raw[2], -TW_CLAMP, TW_CLAMP)) * s
    h = np.exp(np.clip(raw[3], -TW_CLAMP, TW_CLAMP)) * s
    obj = _sigmoid(raw[4])
    cls_prob = _sigmoid(raw[5:])
    cls = cls_prob.argmax(axis=0)
    conf = obj * cls_prob.max(axis=0)
    keep = np.flatnonzero(conf.reshape(-1) > conf_thresh)
    flat = [a.reshape(-1) for a in (cx, cy, w, h, cls, conf)]
    return [DetBox(float(flat[0][k]), float(flat[1][k]), float(flat[2][k]), float(flat[3][k]),
                   int(flat[4][k]), float(flat[5][k])) for k in keep]


def decode_all(grids: list[PredGrid], index: int = 0, conf_thresh: float = 0.0) -> list[DetBox]:
    out: list[DetBox] = []
    for g in grids:
        out.extend(decode(g, index, conf_thresh))
    return out
