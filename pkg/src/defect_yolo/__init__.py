"""Lightweight anchor-free defect detector built on a small numpy autodiff core."""

from .boxes import DetBox, iou
from .model import Detector, ModelConfig, decode, forward
from .tensor import Tensor, backward

__all__ = ["DetBox", "Detector", "ModelConfig", "Tensor", "backward", "decode", "forward", "iou"]
__version__ = "0.1.0"
