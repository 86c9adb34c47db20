"""Dense NCHW tensors with a reverse-mode gradient tape.

Every op takes and returns :class:`Tensor`. When a :class:`Tape` is active on
the current thread and any input has ``requires_grad`` set, the op appends a
node holding its backward rule. ``Tape.backward`` walks those nodes in reverse
recording order, which is a valid topological order by construction.

Typical use::

    with Tape() as tape:
        loss = total_loss(model(x), targets, weights)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading
from builtins import sum as builtins_sum
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, StateError

LEAKY_SLOPE = 0.1
BCE_EPS = 1e-7

_state = threading.local()


def _local():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.tape = None
    return _state


def get_default_dtype():
    return _local().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ArgumentError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _local().dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch precision, e.g. ``float64`` for gradient checks."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars are the only broadcastable operand
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable ops executed while it is the active tape."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._previous = None

    def __enter__(self) -> "Tape":
        local = _local()
        self._previous = local.tape
        local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local().tape = self._previous

    def record(self, node: _Node) -> None:
        if self._consumed:
            raise StateError("tape already consumed by backward()")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    return _local().tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    local = _local()
    previous = local.tape
    local.tape = None
    try:
        yield
    finally:
        local.tape = previous


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The tape is cleared
    afterwards and cannot be replayed.
    """
    if loss.size != 1:
        raise ArgumentError(f"loss must be a scalar, got shape {loss.shape}")
    if tape._consumed:
        raise StateError("tape already consumed by backward()")
    if loss._node is None or not any(node is loss._node for node in reversed(tape.nodes)):
        raise StateError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = g.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + g
            else:
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
    tape.nodes.clear()
    tape._consumed = True


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _local().tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(inputs, out, rule)
        out._node = node
        tape.record(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    _check_same(a, b, "mul")
    x, y = a.data, b.data
    return _make(x * y, (a, b), lambda g: (g * y, g * x))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(b)
        return _make(a.data / s, (a,), lambda g: (g / s,))
    _check_same(a, b, "div")
    x, y = a.data, b.data
    return _make(x / y, (a, b), lambda g: (g / y, -g * x / (y * y)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    pos = x > 0
    out = np.where(pos, x, x * x.dtype.type(slope))
    return _make(out, (a,), lambda g: (np.where(pos, g, g * x.dtype.type(slope)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "maximum")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def bce(p: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy with ``p`` clamped to [1e-7, 1-1e-7]."""
    t_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=p.data.dtype)
    if t_data.shape != p.shape:
        raise DimensionError(f"bce: shape mismatch {p.shape} vs {t_data.shape}")
    x = p.data
    pc = np.clip(x, BCE_EPS, 1.0 - BCE_EPS)
    out = -(t_data * np.log(pc) + (1.0 - t_data) * np.log(1.0 - pc))
    inside = (x >= BCE_EPS) & (x <= 1.0 - BCE_EPS)

    def rule(g):
        gp = g * (pc - t_data) / (pc * (1.0 - pc)) * inside
        gt = g * (np.log(1.0 - pc) - np.log(pc))
        return (gp, gt) if isinstance(target, Tensor) else (gp,)

    inputs = (p, target) if isinstance(target, Tensor) else (p,)
    return _make(out.astype(x.dtype), inputs, rule)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sub": sub,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "bce": bce,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, mul, sub, leaky_relu, sigmoid, bce."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ArgumentError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("leaky_relu", "sigmoid"):
        return fn(a)
    if b is None:
        raise ArgumentError(f"{kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array([a.data.sum()], dtype=a.data.dtype), (a,),
                 lambda g: (np.full(shape, g[0], dtype=a.data.dtype),))


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, flat_index) -> Tensor:
    """Gather entries of ``a`` (viewed flat) at ``flat_index``; 1-D result."""
    idx = np.asarray(flat_index, dtype=np.int64).reshape(-1)
    shape, dtype = a.shape, a.data.dtype

    def rule(g):
        out = np.zeros(a.size, dtype=dtype)
        np.add.at(out, idx, g)
        return (out.reshape(shape),)

    return _make(a.data.reshape(-1)[idx], (a,), rule)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(parts) == 0:
        raise ArgumentError("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat: {p.shape} incompatible with {ref} on axis {axis}")
    if len(parts) == 1:
        return _make(parts[0].data.copy(), (parts[0],), lambda g: (g,))
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split_channels(x: Tensor, n: int) -> list[Tensor]:
    if n < 1 or x.shape[1] % n:
        raise DimensionError(f"cannot split {x.shape[1]} channels into {n} parts")
    step = x.shape[1] // n
    parts = []
    for i in range(n):
        lo, hi = i * step, (i + 1) * step

        def rule(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        parts.append(_make(x.data[:, lo:hi].copy(), (x,), rule))
    return parts


def split_at(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along channels into consecutive ranges of the given sizes."""
    if builtins_sum(sizes) != x.shape[1] or any(s < 1 for s in sizes):
        raise DimensionError(f"cannot split {x.shape[1]} channels into sizes {list(sizes)}")
    parts, lo = [], 0
    for size in sizes:
        hi = lo + size

        def rule(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        parts.append(_make(x.data[:, lo:hi].copy(), (x,), rule))
        lo = hi
    return parts


# ---------------------------------------------------------------- spatial

def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise ArgumentError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # windows: (N, Cin, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,Cout
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def rule(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # Cout,Cin,kh,kw
        cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N,Ho,Wo,Cin,kh,kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, rule)


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    if k < 1 or stride < 1:
        raise ArgumentError("maxpool2d: k and stride must be >= 1")
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"maxpool2d: window {k} larger than padded input {h}x{w} (pad {padding})")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # first maximal index wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for pos in range(k * k):
            sel = arg == pos
            if not sel.any():
                continue
            i, j = divmod(pos, k)
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _make(np.ascontiguousarray(out), (x,), rule)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ArgumentError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))
