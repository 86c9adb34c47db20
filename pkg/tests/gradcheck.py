"""Central finite-difference checks against tape gradients (float64 only)."""

from __future__ import annotations

import numpy as np

from defect_yolo import tensor as T

H = 1e-4
REL_TOL = 1e-4


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def tape_grads(fn, arrays):
    """Gradients of ``fn(*tensors)`` (a scalar Tensor) with respect to each array."""
    leaves = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def numeric_grads(fn, arrays, h=H):
    def value(arrs):
        with T.no_grad():
            return fn(*[T.Tensor(a, dtype=np.float64) for a in arrs]).item()

    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (value(plus) - value(minus)) / (2 * h)
        out.append(g)
    return out


def check(fn, arrays, tol=REL_TOL) -> float:
    """Worst relative error over all inputs; asserts it stays below ``tol``."""
    with T.default_dtype(np.float64):
        analytic = tape_grads(fn, arrays)
        numeric = numeric_grads(fn, arrays)
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"relative error {worst:.3e} >= {tol}"
    return worst


def weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    """Reduce a tensor to a scalar with fixed random weights so every entry matters."""
    return T.sum(T.mul(out, T.Tensor(w.reshape(out.shape), dtype=np.float64)))


def away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Push entries out of ``margin`` neighbourhoods of kink ``points``."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def directional_check(loss_fn, params: dict, rng, trials: int = 20, h: float = 1e-5) -> list[float]:
    """Compare grad . d against a central difference along random unit directions ``d``."""
    names = list(params)
    with T.default_dtype(np.float64):
        with T.Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        grads = {n: params[n].grad.copy() if params[n].grad is not None else np.zeros_like(params[n].data)
                 for n in names}
        errs = []
        for _ in range(trials):
            d = {n: rng.normal(size=params[n].data.shape) for n in names}
            norm = np.sqrt(sum((v ** 2).sum() for v in d.values()))
            analytic = sum((grads[n] * d[n]).sum() for n in names) / norm
            base = {n: params[n].data.copy() for n in names}
            vals = []
            for sign in (1.0, -1.0):
                for n in names:
                    params[n].data[...] = base[n] + sign * h * d[n] / norm
                with T.no_grad():
                    vals.append(loss_fn().item())
            for n in names:
                params[n].data[...] = base[n]
            numeric = (vals[0] - vals[1]) / (2 * h)
            errs.append(abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8))
    return errs


# ---------------------------------------------------------------- per-op cases
# Each builder draws one random trial: returns (scalar fn of tensors, input arrays).

def _unary(op, kinks=None):
    def build(rng):
        x = rng.normal(size=(2, 3))
        if kinks == "positive":
            x = np.abs(x) + 0.2
        elif kinks:
            x = away_from(x, kinks, 1e-2)
        w = rng.normal(size=op(T.Tensor(x, dtype=np.float64)).shape)
        return (lambda a: weighted(op(a), w)), [x]
    return build


def _binary(op, name):
    def build(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        if name == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        if name in ("minimum", "maximum"):
            b = a + np.sign(b - a) * (np.abs(b - a) + 1e-2)
        w = rng.normal(size=(2, 3))
        return (lambda x, y: weighted(op(x, y), w)), [a, b]
    return build


def _scalar_operands(rng):
    x, w = rng.normal(size=(3,)), rng.normal(size=(3,))
    s = float(rng.uniform(0.5, 2.0))
    return (lambda a: weighted(T.div(T.sub(T.mul(T.add(a, s), s), s), s), w)), [x]


def _bce(rng):
    return (lambda a, t: T.sum(T.bce(T.sigmoid(a), t))), [rng.normal(size=(6,)), rng.uniform(size=6)]


def _concat(rng):
    a, b = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 3, 2, 2))
    w = rng.normal(size=(1, 5, 2, 2))
    return (lambda x, y: weighted(T.concat([x, y], axis=1), w)), [a, b]


def _split_channels(rng):
    ws = [rng.normal(size=(1, 2, 2, 2)) for _ in range(3)]

    def fn(t):
        parts = T.split_channels(t, 3)
        total = weighted(parts[0], ws[0])
        for p, wp in zip(parts[1:], ws[1:]):
            total = T.add(total, weighted(p, wp))
        return total
    return fn, [rng.normal(size=(1, 6, 2, 2))]


def _split_at(rng):
    w2 = [rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 5, 2, 2))]
    return (lambda t: T.add(*[weighted(p, wp) for p, wp in zip(T.split_at(t, [1, 5]), w2)])), \
        [rng.normal(size=(1, 6, 2, 2))]


def _conv(stride, pad):
    def build(rng):
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        shape = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).shape
        wt = rng.normal(size=shape)
        return (lambda a, k, c: weighted(T.conv2d(a, k, c, stride, pad), wt)), [x, w, b]
    return build


def _pool(k, stride, pad):
    def build(rng):
        # distinct values spaced well beyond h so no window max flips under perturbation
        x = rng.permutation(np.arange(2 * 36, dtype=np.float64)).reshape(1, 2, 6, 6) * 0.1
        wt = rng.normal(size=T.maxpool2d(T.Tensor(x), k, stride, pad).shape)
        return (lambda a: weighted(T.maxpool2d(a, k, stride, pad), wt)), [x]
    return build


def _upsample(rng):
    wt = rng.normal(size=(1, 2, 4, 6))
    return (lambda a: weighted(T.upsample_nearest(a, 2), wt)), [rng.normal(size=(1, 2, 2, 3))]


OP_CASES = {
    "neg": _unary(T.neg),
    "exp": _unary(T.exp),
    "log": _unary(T.log, "positive"),
    "sigmoid": _unary(T.sigmoid),
    "leaky_relu": _unary(T.leaky_relu, [0.0]),
    "clip": _unary(lambda a: T.clip(a, -0.5, 0.5), [-0.5, 0.5]),
    "sum": _unary(T.sum),
    "mean": _unary(T.mean),
    "reshape": _unary(lambda a: T.reshape(a, (3, 2))),
    "take": _unary(lambda a: T.take(a, [0, 3, 3, 5, 1])),
    **{name: _binary(op, name) for name, op in (("add", T.add), ("sub", T.sub), ("mul", T.mul), ("div", T.div),
                                                ("minimum", T.minimum), ("maximum", T.maximum))},
    "scalar_operands": _scalar_operands,
    "bce": _bce,
    "concat": _concat,
    "split_channels": _split_channels,
    "split_at": _split_at,
    "conv2d_s1p0": _conv(1, 0),
    "conv2d_s1p1": _conv(1, 1),
    "conv2d_s2p1": _conv(2, 1),
    "maxpool_k2s2": _pool(2, 2, 0),
    "maxpool_k3s1": _pool(3, 1, 1),
    "maxpool_k5s1": _pool(5, 1, 2),
    "upsample": _upsample,
}


def worst_op_error(name: str, trials: int = 20, seed: int = 0) -> float:
    """Largest relative error over ``trials`` random draws of one op case."""
    rng = np.random.default_rng([seed, sorted(OP_CASES).index(name)])
    worst = 0.0
    with T.default_dtype(np.float64):
        for _ in range(trials):
            fn, arrays = OP_CASES[name](rng)
            worst = max(worst, rel_err_all(fn, arrays))
    return worst


def rel_err_all(fn, arrays) -> float:
    analytic = tape_grads(fn, arrays)
    numeric = numeric_grads(fn, arrays)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def tiny_loss_problem(seed: int = 0):
    """float64 tiny detector (input 32, width 8, 3 classes) with a fixed two-image target.

    Returns the parameter dict and a zero-argument closure computing total_loss.
    """
    from defect_yolo.boxes import DetBox
    from defect_yolo.loss import TargetMap, assign_targets, total_loss
    from defect_yolo.model import Detector, ModelConfig

    cfg = ModelConfig(input_size=32, num_classes=3, width=8, seed=seed)
    with T.default_dtype(np.float64):
        model = Detector(cfg)
        x = T.Tensor(np.random.default_rng(seed).uniform(size=(2, 1, 32, 32)))
    tmap = TargetMap.stack([
        assign_targets([DetBox(10, 12, 9, 7, 0), DetBox(22, 20, 14, 12, 2)], cfg),
        assign_targets([DetBox(16, 16, 26, 20, 1)], cfg),
    ])
    return model.parameters(), lambda: total_loss(model(x), tmap)
