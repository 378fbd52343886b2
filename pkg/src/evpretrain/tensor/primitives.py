"""Random single-node graphs for checking every differentiable node kind."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import Graph, Node, Tensor
from .gradcheck import GradCheckReport, grad_check


def _p(g: Graph, rng: np.random.Generator, shape, name: str, scale: float = 1.0, positive: bool = False) -> Node:
    data = rng.uniform(0.2, 1.5, size=shape) if positive else rng.normal(scale=scale, size=shape)
    return g.param(Tensor(data, requires_grad=True), name=name)


def _finish(g: Graph, rng: np.random.Generator, out: Node, shape) -> Node:
    # random projection makes the loss sensitive to every output element
    w = g.constant(rng.normal(size=shape))
    return g.sum(g.multiply(out, w), name="loss")


def _dims(rng, n, lo=1, hi=4):
    return tuple(int(x) for x in rng.integers(lo, hi + 1, size=n))


def _case_binary(kind):
    def build(rng):
        g = Graph()
        shape = _dims(rng, int(rng.integers(1, 4)))
        # exercise broadcasting on the second operand
        bshape = tuple(1 if rng.random() < 0.3 else n for n in shape)
        a, b = _p(g, rng, shape, "a"), _p(g, rng, bshape, "b")
        out = getattr(g, kind)(a, b)
        return g, _finish(g, rng, out, shape)
    return build


def _case_unary(kind, positive=False, away_from_zero=False):
    def build(rng):
        g = Graph()
        shape = _dims(rng, int(rng.integers(1, 4)))
        data = rng.uniform(0.1, 2.0, size=shape) if positive else rng.normal(size=shape)
        if away_from_zero:
            data = np.where(np.abs(data) < 0.05, 0.05 * np.sign(data) + data, data)
        x = g.param(Tensor(data, requires_grad=True), name="x")
        out = getattr(g, kind)(x)
        return g, _finish(g, rng, out, shape)
    return build


def _case_matmul(rng):
    g = Graph()
    m, k, n = _dims(rng, 3)
    batch = _dims(rng, int(rng.integers(0, 2)), 1, 3)
    a = _p(g, rng, batch + (m, k), "a")
    b = _p(g, rng, (k, n), "b")
    out = g.matmul(a, b)
    return g, _finish(g, rng, out, batch + (m, n))


def _case_correlate(rng):
    g = Graph()
    b_ = int(rng.integers(1, 3))
    h, w = _dims(rng, 2, 4, 7)
    c, o = _dims(rng, 2, 1, 3)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    x = _p(g, rng, (b_, h, w, c), "x")
    wt = _p(g, rng, (k, k, c, o), "w")
    out = g.correlate2d(x, wt, stride=stride, pad=pad)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return g, _finish(g, rng, out, (b_, ho, wo, o))


def _case_tconv(rng):
    g = Graph()
    b_ = int(rng.integers(1, 3))
    ho, wo = _dims(rng, 2, 2, 4)
    c, o = _dims(rng, 2, 1, 3)
    stride = int(rng.integers(1, 3))
    y = _p(g, rng, (b_, ho, wo, o), "y")
    wt = _p(g, rng, (3, 3, c, o), "w")
    out = g.transposed_correlate2d(y, wt, stride=stride, pad=1)
    h, w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    return g, _finish(g, rng, out, (b_, h, w, c))


def _case_reduce(kind):
    def build(rng):
        g = Graph()
        shape = _dims(rng, int(rng.integers(1, 4)), 2, 4)
        x = _p(g, rng, shape, "x")
        if rng.random() < 0.4:
            out = getattr(g, kind)(x)
            oshape = (1,)
        else:
            axis = int(rng.integers(0, len(shape)))
            keep = bool(rng.random() < 0.5)
            out = getattr(g, kind)(x, axis=axis, keepdims=keep)
            oshape = tuple(1 if i == axis else n for i, n in enumerate(shape)) if keep else tuple(n for i, n in enumerate(shape) if i != axis)
            oshape = oshape or (1,)
        return g, _finish(g, rng, out, oshape)
    return build


def _case_concat(rng):
    g = Graph()
    shape = list(_dims(rng, 3))
    axis = int(rng.integers(0, 3))
    parts = []
    for i in range(int(rng.integers(2, 4))):
        s = list(shape)
        s[axis] = int(rng.integers(1, 4))
        parts.append(_p(g, rng, tuple(s), f"x{i}"))
    out = g.concat(parts, axis=axis)
    total = list(shape)
    total[axis] = sum(p.tensor.shape[axis] for p in parts)
    return g, _finish(g, rng, out, tuple(total))


def _case_reshape(rng):
    g = Graph()
    shape = _dims(rng, 3)
    x = _p(g, rng, shape, "x")
    out = g.reshape(x, (-1,))
    return g, _finish(g, rng, out, (int(np.prod(shape)),))


def _case_spatial(kind):
    def build(rng):
        g = Graph()
        b_ = int(rng.integers(1, 3))
        h, w = (2 * n for n in _dims(rng, 2, 1, 3))
        c = int(rng.integers(1, 4))
        x = _p(g, rng, (b_, h, w, c), "x")
        out = getattr(g, kind)(x)
        oshape = {"upsample2x": (b_, 2 * h, 2 * w, c), "avg_pool": (b_, h // 2, w // 2, c), "global_avg_pool": (b_, c)}[kind]
        return g, _finish(g, rng, out, oshape)
    return build


def _case_l2n(rng):
    g = Graph()
    shape = _dims(rng, int(rng.integers(1, 3)), 2, 5)
    x = _p(g, rng, shape, "x")
    return g, _finish(g, rng, g.l2_normalize(x), shape)


def _case_cosine(rng):
    g = Graph()
    shape = _dims(rng, int(rng.integers(1, 3)), 2, 5)
    a, b = _p(g, rng, shape, "a"), _p(g, rng, shape, "b")
    out = g.cosine_similarity(a, b)
    return g, _finish(g, rng, out, shape[:-1] or (1,))


def _case_bilinear(rng):
    g = Graph()
    b_ = int(rng.integers(1, 3))
    h, w = _dims(rng, 2, 3, 6)
    multi = rng.random() < 0.4
    ishape = (b_, h, w, 2) if multi else (b_, h, w)
    img = _p(g, rng, ishape, "img")
    off = rng.uniform(-2.5, 2.5, size=(b_, h, w, 2))
    # keep sample points off the integer lattice, where the interpolant has kinks
    frac = off - np.round(off)
    off = np.where(np.abs(frac) < 0.02, off + 0.05, off)
    offs = g.param(Tensor(off, requires_grad=True), name="offsets")
    out = g.bilinear_sample(img, offs)
    return g, _finish(g, rng, out, ishape)


def _case_ste(rng):
    g = Graph()
    shape = _dims(rng, 2, 2, 5)
    x = _p(g, rng, shape, "x", scale=2.0)
    c = float(rng.uniform(0.1, 0.5))
    out = g.ste_quantize(x, c)
    return g, _finish(g, rng, out, shape)


PRIMITIVE_CASES: dict[str, Callable] = {
    "add": _case_binary("add"),
    "subtract": _case_binary("subtract"),
    "multiply": _case_binary("multiply"),
    "matmul": _case_matmul,
    "correlate2d": _case_correlate,
    "transposed_correlate2d": _case_tconv,
    "relu": _case_unary("relu", away_from_zero=True),
    "leaky_relu": _case_unary("leaky_relu", away_from_zero=True),
    "sigmoid": _case_unary("sigmoid"),
    "tanh": _case_unary("tanh"),
    "log1p": _case_unary("log1p", positive=True),
    "mean": _case_reduce("mean"),
    "sum": _case_reduce("sum"),
    "concat": _case_concat,
    "reshape": _case_reshape,
    "upsample2x": _case_spatial("upsample2x"),
    "avg_pool": _case_spatial("avg_pool"),
    "global_avg_pool": _case_spatial("global_avg_pool"),
    "l2_normalize": _case_l2n,
    "cosine_similarity": _case_cosine,
    "bilinear_sample": _case_bilinear,
    "ste_quantize": _case_ste,
}


def check_primitives(trials: int = 25, tolerance: float = 1e-4, seed: int = 0) -> dict[str, list[GradCheckReport]]:
    """Gradient-check every differentiable kind on ``trials`` random graphs."""
    results = {}
    for i, (kind, build) in enumerate(sorted(PRIMITIVE_CASES.items())):
        rng = np.random.default_rng([seed, i])
        reports = []
        for trial in range(trials):
            g, loss = build(rng)
            reports.append(grad_check(g, loss, tolerance=tolerance, seed=trial))
        results[kind] = reports
    return results
