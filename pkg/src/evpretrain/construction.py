"""Event-frame construction from an image and optical flow.

A flow field holds, per pixel, the forward displacement (pixels, channel 0
horizontal, channel 1 vertical) of the surface seen at that pixel. Warping
samples the source at ``p - flow(p)``, so to first order the log-intensity
change at a pixel is ``-grad(L) . flow``. That signed change is what gets
quantized into events; a positive change is a brightening (channel 0).

Images are log-intensity maps here. The iterative construction splits the
motion into T small steps, warping the image after each one and accumulating
the per-step event frames; the one-shot construction makes a single
gradient-times-flow estimate from the first frame only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .events import DEFAULT_THRESHOLD, accumulate_histograms, quantize_change_map
from .tensor import kernels as K
from .tensor.engine import Graph, Node


class ConstructionError(ValueError):
    pass


class IncompleteTraceError(ConstructionError):
    pass


QUANTIZE_MODES = ("per_iteration", "final")

FlowSource = Union[np.ndarray, Sequence[np.ndarray], Callable[[int, np.ndarray], np.ndarray]]


def default_flow_cap(height: int) -> float:
    return height / 4.0


def spatial_gradient(img: np.ndarray) -> np.ndarray:
    """(..., H, W) -> (..., H, W, 2) of (d/dx, d/dy).

    Central differences inside, one-sided differences on the border rows and
    columns.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2 or img.shape[-1] < 3 or img.shape[-2] < 3:
        raise ConstructionError(f"image must be at least 3x3, got {img.shape}")
    gy, gx = np.gradient(img, axis=(-2, -1))
    return np.stack([gx, gy], axis=-1)


def check_flow(flow: np.ndarray, shape_hw: tuple[int, int], bound: float | None = None) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape[-3:] != tuple(shape_hw) + (2,):
        raise ConstructionError(f"flow shape {flow.shape} does not match image {shape_hw}")
    if not np.isfinite(flow).all():
        raise ConstructionError("flow contains non-finite values")
    bound = shape_hw[0] if bound is None else bound
    if np.hypot(flow[..., 0], flow[..., 1]).max(initial=0.0) > bound:
        raise ConstructionError(f"flow magnitude exceeds the sanity bound {bound}")
    return flow


def clamp_flow(flow: np.ndarray, cap: float) -> np.ndarray:
    """Rescale vectors longer than ``cap`` to length ``cap``."""
    mag = np.hypot(flow[..., 0], flow[..., 1])[..., None]
    return np.where(mag > cap, flow * (cap / np.maximum(mag, 1e-300)), flow)


def backward_warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """``out(p) = img(p - flow(p))``, bilinear, border-clamped."""
    img = np.asarray(img, dtype=np.float64)
    flow = check_flow(flow, img.shape[-2:])
    if img.shape[:-2] != flow.shape[:-3]:
        raise ConstructionError(f"batch shapes differ: {img.shape} vs {flow.shape}")
    batch = img.shape[:-2]
    h, w = img.shape[-2:]
    out = K.bilinear_sample(img.reshape((-1, h, w)), -flow.reshape((-1, h, w, 2)))
    return out.reshape(batch + (h, w))


def brightness_change(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    g = spatial_gradient(img)
    return -(g[..., 0] * flow[..., 0] + g[..., 1] * flow[..., 1])


def one_shot_construct(img: np.ndarray, flow: np.ndarray, C: float = DEFAULT_THRESHOLD, cap: float | None = None) -> np.ndarray:
    """Single gradient-times-flow estimate; flow clamped like one iteration."""
    img = np.asarray(img, dtype=np.float64)
    flow = check_flow(flow, img.shape[-2:], bound=np.inf)
    flow = clamp_flow(flow, default_flow_cap(img.shape[-2]) if cap is None else cap)
    return quantize_change_map(brightness_change(img, flow), C)


@dataclass
class ConstructionTrace:
    """Per-iteration record: ``frames[t]`` is the image before iteration t+1
    (``frames[0]`` is the input, ``frames[T]`` the last warp), ``flows[t]``,
    ``changes[t]`` and ``subframes[t]`` belong to iteration t+1."""

    frames: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    subframes: list = field(default_factory=list)
    final: np.ndarray | None = None
    C: float = DEFAULT_THRESHOLD
    quantize: str = "per_iteration"

    @property
    def T(self) -> int:
        return len(self.flows)


def _flow_provider(flow_source: FlowSource, T: int) -> Callable[[int, np.ndarray], np.ndarray]:
    if callable(flow_source):
        return flow_source
    if isinstance(flow_source, np.ndarray) and flow_source.ndim == 3:
        return lambda t, x: flow_source
    flows = list(flow_source)
    if len(flows) < T:
        raise ConstructionError(f"flow sequence has {len(flows)} entries, need {T}")
    return lambda t, x: flows[t - 1]


def iterative_construct(
    img0: np.ndarray,
    flow_source: FlowSource,
    T: int = 6,
    C: float = DEFAULT_THRESHOLD,
    quantize: str = "per_iteration",
    cap: float | None = None,
) -> ConstructionTrace:
    """Warp ``img0`` T times, emitting one event frame per step.

    ``flow_source`` is a single flow reused every step, a sequence of T flows,
    or a callable ``(t, previous_frame) -> flow`` with t counted from 1.
    With ``quantize="final"`` the summed changes are quantized once instead of
    summing per-step quantized frames.
    """
    if T < 1:
        raise ConstructionError(f"T must be >= 1, got {T}")
    if not C > 0:
        raise ConstructionError(f"C must be positive, got {C}")
    if quantize not in QUANTIZE_MODES:
        raise ConstructionError(f"unknown quantize mode {quantize!r}")
    x = np.asarray(img0, dtype=np.float64)
    cap = default_flow_cap(x.shape[-2]) if cap is None else cap
    provider = _flow_provider(flow_source, T)
    trace = ConstructionTrace(frames=[x], C=C, quantize=quantize)
    for t in range(1, T + 1):
        try:
            v = provider(t, x)
        except Exception as exc:
            raise ConstructionError(f"flow provider failed at iteration {t}: {exc}") from exc
        v = clamp_flow(check_flow(v, x.shape[-2:], bound=np.inf), cap)
        s = brightness_change(x, v)
        trace.flows.append(v)
        trace.changes.append(s)
        trace.subframes.append(quantize_change_map(s, C))
        x = backward_warp(x, v)
        trace.frames.append(x)
    if quantize == "per_iteration":
        trace.final = accumulate_histograms(trace.subframes)
    else:
        trace.final = quantize_change_map(np.sum(trace.changes, axis=0), C)
    return trace


def reverse_construct(trace: ConstructionTrace, C: float | None = None) -> np.ndarray:
    """Events of the motion run backwards along the forward trace.

    Step r (from T down to 1) pairs the warped frame ``frames[r]`` with the
    negated flow of iteration r.
    """
    C = trace.C if C is None else C
    T = trace.T
    if T < 1 or len(trace.frames) != T + 1:
        raise IncompleteTraceError(f"trace has {len(trace.frames)} frames for {T} flows")
    subs = []
    for r in range(T, 0, -1):
        subs.append(quantize_change_map(brightness_change(trace.frames[r], -trace.flows[r - 1]), C))
    return accumulate_histograms(subs)


def histogram_l1(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.abs(np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)).sum())


# -- graph builders ----------------------------------------------------------


def gradient_matrix(n: int) -> np.ndarray:
    """Matrix D with ``D @ v`` equal to ``np.gradient(v)`` for length-n v."""
    d = np.zeros((n, n))
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[-1, -2], d[-1, -1] = -1.0, 1.0
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5, 0.5
    return d


class GraphConstructor:
    """Builds construction subgraphs on (B, H, W) log images and (B, H, W, 2)
    flows. Quantization uses the straight-through quantizer, and the two
    polarity channels are formed before quantizing so that sub-threshold
    pixels still pass gradient."""

    def __init__(self, g: Graph, height: int, width: int, C: float = DEFAULT_THRESHOLD):
        if height < 3 or width < 3:
            raise ConstructionError("image must be at least 3x3")
        self.g, self.C = g, C
        self.dy = g.constant(gradient_matrix(height), name="grad_dy")
        self.dxt = g.constant(gradient_matrix(width).T, name="grad_dxt")
        self.sel_x = g.constant(np.array([[1.0], [0.0]]), name="sel_x")
        self.sel_y = g.constant(np.array([[0.0], [1.0]]), name="sel_y")
        self.neg = g.constant(-1.0, name="neg_one")
        self.hw = (height, width)

    def _channel(self, flow: Node, sel: Node) -> Node:
        return self.g.reshape(self.g.matmul(flow, sel), (-1,) + self.hw)

    def change(self, x: Node, flow: Node, sign: float = -1.0) -> Node:
        """``sign * grad(x) . flow`` per pixel, shape (B, H, W)."""
        g = self.g
        gx = g.matmul(x, self.dxt)
        gy = g.matmul(self.dy, x)
        dot = g.add(g.multiply(gx, self._channel(flow, self.sel_x)), g.multiply(gy, self._channel(flow, self.sel_y)))
        return g.multiply(dot, self.neg) if sign < 0 else dot

    def quantize(self, s: Node) -> Node:
        """Signed change (B, H, W) -> event counts (B, H, W, 2)."""
        g = self.g
        pos = g.ste_quantize(g.relu(s), self.C)
        neg = g.ste_quantize(g.relu(g.multiply(s, self.neg)), self.C)
        return g.concat([g.reshape(pos, (-1,) + self.hw + (1,)), g.reshape(neg, (-1,) + self.hw + (1,))], axis=-1)

    def warp(self, x: Node, flow: Node) -> Node:
        return self.g.bilinear_sample(x, self.g.multiply(flow, self.neg))

    def one_shot(self, x: Node, flow: Node) -> Node:
        return self.quantize(self.change(x, flow))

    def _accumulate(self, changes: list[Node], quantize: str) -> Node:
        if quantize not in QUANTIZE_MODES:
            raise ConstructionError(f"unknown quantize mode {quantize!r}")
        if quantize == "final":
            s = changes[0]
            for c in changes[1:]:
                s = self.g.add(s, c)
            return self.quantize(s)
        total = None
        for c in changes:
            sub = self.quantize(c)
            total = sub if total is None else self.g.add(total, sub)
        return total

    def iterative(self, x0: Node, flows: Sequence[Node], quantize: str = "per_iteration") -> tuple[Node, list[Node]]:
        """Returns the accumulated histogram and the frames x0..xT."""
        frames = [x0]
        changes = []
        for v in flows:
            changes.append(self.change(frames[-1], v))
            frames.append(self.warp(frames[-1], v))
        return self._accumulate(changes, quantize), frames

    def reverse(self, frames: Sequence[Node], flows: Sequence[Node], quantize: str = "per_iteration") -> Node:
        if len(frames) != len(flows) + 1 or not flows:
            raise IncompleteTraceError("need T + 1 frames for T flows")
        # negated flow: -grad . (-v) = +grad . v
        changes = [self.change(frames[r], flows[r - 1], sign=1.0) for r in range(len(flows), 0, -1)]
        return self._accumulate(changes, quantize)
