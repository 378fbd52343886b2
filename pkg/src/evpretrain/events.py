"""Event representations, quantization and the brute-force event simulator.

Histograms are integer arrays of shape ``(..., H, W, 2)``: channel 0 counts
positive (brightening) events, channel 1 negative ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

LOG_EPS = 0.01
DEFAULT_THRESHOLD = 0.2
LUMA = (0.299, 0.587, 0.114)

STREAM_MAGIC = b"EVST"
STREAM_VERSION = 1
RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3")]
)
assert RECORD_DTYPE.itemsize == 16


class EventError(ValueError):
    pass


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Luminance of an ``(..., 3)`` linear RGB image."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def log_intensity(linear: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """``log(I + eps)`` for linear intensity in [0, 1]."""
    linear = np.asarray(linear, dtype=np.float64)
    if linear.min() < 0 or linear.max() > 1:
        raise EventError("linear intensity must lie in [0, 1]")
    return np.log(linear + eps)


def _check_threshold(C: float) -> None:
    if not C > 0:
        raise EventError(f"contrast threshold must be positive, got {C}")


def quantize_change_map(delta: np.ndarray, C: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Per-pixel event counts for a log-intensity change map.

    Each pixel emits ``floor(|delta| / C)`` events of the sign of ``delta``.
    """
    _check_threshold(C)
    delta = np.asarray(delta, dtype=np.float64)
    n = np.floor(np.abs(delta) / C).astype(np.int64)
    return np.stack([np.where(delta > 0, n, 0), np.where(delta < 0, n, 0)], axis=-1)


def check_histogram(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.ndim < 3 or h.shape[-1] != 2:
        raise EventError(f"histogram must have shape (..., H, W, 2), got {h.shape}")
    if (h < 0).any():
        raise EventError("histogram counts must be nonnegative")
    return h


def accumulate_histograms(frames: Sequence[np.ndarray]) -> np.ndarray:
    if len(frames) == 0:
        raise EventError("cannot accumulate an empty list of histograms")
    shape = np.shape(frames[0])
    total = np.zeros(shape, dtype=np.int64)
    for f in frames:
        f = check_histogram(f)
        if f.shape != shape:
            raise EventError(f"histogram shape mismatch: {f.shape} vs {shape}")
        total = total + f
    return total


def polarity_swap(h: np.ndarray) -> np.ndarray:
    h = check_histogram(h)
    return h[..., ::-1].copy()


@dataclass
class EventStream:
    """Time-ordered events on an ``height`` x ``width`` sensor."""

    t: np.ndarray  # uint64 microseconds
    x: np.ndarray  # uint16
    y: np.ndarray  # uint16
    p: np.ndarray  # int8, +1 / -1
    height: int
    width: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventError("event field lengths differ")
        if n:
            if (np.diff(self.t.astype(np.int64)) < 0).any():
                raise EventError("timestamps must be nondecreasing")
            if self.x.max() >= self.width or self.y.max() >= self.height:
                raise EventError("event coordinates outside the sensor")
            if not np.isin(self.p, (-1, 1)).all():
                raise EventError("polarity must be +1 or -1")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, height: int, width: int) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), height, width)


def oracle_simulate_events(
    frames: Sequence[np.ndarray],
    C: float = DEFAULT_THRESHOLD,
    t0: int = 0,
    dt_us: int = 1000,
    reset_per_pair: bool = False,
) -> EventStream:
    """Brute-force integrate-and-fire simulation over log-intensity frames.

    Every pixel keeps a reference level. For each consecutive pair of frames it
    emits ``floor(|L - ref| / C)`` events and moves the reference by the emitted
    amount, so sub-threshold residue carries over. With ``reset_per_pair`` the
    reference is reset to the previous frame instead, which makes the count
    pattern exactly antisymmetric under time reversal. Event times are spread
    uniformly inside each ``dt_us`` micro-step.
    """
    _check_threshold(C)
    if len(frames) < 2:
        raise EventError("need at least two frames")
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    h, w = frames[0].shape
    ref = frames[0].copy()
    ts, xs, ys, ps = [], [], [], []
    for k in range(1, len(frames)):
        cur = frames[k]
        if cur.shape != (h, w):
            raise EventError("frame shapes differ")
        if reset_per_pair:
            ref = frames[k - 1].copy()
        diff = cur - ref
        n = np.floor(np.abs(diff) / C).astype(np.int64)
        sign = np.sign(diff).astype(np.int64)
        ref = ref + n * sign * C
        total = int(n.sum())
        if total == 0:
            continue
        flat_n = n.ravel()
        pix = np.repeat(np.arange(h * w), flat_n)
        # event index within its pixel: 1..n
        starts = np.repeat(np.cumsum(flat_n) - flat_n, flat_n)
        within = np.arange(total) - starts + 1
        t_evt = t0 + (k - 1) * dt_us + (within * dt_us) // (np.repeat(flat_n, flat_n) + 1)
        ts.append(t_evt)
        ys.append(pix // w)
        xs.append(pix % w)
        ps.append(sign.ravel()[pix])
    if not ts:
        return EventStream.empty(h, w)
    t = np.concatenate(ts)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    p = np.concatenate(ps)
    order = np.lexsort((x, y, t))
    return EventStream(t[order], x[order], y[order], p[order], h, w)


def events_to_histogram(stream: EventStream, window: tuple[int, int] | None = None) -> np.ndarray:
    """Count events per pixel and polarity inside ``[t_start, t_end)``."""
    hist = np.zeros((stream.height, stream.width, 2), dtype=np.int64)
    if window is None:
        sel = np.ones(len(stream), dtype=bool)
    else:
        t_start, t_end = window
        if t_start > t_end:
            raise EventError(f"invalid window [{t_start}, {t_end})")
        t = stream.t.astype(np.int64)
        sel = (t >= t_start) & (t < t_end)
    ch = np.where(stream.p[sel] > 0, 0, 1)
    np.add.at(hist, (stream.y[sel].astype(np.int64), stream.x[sel].astype(np.int64), ch), 1)
    return hist


def encode_stream(stream: EventStream) -> bytes:
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = (stream.p > 0).astype(np.uint8)
    header = STREAM_MAGIC + struct.pack("<IHHI", STREAM_VERSION, stream.height, stream.width, len(stream))
    return header + rec.tobytes()


def decode_stream(buf: bytes) -> EventStream:
    if buf[:4] != STREAM_MAGIC:
        raise EventError("not an event stream file")
    version, h, w, n = struct.unpack_from("<IHHI", buf, 4)
    if version != STREAM_VERSION:
        raise EventError(f"unsupported stream version {version}")
    if len(buf) != 16 + 16 * n:
        raise EventError("record count does not match file size")
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=n, offset=16)
    p = np.where(rec["p"] == 1, 1, -1)
    return EventStream(rec["t"].copy(), rec["x"].copy(), rec["y"].copy(), p, h, w)


def write_stream(path: str | Path, stream: EventStream) -> None:
    Path(path).write_bytes(encode_stream(stream))


def read_stream(path: str | Path) -> EventStream:
    return decode_stream(Path(path).read_bytes())
