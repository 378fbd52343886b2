"""Synthetic benchmark generation and loading.

Layout of a dataset directory::

    manifest.json
    rgb/000000_image.darr      (H, W, 3) linear RGB, gray replicated
    rgb/000000_pose.darr       (21, 3) camera-frame joints, mm
    event/000000.evst          oracle events over one keyframe interval
    event/000000_pose.darr     joints at the end of the window
    finetune/..., eval/...     same layout as event/
    flow/000000_frames.darr    (M + 1, H, W) linear intensity per micro-step
    flow/000000_flows.darr     (M, H, W, 2) ground-truth flow per micro-step
    flow/000000_poses.darr     (M + 1, 21, 3)

Every sample owns a motion-script seed derived from the dataset seed, the
split name and the sample index; splits never share a seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .. import io
from ..events import (
    DEFAULT_THRESHOLD,
    EventStream,
    events_to_histogram,
    log_intensity,
    oracle_simulate_events,
    read_stream,
    write_stream,
)
from ..rng import sub_seed
from .motion import random_script
from .render import RenderConfig, gt_flow, render_hand
from .skeleton import forward_kinematics

MANIFEST = "manifest.json"
ORACLE_MODES = ("carry", "reset_per_pair")
EVENT_SPLITS = ("event", "finetune", "eval")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 64
    width: int = 64
    micro_steps: int = 8
    n_rgb: int = 500
    n_event: int = 300
    n_finetune: int = 20
    n_eval: int = 200
    n_flow: int = 16
    # per-interval articulation amplitude (radians), drawn uniformly
    amplitude_min: float = 0.1
    amplitude_max: float = 0.3
    # eval samples below/above this amplitude form the low/high splits
    amplitude_split: float = 0.2
    C: float = DEFAULT_THRESHOLD
    oracle_mode: str = "reset_per_pair"
    # oracle frames rendered per micro-step (carry mode benefits from > 1)
    oracle_substeps: int = 1
    dt_us: int = 1000

    def validate(self) -> None:
        for name in ("n_rgb", "n_event", "n_finetune", "n_eval", "n_flow"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be >= 0")
        if self.height < 16 or self.width < 16:
            raise DatasetError("frames must be at least 16x16")
        if self.micro_steps < 1 or self.oracle_substeps < 1:
            raise DatasetError("micro_steps and oracle_substeps must be >= 1")
        if not 0 < self.amplitude_min <= self.amplitude_split <= self.amplitude_max:
            raise DatasetError("need 0 < amplitude_min <= amplitude_split <= amplitude_max")
        if not self.C > 0:
            raise DatasetError("C must be positive")
        if self.oracle_mode not in ORACLE_MODES:
            raise DatasetError(f"oracle_mode must be one of {ORACLE_MODES}")
        if self.dt_us < 1:
            raise DatasetError("dt_us must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown dataset config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def render_config(self) -> RenderConfig:
        return RenderConfig.for_size(self.height, self.width)


def _gray3(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, axis=-1)


def _amplitude(rng, cfg: DatasetConfig, band: str | None) -> float:
    lo, hi = cfg.amplitude_min, cfg.amplitude_max
    if band == "low":
        hi = cfg.amplitude_split
    elif band == "high":
        lo = cfg.amplitude_split
    return float(rng.uniform(lo, hi))


def simulate_window(script, cfg: DatasetConfig, rcfg: RenderConfig, t0: int = 0) -> EventStream:
    """Oracle events over the whole script, one micro-step per ``dt_us``."""
    sub = cfg.oracle_substeps
    frames = [log_intensity(render_hand(s, cfg=rcfg)) for s in script.frames(sub)]
    return oracle_simulate_events(frames, cfg.C, t0=t0, dt_us=max(cfg.dt_us // sub, 1), reset_per_pair=cfg.oracle_mode == "reset_per_pair")


def sample_script(seed: int, cfg: DatasetConfig, rcfg: RenderConfig, band: str | None = None):
    rng = np.random.default_rng(seed)
    amp = _amplitude(rng, cfg, band)
    return random_script(rng, 2, cfg.micro_steps, amp, cfg=rcfg), amp


def generate_dataset(seed: int, config: DatasetConfig | None, out_dir: str | Path) -> dict:
    """Write a full dataset to ``out_dir`` and return the manifest."""
    cfg = config or DatasetConfig()
    cfg.validate()
    out = Path(out_dir)
    rcfg = cfg.render_config()
    counts = {"rgb": cfg.n_rgb, "event": cfg.n_event, "finetune": cfg.n_finetune, "eval": cfg.n_eval, "flow": cfg.n_flow}
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, n in counts.items():
            (out / split).mkdir(exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc

    used: set[int] = set()

    def fresh_seed(split: str, i: int) -> int:
        s = sub_seed(seed, "scripts", split, i)
        k = 0
        while s in used:
            k += 1
            s = sub_seed(seed, "scripts", split, i, k)
        used.add(s)
        return s

    splits: dict[str, list] = {k: [] for k in counts}
    for i in range(cfg.n_rgb):
        s = fresh_seed("rgb", i)
        script, amp = sample_script(s, cfg, rcfg)
        skel = script.keyframes[0]
        img = render_hand(skel, cfg=rcfg)
        base = f"rgb/{i:06d}"
        io.write_array(out / f"{base}_image.darr", "image", _gray3(img))
        io.write_array(out / f"{base}_pose.darr", "pose", forward_kinematics(skel))
        splits["rgb"].append({"index": i, "seed": s, "image": f"{base}_image.darr", "pose": f"{base}_pose.darr"})

    for split in EVENT_SPLITS:
        n = counts[split]
        for i in range(n):
            s = fresh_seed(split, i)
            band = None
            if split == "eval":
                band = "low" if i < (n + 1) // 2 else "high"
            script, amp = sample_script(s, cfg, rcfg, band)
            stream = simulate_window(script, cfg, rcfg)
            base = f"{split}/{i:06d}"
            write_stream(out / f"{base}.evst", stream)
            io.write_array(out / f"{base}_pose.darr", "pose", forward_kinematics(script.keyframes[-1]))
            rec = {
                "index": i, "seed": s, "events": f"{base}.evst", "pose": f"{base}_pose.darr",
                "amplitude": round(amp, 12), "n_events": len(stream),
                "window_us": [0, cfg.micro_steps * cfg.dt_us],
            }
            if band is not None:
                rec["amplitude_split"] = band
            splits[split].append(rec)

    for i in range(cfg.n_flow):
        s = fresh_seed("flow", i)
        script, amp = sample_script(s, cfg, rcfg)
        skels = script.frames()
        frames = np.stack([render_hand(k, cfg=rcfg) for k in skels])
        flows = np.stack([gt_flow(a, b, cfg=rcfg) for a, b in zip(skels[:-1], skels[1:])])
        poses = np.stack([forward_kinematics(k) for k in skels])
        base = f"flow/{i:06d}"
        io.write_array(out / f"{base}_frames.darr", "frames", frames)
        io.write_array(out / f"{base}_flows.darr", "flows", flows)
        io.write_array(out / f"{base}_poses.darr", "poses", poses)
        splits["flow"].append({
            "index": i, "seed": s, "frames": f"{base}_frames.darr", "flows": f"{base}_flows.darr",
            "poses": f"{base}_poses.darr", "amplitude": round(amp, 12),
        })

    manifest = {"format": 1, "seed": int(seed), "config": asdict(cfg), "splits": splits}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class Dataset:
    """Read access to a generated dataset directory.

    Every pose read goes through :meth:`pose`, which records the access so
    callers can prove that a split's labels were never touched.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / MANIFEST
        if not path.exists():
            raise DatasetError(f"no {MANIFEST} in {self.root}")
        try:
            self.manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"corrupt manifest: {exc}") from exc
        self.config = DatasetConfig.from_dict(self.manifest["config"])
        self.pose_reads: dict[str, int] = {}

    def split(self, name: str) -> list[dict]:
        try:
            return self.manifest["splits"][name]
        except KeyError:
            raise DatasetError(f"dataset has no split {name!r}") from None

    def __len__(self):
        return sum(len(v) for v in self.manifest["splits"].values())

    def _read(self, rel: str) -> np.ndarray:
        try:
            return io.read_array(self.root / rel)[1]
        except (OSError, io.FormatError) as exc:
            raise DatasetError(f"cannot read {rel}: {exc}") from exc

    def image(self, split: str, i: int) -> np.ndarray:
        return self._read(self.split(split)[i]["image"])

    def pose(self, split: str, i: int) -> np.ndarray:
        self.pose_reads[split] = self.pose_reads.get(split, 0) + 1
        return self._read(self.split(split)[i]["pose"])

    def events(self, split: str, i: int) -> EventStream:
        rel = self.split(split)[i]["events"]
        try:
            return read_stream(self.root / rel)
        except OSError as exc:
            raise DatasetError(f"cannot read {rel}: {exc}") from exc

    def histogram(self, split: str, i: int) -> np.ndarray:
        rec = self.split(split)[i]
        return events_to_histogram(self.events(split, i), tuple(rec["window_us"]))

    def flow_sample(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rec = self.split("flow")[i]
        return self._read(rec["frames"]), self._read(rec["flows"]), self._read(rec["poses"])
