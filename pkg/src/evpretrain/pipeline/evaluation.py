"""Held-out evaluation and comparison reports."""

from __future__ import annotations

import csv
import io as _io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io
from ..construction import ConstructionTrace
from ..hand.dataset import DatasetError
from .config import TrainConfig
from .metrics import compute_mpjpe, compute_pa_mpjpe
from .training import _check_shape, load_for, load_histograms, predict_poses

REPORT_COLUMNS = ("method", "split", "n", "mpjpe_mm", "pa_mpjpe_mm")


class EmptySplitError(DatasetError):
    pass


class ReportError(OSError):
    pass


@dataclass
class EvalReport:
    method: str
    seed: int
    config: dict
    mpjpe: np.ndarray
    pa_mpjpe: np.ndarray
    groups: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def split_names(self) -> list[str]:
        names = ["all"]
        names += sorted(set(self.groups) - {None})
        return names

    def mask(self, split: str) -> np.ndarray:
        if split == "all":
            return np.ones(len(self.mpjpe), dtype=bool)
        return np.array([g == split for g in self.groups])

    def aggregate(self) -> dict[str, dict]:
        out = {}
        for s in self.split_names():
            m = self.mask(s)
            out[s] = {"n": int(m.sum()), "mpjpe_mm": float(self.mpjpe[m].mean()), "pa_mpjpe_mm": float(self.pa_mpjpe[m].mean())}
        return out

    def per_sample_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("index", "split", "mpjpe_mm", "pa_mpjpe_mm"))
        for i, (a, b) in enumerate(zip(self.mpjpe, self.pa_mpjpe)):
            w.writerow((i, self.groups[i] or "", repr(float(a)), repr(float(b))))
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"method {self.method}  seed {self.seed}"]
        for s, a in self.aggregate().items():
            lines.append(f"{s:>6}: n={a['n']:4d}  MPJPE {a['mpjpe_mm']:.3f} mm  PA-MPJPE {a['pa_mpjpe_mm']:.3f} mm")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "method": self.method, "seed": self.seed, "config": self.config,
            "mpjpe": [float(v) for v in self.mpjpe], "pa_mpjpe": [float(v) for v in self.pa_mpjpe],
            "groups": self.groups, "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(d["method"], d["seed"], d["config"], np.asarray(d["mpjpe"]), np.asarray(d["pa_mpjpe"]), list(d["groups"]), d.get("wall_clock_s", 0.0))

    def write(self, out_dir: str | Path, tag: str | None = None) -> Path:
        """``eval_<tag>.csv`` (per sample), ``.txt`` summary and ``.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = tag or self.method
        (out / f"eval_{tag}.csv").write_text(self.per_sample_csv())
        (out / f"eval_{tag}.txt").write_text(self.summary())
        (out / f"eval_{tag}.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return out / f"eval_{tag}.csv"


def evaluate(cfg: TrainConfig, checkpoint: str | Path, data, split: str | None = None, method: str | None = None) -> EvalReport:
    split = split or cfg.eval_split
    t0 = time.perf_counter()
    params, _ = load_for(cfg, checkpoint)
    _check_shape(data, cfg)
    recs = data.split(split)
    if not recs:
        raise EmptySplitError(f"split {split!r} is empty")
    hists = load_histograms(data, split)
    gt = np.stack([data.pose(split, i) for i in range(len(recs))])
    pred = predict_poses(params, hists)
    return EvalReport(
        method=method or cfg.method, seed=cfg.seed, config=cfg.to_dict(),
        mpjpe=np.atleast_1d(compute_mpjpe(pred, gt)), pa_mpjpe=np.atleast_1d(compute_pa_mpjpe(pred, gt)),
        groups=[r.get("amplitude_split") for r in recs], wall_clock_s=time.perf_counter() - t0,
    )


def comparison_rows(reports: list[EvalReport]) -> list[tuple]:
    rows = []
    for r in reports:
        for s, a in r.aggregate().items():
            rows.append((r.method, s, a["n"], repr(a["mpjpe_mm"]), repr(a["pa_mpjpe_mm"])))
    return rows


def plot_comparison(csv_path: str | Path, png_path: str | Path) -> None:
    """Grouped bars of MPJPE per method and split, drawn from the CSV alone."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    splits = list(dict.fromkeys(r["split"] for r in rows))
    val = {(r["method"], r["split"]): float(r["mpjpe_mm"]) for r in rows}
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    width = 0.8 / max(len(splits), 1)
    x = np.arange(len(methods))
    for k, s in enumerate(splits):
        ax.bar(x + k * width, [val.get((m, s), np.nan) for m in methods], width, label=s)
    ax.set_xticks(x + width * (len(splits) - 1) / 2, methods)
    ax.set_ylabel("MPJPE (mm)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, metadata={"Software": None})
    plt.close(fig)


def dump_trace(trace: ConstructionTrace, out_dir: str | Path, name: str = "trace") -> list[Path]:
    """One dense array per iteration with the warped frame and both polarity
    channels of that step's event frame, plus a PNG strip."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, sub in enumerate(trace.subframes, start=1):
        p = out / f"{name}_iter{t:02d}.darr"
        io.write_array(p, f"{name}_iter{t:02d}", np.concatenate([trace.frames[t][..., None], sub], axis=-1))
        paths.append(p)
    T = trace.T
    fig, axes = plt.subplots(2, T + 1, figsize=(1.6 * (T + 1), 3.4), dpi=100, squeeze=False)
    for t in range(T + 1):
        axes[0, t].imshow(trace.frames[t], cmap="gray")
        axes[0, t].set_title(f"t={t}", fontsize=7)
        ev = trace.final if t == T else trace.subframes[t]
        axes[1, t].imshow(ev[..., 0] - ev[..., 1], cmap="bwr", vmin=-3, vmax=3)
        axes[1, t].set_title("sum" if t == T else f"events {t + 1}", fontsize=7)
    for a in axes.ravel():
        a.set_axis_off()
    fig.tight_layout()
    png = out / f"{name}.png"
    fig.savefig(png, metadata={"Software": None})
    plt.close(fig)
    paths.append(png)
    return paths


def export_report(reports: list[EvalReport], out_dir: str | Path, traces: dict[str, ConstructionTrace] | None = None) -> Path:
    """``comparison.csv`` with one row per (method, split), ``comparison.png``
    drawn from it, and frame dumps for each given construction trace."""
    if not reports:
        raise ReportError("export_report needs at least one report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "comparison.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            w.writerows(comparison_rows(reports))
        plot_comparison(path, out / "comparison.png")
        for name, tr in (traces or {}).items():
            dump_trace(tr, out / "frames", name)
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc
    return path
