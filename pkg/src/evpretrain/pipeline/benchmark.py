"""Benchmark drivers: construction fidelity against the oracle, the
pre-train / fine-tune / evaluate comparison, and the divergence probe."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..construction import histogram_l1, iterative_construct, one_shot_construct
from ..events import events_to_histogram, log_intensity, oracle_simulate_events
from ..hand.dataset import Dataset
from ..hand.motion import random_script
from ..hand.render import RenderConfig, gt_flow, render_hand
from ..rng import sub_rng
from .config import METHODS, TrainConfig
from .evaluation import EvalReport, evaluate, export_report
from .training import build_pretrain_graph, finetune, load_for, load_histograms, pretrain, scratch_checkpoint

FIDELITY_COLUMNS = ("index", "amplitude", "oracle_events", "l1_iterative", "l1_one_shot", "l1_T1")


@dataclass
class FidelitySample:
    log_frames: list        # oracle-rate log frames, first to last
    flows: list             # T per-step ground-truth flows
    net_flow: np.ndarray    # first frame to last
    oracle: np.ndarray      # (H, W, 2) oracle histogram over the window
    amplitude: float


def fidelity_sample(rng, T: int = 6, C: float = 0.2, oracle_mode: str = "reset_per_pair", substeps: int = 1,
                    amplitude: tuple[float, float] = (0.1, 0.3), rcfg: RenderConfig | None = None) -> FidelitySample:
    """One articulation window of T micro-steps with ground-truth flows and
    the oracle histogram (``substeps`` oracle frames per micro-step)."""
    rcfg = rcfg or RenderConfig()
    amp = float(rng.uniform(*amplitude))
    script = random_script(rng, 2, T, amp, cfg=rcfg)
    fine = script.frames(substeps)
    logs = [log_intensity(render_hand(s, cfg=rcfg)) for s in fine]
    oracle = events_to_histogram(oracle_simulate_events(logs, C, reset_per_pair=oracle_mode == "reset_per_pair"))
    micro = fine[::substeps]
    flows = [gt_flow(a, b, cfg=rcfg) for a, b in zip(micro[:-1], micro[1:])]
    return FidelitySample(logs, flows, gt_flow(micro[0], micro[-1], cfg=rcfg), oracle, amp)


def fidelity_table(seed: int, n: int = 100, T: int = 6, C: float = 0.2, oracle_mode: str = "reset_per_pair",
                   substeps: int = 1, quantize: str = "per_iteration", rcfg: RenderConfig | None = None) -> np.ndarray:
    """Rows of FIDELITY_COLUMNS: oracle-L1 of the T-step construction, of the
    one-shot construction on the net flow and of a single iteration."""
    rng = sub_rng(seed, "fidelity", oracle_mode, substeps)
    rows = []
    for i in range(n):
        s = fidelity_sample(rng, T, C, oracle_mode, substeps, rcfg=rcfg)
        x0 = s.log_frames[0]
        it = iterative_construct(x0, s.flows, T, C, quantize).final
        one = one_shot_construct(x0, s.net_flow, C)
        t1 = iterative_construct(x0, [s.net_flow], 1, C).final
        rows.append((i, s.amplitude, int(s.oracle.sum()), histogram_l1(it, s.oracle), histogram_l1(one, s.oracle), histogram_l1(t1, s.oracle)))
    return np.array(rows, dtype=np.float64)


def write_table(path: str | Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([int(v) if float(v).is_integer() and abs(v) < 2**53 else repr(float(v)) for v in r])


def divergence_cosines(cfg: TrainConfig, checkpoint: str | Path, data, split: str | None = None, chunk: int = 25) -> np.ndarray:
    """cos(z_pev, z'_pev) per eval window, with window i constructed from RGB
    sample i mod N_rgb and the window's own events as the motion source."""
    split = split or cfg.eval_split
    params, _ = load_for(cfg, checkpoint)
    pg = build_pretrain_graph(params, cfg.replace(method="iterative"))
    hists = load_histograms(data, split)
    n_rgb = len(data.split(cfg.rgb_split))
    idx = np.arange(len(hists)) % n_rgb
    imgs = np.stack([data.image(cfg.rgb_split, int(i)) for i in idx])
    out = []
    for s in range(0, len(hists), chunk):
        sl = slice(s, s + chunk)
        b = len(hists[sl])
        pg.g.run({"img": imgs[sl], "logimg": log_intensity(imgs[sl, ..., 0]), "hist": hists[sl], "gt": np.zeros((b, params.config.joints, 3))})
        out.append((pg.g.value(pg.parts["zb_pev"]) * pg.g.value(pg.parts["zb_rev"])).sum(axis=-1))
    return np.concatenate(out)


def run_method(cfg: TrainConfig, data: Dataset, out_dir: str | Path) -> tuple[EvalReport, Path]:
    """Pre-train (unless scratch), fine-tune and evaluate one (method, seed)."""
    out = Path(out_dir)
    if cfg.method == "scratch":
        pre = scratch_checkpoint(cfg, data, out)
    else:
        pre = pretrain(cfg, data, data, out)
    fin = finetune(cfg, pre.checkpoint, data, out)
    report = evaluate(cfg, fin.checkpoint, data)
    report.write(out)
    return report, pre.checkpoint


def benchmark_config(**overrides) -> TrainConfig:
    """Settings of the end-to-end comparison on the default dataset.

    The pose loss is measured in millimetres and sits near 10 early on; at the
    default weight of 0.1 the divergence term barely moves the cosine (about
    0.93 after 1000 steps), at 0.3 it drives it below -0.9. Fine-tuning on 20
    samples starts to overfit after a few hundred steps.
    """
    return TrainConfig(**{"pretrain_steps": 1000, "finetune_steps": 150, "w_div": 0.3, **overrides})


def _benchmark_run(base: TrainConfig, data_dir: str, out: str, method: str, seed: int):
    cfg = base.replace(method=method, seed=int(seed))
    data = Dataset(data_dir)
    report, pre_ckpt = run_method(cfg, data, Path(out) / f"{method}_seed{seed}")
    cos = divergence_cosines(cfg, pre_ckpt, data) if method == "iterative" else None
    return report, cos


def run_benchmark(base: TrainConfig, data_dir: str | Path, out_dir: str | Path, seeds=(0, 1, 2), methods=METHODS,
                  workers: int | None = None) -> dict:
    """Every (method, seed) pipeline. Writes ``benchmark.csv`` (one row per
    run), ``divergence.csv`` and the comparison report of the seed-median runs.

    Runs are independent and seeded, so ``workers`` > 1 spreads them over
    processes without changing any output.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(m, int(s)) for m in methods for s in seeds]
    workers = min(len(jobs), workers or os.cpu_count() or 1)
    args = [(base, str(data_dir), str(out), m, s) for m, s in jobs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_benchmark_run, *zip(*args)))
    else:
        results = [_benchmark_run(*a) for a in args]
    reports: dict[str, list[EvalReport]] = {m: [] for m in methods}
    rows, div_rows = [], []
    for (m, seed), (report, cos) in zip(jobs, results):
        reports[m].append(report)
        agg = report.aggregate()
        rows.append((m, seed, agg["all"]["mpjpe_mm"], agg["all"]["pa_mpjpe_mm"]))
        if cos is not None:
            div_rows += [(seed, i, c) for i, c in enumerate(cos)]
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "seed", "mpjpe_mm", "pa_mpjpe_mm"))
        for r in rows:
            w.writerow((r[0], r[1], repr(float(r[2])), repr(float(r[3]))))
    if div_rows:
        with open(out / "divergence.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("seed", "index", "cosine"))
            for r in div_rows:
                w.writerow((r[0], r[1], repr(float(r[2]))))
    medians = {}
    chosen = []
    for m in methods:
        vals = np.array([r.aggregate()["all"]["mpjpe_mm"] for r in reports[m]])
        medians[m] = float(np.median(vals))
        chosen.append(reports[m][int(np.argsort(vals)[len(vals) // 2])])
    export_report(chosen, out / "report")
    return {
        "median_mpjpe": medians,
        "runs": rows,
        "divergence_mean": float(np.mean([r[2] for r in div_rows])) if div_rows else None,
    }


def composite_gradcheck(seed: int = 0, method: str = "iterative", quantize: str = "per_iteration", size: int = 16, T: int = 6,
                        batch: int = 2, max_elements: int = 24):
    """Finite-difference check of the whole pre-training objective (and the
    discriminator objective) on a reduced frame size."""
    from ..model import ModelConfig, init_params
    from ..tensor import grad_check

    cfg = TrainConfig(height=size, width=size, T=T, method=method, quantize=quantize)
    rng = sub_rng(seed, "gradcheck", method, quantize)
    img = rng.random((batch, size, size, 3)) * 0.8 + 0.1
    gt = rng.normal(size=(batch, 21, 3)) * 30
    mean = gt.mean(axis=0)
    bind = {
        "img": img, "logimg": log_intensity(img[..., 0]),
        "hist": rng.poisson(1.0, (batch, size, size, 2)).astype(float),
        # targets near the head's initial output keep the loss O(1)
        "gt": mean + rng.normal(size=gt.shape) * 3.0,
    }
    p = init_params(ModelConfig(height=size, width=size), seed, mean - mean[:1])
    # a few pixels of flow so that events actually fire
    p["dec/conv2/w"].data *= 20.0
    pg = build_pretrain_graph(p, cfg)
    total = grad_check(pg.g, pg.total, bind, max_elements=max_elements, seed=seed)
    for name, t in p.tensors.items():
        t.requires_grad = name.startswith("disc/")
    disc = grad_check(pg.g, pg.disc, bind, max_elements=max_elements, seed=seed)
    for t in p.tensors.values():
        t.requires_grad = True
    pg.g.run(bind)
    return total, disc, float(pg.g.value(pg.parts["x_pev"]).sum())
