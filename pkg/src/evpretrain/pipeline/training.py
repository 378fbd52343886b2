"""Pre-training on labeled RGB + unlabeled events, and few-shot fine-tuning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..construction import GraphConstructor
from ..events import log_intensity
from ..hand.dataset import Dataset, DatasetError
from ..model import (
    ArchitectureMismatch,
    ModelConfig,
    ModelParams,
    Net,
    adversarial_loss,
    alignment_loss,
    divergence_loss,
    init_params,
    load_checkpoint,
    pose_loss,
    save_checkpoint,
)
from ..rng import sub_rng
from ..tensor import Graph, Optimizer
from ..tensor.engine import NonFiniteError
from .config import TrainConfig

PRETRAIN_COLUMNS = ("step", "total", "pose_rgb", "pose_pev", "adv_gen", "align_f", "align_z", "div", "disc")
FINETUNE_COLUMNS = ("step", "pose")
TRAINED_GROUPS = ("rgb", "ev", "dec", "pose")
FINETUNE_GROUPS = ("ev", "pose")


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}" + (f" ({detail})" if detail else ""))
        self.step = step


class UnlabeledAccessError(DatasetError):
    pass


class UnlabeledView:
    """Read-only dataset view that refuses pose reads on the given splits."""

    def __init__(self, data: Dataset, hidden: tuple[str, ...]):
        self._data, self._hidden = data, set(hidden)

    def pose(self, split: str, i: int):
        if split in self._hidden:
            raise UnlabeledAccessError(f"pose labels of split {split!r} are off limits here")
        return self._data.pose(split, i)

    def __getattr__(self, name):
        return getattr(self._data, name)


@dataclass
class RunResult:
    checkpoint: Path
    log: Path
    params: ModelParams


def model_config(cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(height=cfg.height, width=cfg.width)


def _check_split(data, name: str, need: int = 1) -> list:
    try:
        recs = data.split(name)
    except DatasetError:
        raise
    if len(recs) < need:
        raise DatasetError(f"split {name!r} has {len(recs)} samples, need {need}")
    return recs


def _check_shape(data, cfg: TrainConfig) -> None:
    dc = data.config
    if (dc.height, dc.width) != (cfg.height, cfg.width):
        raise DatasetError(f"dataset is {dc.height}x{dc.width}, config wants {cfg.height}x{cfg.width}")


def load_rgb(data, split: str) -> tuple[np.ndarray, np.ndarray]:
    n = len(_check_split(data, split))
    imgs = np.stack([data.image(split, i) for i in range(n)])
    poses = np.stack([data.pose(split, i) for i in range(n)])
    return imgs, poses


def load_histograms(data, split: str, n: int | None = None) -> np.ndarray:
    recs = _check_split(data, split)
    n = len(recs) if n is None else min(n, len(recs))
    return np.stack([data.histogram(split, i) for i in range(n)]).astype(np.float64)


def mean_root_centred(poses: np.ndarray) -> np.ndarray:
    return (poses - poses[:, :1]).mean(axis=0)


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


class _Batcher:
    """Endless stream of index batches: shuffled epochs, fresh order each."""

    def __init__(self, rng: np.random.Generator, n: int, batch: int):
        self.rng, self.n, self.batch = rng, n, batch
        self.queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self.queue) < self.batch:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        out, self.queue = self.queue[: self.batch], self.queue[self.batch:]
        return out


@dataclass
class PretrainGraph:
    g: Graph
    total: object
    disc: object
    parts: dict


def build_pretrain_graph(params: ModelParams, cfg: TrainConfig) -> PretrainGraph:
    """Composite objective. Inputs: img (B,H,W,3), logimg (B,H,W), hist
    (B,H,W,2) real event counts, gt (B,J,3) poses of the RGB samples."""
    if cfg.method == "scratch":
        raise TrainingError("the scratch method has no pre-training stage")
    g = Graph()
    net = Net(g, params)
    gc = GraphConstructor(g, cfg.height, cfg.width, cfg.C)
    gt = g.input("gt")
    f_rgb = net.encode_rgb(g.input("img"))
    f_ev, z_ev = net.encode_event(g.input("hist"))
    flow = net.decode_flow(f_rgb, z_ev)
    x0 = g.input("logimg")
    if cfg.method == "iterative":
        flows = [flow] * cfg.T
        x_pev, frames = gc.iterative(x0, flows, cfg.quantize)
        x_rev = gc.reverse(frames, flows, cfg.quantize)
    else:
        # a single estimate over the same net displacement
        x_pev, x_rev = gc.one_shot(x0, g.multiply(flow, g.constant(float(cfg.T)))), None
    f_pev, z_pev = net.encode_event(x_pev)

    fb_rgb, fb_ev, fb_pev = net.normalized(f_rgb), net.normalized(f_ev), net.normalized(f_pev)
    zb_ev, zb_pev = net.normalized(z_ev), net.normalized(z_pev)
    parts = {
        "pose_rgb": pose_loss(g, net.predict_pose(net.pooled(f_rgb)), gt, params.config.joints),
        "pose_pev": pose_loss(g, net.predict_pose(net.pooled(f_pev)), gt, params.config.joints),
        "adv_gen": adversarial_loss(g, None, net.discriminate(fb_ev), "generator"),
        "align_f": alignment_loss(g, fb_rgb, fb_pev),
        "align_z": alignment_loss(g, zb_ev, zb_pev),
    }
    weights = {"pose_rgb": cfg.w_pose_rgb, "pose_pev": cfg.w_pose_pev, "adv_gen": cfg.w_adv, "align_f": cfg.w_align, "align_z": cfg.w_align}
    if x_rev is not None:
        _, z_rev = net.encode_event(x_rev)
        parts["zb_rev"] = net.normalized(z_rev)
        parts["div"] = divergence_loss(g, zb_pev, parts["zb_rev"])
        weights["div"] = cfg.w_div
    total = None
    for k, w in weights.items():
        term = g.multiply(parts[k], g.constant(w))
        total = term if total is None else g.add(total, term)
    disc = adversarial_loss(g, net.discriminate(g.detach(fb_rgb)), net.discriminate(g.detach(fb_ev)), "discriminator")
    parts["flow"] = flow
    parts["x_pev"] = x_pev
    parts["x_rev"] = x_rev
    parts["zb_pev"] = zb_pev
    return PretrainGraph(g, total, disc, parts)


def initial_params(cfg: TrainConfig, mean_pose: np.ndarray) -> ModelParams:
    return init_params(model_config(cfg), cfg.seed, mean_pose)


def pretrain(cfg: TrainConfig, rgb_data, event_data, out_dir: str | Path) -> RunResult:
    """Writes ``pretrain_log.csv``, ``pretrain.ckpt`` and a checkpoint every
    ``checkpoint_every`` steps. Event-split labels are never read."""
    cfg.validate(check_paths=False)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    event_data = UnlabeledView(event_data, (cfg.event_split,))
    _check_shape(rgb_data, cfg)
    _check_shape(event_data, cfg)
    imgs, poses = load_rgb(rgb_data, cfg.rgb_split)
    hists = load_histograms(event_data, cfg.event_split)
    logimgs = log_intensity(imgs[..., 0])

    params = initial_params(cfg, mean_root_centred(poses))
    meta = {"stage": "pretrain", "method": cfg.method, "config": cfg.to_dict()}
    rows = []
    if cfg.pretrain_steps > 0:
        pg = build_pretrain_graph(params, cfg)
        main = Optimizer(params.group(*TRAINED_GROUPS), lr=cfg.lr_pretrain, names=params.names(*TRAINED_GROUPS))
        dopt = Optimizer(params.group("disc"), lr=cfg.lr_disc, names=params.names("disc"))
        disc_params = params.group("disc")
        rng = sub_rng(cfg.seed, "pairing")
        batches = _Batcher(rng, len(imgs), cfg.batch_size)
        keys = PRETRAIN_COLUMNS[2:-1]
        for step in range(1, cfg.pretrain_steps + 1):
            ri = batches.next()
            ei = rng.integers(0, len(hists), size=len(ri))
            bind = {"img": imgs[ri], "logimg": logimgs[ri], "hist": hists[ei], "gt": poses[ri]}
            try:
                pg.g.run(bind)
            except NonFiniteError as exc:
                raise NonFiniteLoss(step, str(exc)) from None
            total = float(pg.g.value(pg.total)[0])
            dval = float(pg.g.value(pg.disc)[0])
            if not (np.isfinite(total) and np.isfinite(dval)):
                raise NonFiniteLoss(step)
            pg.g.backward(pg.total, accumulate=False)
            for p in disc_params:
                p.grad = None
            main.step()
            pg.g.backward(pg.disc, accumulate=False)
            dopt.step()
            rows.append([step, total] + [float(pg.g.value(pg.parts[k])[0]) if k in pg.parts else 0.0 for k in keys] + [dval])
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.pretrain_steps:
                save_checkpoint(out / f"pretrain_step{step:06d}.ckpt", params, {**meta, "step": step})
    log = out / "pretrain_log.csv"
    _write_csv(log, PRETRAIN_COLUMNS, rows)
    ckpt = out / "pretrain.ckpt"
    save_checkpoint(ckpt, params, {**meta, "step": cfg.pretrain_steps})
    return RunResult(ckpt, log, params)


def scratch_checkpoint(cfg: TrainConfig, data, out_dir: str | Path) -> RunResult:
    """Untrained starting point for the from-scratch baseline, its pose bias
    taken from the labeled fine-tuning samples only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(_check_split(data, cfg.finetune_split))
    poses = np.stack([data.pose(cfg.finetune_split, i) for i in range(min(n, cfg.finetune_samples))])
    params = initial_params(cfg, mean_root_centred(poses))
    ckpt = out / "pretrain.ckpt"
    save_checkpoint(ckpt, params, {"stage": "init", "method": cfg.method, "config": cfg.to_dict(), "step": 0})
    log = out / "pretrain_log.csv"
    _write_csv(log, PRETRAIN_COLUMNS, [])
    return RunResult(ckpt, log, params)


def load_for(cfg: TrainConfig, checkpoint: str | Path) -> tuple[ModelParams, dict]:
    params, header, _ = load_checkpoint(checkpoint)
    if params.config != model_config(cfg):
        raise ArchitectureMismatch(f"checkpoint {checkpoint} holds a {params.config} model, config wants {model_config(cfg)}")
    return params, header


def build_pose_graph(params: ModelParams):
    g = Graph()
    net = Net(g, params)
    f, _ = net.encode_event(g.input("hist"))
    pred = net.predict_pose(net.pooled(f))
    return g, pred, pose_loss(g, pred, g.input("gt"), params.config.joints)


def finetune(cfg: TrainConfig, checkpoint: str | Path, data, out_dir: str | Path, n_samples: int | None = None) -> RunResult:
    """Pose loss on the first ``finetune_samples`` labeled event windows;
    only the event encoder and the pose head move."""
    cfg.validate(check_paths=False)
    n_samples = cfg.finetune_samples if n_samples is None else n_samples
    if n_samples < 1:
        raise TrainingError("fine-tuning needs at least one labeled sample")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, header = load_for(cfg, checkpoint)
    _check_shape(data, cfg)
    n = min(n_samples, len(_check_split(data, cfg.finetune_split)))
    hists = load_histograms(data, cfg.finetune_split, n)
    poses = np.stack([data.pose(cfg.finetune_split, i) for i in range(n)])
    rows = []
    if cfg.finetune_steps > 0:
        g, _, loss = build_pose_graph(params)
        # the motion head does not feed the pose and stays as pre-trained
        names = [n for n in params.names(*FINETUNE_GROUPS) if not n.startswith("ev/motion/")]
        opt = Optimizer([params[n] for n in names], lr=cfg.lr_finetune, names=names)
        batches = _Batcher(sub_rng(cfg.seed, "finetune"), n, min(cfg.batch_size, n))
        for step in range(1, cfg.finetune_steps + 1):
            idx = batches.next()
            try:
                g.run({"hist": hists[idx], "gt": poses[idx]})
            except NonFiniteError as exc:
                raise NonFiniteLoss(step, str(exc)) from None
            val = float(g.value(loss)[0])
            if not np.isfinite(val):
                raise NonFiniteLoss(step)
            g.backward(loss, accumulate=False)
            opt.step()
            rows.append([step, val])
    log = out / "finetune_log.csv"
    _write_csv(log, FINETUNE_COLUMNS, rows)
    ckpt = out / "finetune.ckpt"
    meta = {k: v for k, v in header.items() if k not in ("architecture", "arrays")}
    save_checkpoint(ckpt, params, {**meta, "stage": "finetune", "finetune_steps": cfg.finetune_steps, "finetune_samples": n})
    return RunResult(ckpt, log, params)


def predict_poses(params: ModelParams, hists: np.ndarray, chunk: int = 50) -> np.ndarray:
    g, pred, _ = build_pose_graph(params)
    out = []
    for s in range(0, len(hists), chunk):
        part = hists[s:s + chunk]
        g.run({"hist": part, "gt": np.zeros((len(part), params.config.joints, 3))})
        out.append(g.value(pred).copy())
    return np.concatenate(out)
