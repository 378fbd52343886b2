"""Command-line entry point: ``evpretrain <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .hand.dataset import DatasetError

log = logging.getLogger("evpretrain")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _config(args):
    from .pipeline.config import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "data", None):
        cfg = cfg.replace(data_dir=str(args.data))
    return cfg


def _dataset(cfg, args):
    from .hand.dataset import Dataset

    root = getattr(args, "data", None) or cfg.data_dir
    if root is None:
        raise CliError(EXIT_DATA, "no dataset given (use --data or data_dir in the config)")
    return Dataset(root)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise CliError(EXIT_DATA, "--checkpoint is required")
    p = Path(args.checkpoint)
    if not p.exists():
        raise CliError(EXIT_DATA, f"checkpoint {p} does not exist")
    return p


def cmd_gen_data(args) -> int:
    from .hand.dataset import DatasetConfig, generate_dataset

    cfg = _config(args)
    extra = {}
    if args.dataset_config:
        try:
            extra = json.loads(Path(args.dataset_config).read_text() or "{}")
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot read dataset config: {exc}") from None
    base = {"height": cfg.height, "width": cfg.width, "C": cfg.C, "oracle_mode": cfg.oracle_mode}
    try:
        dcfg = DatasetConfig.from_dict({**base, **extra})
    except (DatasetError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = _out(args, "data")
    manifest = generate_dataset(cfg.seed, dcfg, out)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote dataset to {out}: {counts}")
    return EXIT_OK


def cmd_construct(args) -> int:
    """Replays every flow sample of a dataset through the iterative and the
    one-shot construction and scores both against the oracle."""
    from .construction import histogram_l1, iterative_construct, one_shot_construct
    from .events import events_to_histogram, log_intensity, oracle_simulate_events
    from .pipeline.benchmark import write_table
    from .pipeline.evaluation import dump_trace

    cfg = _config(args)
    data = _dataset(cfg, args)
    out = _out(args, "construct")
    rows = []
    n = len(data.split("flow"))
    if n == 0:
        raise CliError(EXIT_DATA, "dataset has no flow samples")
    for i in range(n):
        frames, flows, _ = data.flow_sample(i)
        logs = log_intensity(frames)
        oracle = events_to_histogram(oracle_simulate_events(list(logs), cfg.C, reset_per_pair=cfg.oracle_mode == "reset_per_pair"))
        trace = iterative_construct(logs[0], list(flows), len(flows), cfg.C, cfg.quantize)
        one = one_shot_construct(logs[0], flows.sum(axis=0), cfg.C)
        rows.append((i, int(oracle.sum()), histogram_l1(trace.final, oracle), histogram_l1(one, oracle)))
        if i == 0:
            dump_trace(trace, out / "frames", "flow000000")
    write_table(out / "construct.csv", ("index", "oracle_events", "l1_iterative", "l1_one_shot"), rows)
    r = np.array(rows, dtype=float)
    print(f"{n} samples: iterative beats one-shot on {np.mean(r[:, 2] < r[:, 3]):.0%}, mean L1 ratio {np.mean(r[:, 2] / np.maximum(r[:, 3], 1)):.3f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pipeline.training import pretrain, scratch_checkpoint

    cfg = _config(args)
    data = _dataset(cfg, args)
    out = _out(args, "pretrain")
    res = scratch_checkpoint(cfg, data, out) if cfg.method == "scratch" else pretrain(cfg, data, data, out)
    print(f"checkpoint {res.checkpoint}, log {res.log}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .pipeline.training import finetune

    cfg = _config(args)
    data = _dataset(cfg, args)
    res = finetune(cfg, _need_checkpoint(args), data, _out(args, "finetune"))
    print(f"checkpoint {res.checkpoint}, log {res.log}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline.evaluation import evaluate

    cfg = _config(args)
    data = _dataset(cfg, args)
    report = evaluate(cfg, _need_checkpoint(args), data, args.split)
    report.write(_out(args, "eval"), args.tag)
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_report(args) -> int:
    from .construction import iterative_construct
    from .events import log_intensity
    from .pipeline.evaluation import EvalReport, export_report

    if not args.reports:
        raise CliError(EXIT_DATA, "give at least one eval_*.json report")
    reports = []
    for p in args.reports:
        try:
            reports.append(EvalReport.from_json(json.loads(Path(p).read_text())))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise CliError(EXIT_DATA, f"cannot read report {p}: {exc}") from None
    traces = {}
    if args.data:
        cfg = _config(args)
        data = _dataset(cfg, args)
        if data.split("flow"):
            frames, flows, _ = data.flow_sample(0)
            traces["flow000000"] = iterative_construct(log_intensity(frames[0]), list(flows), len(flows), cfg.C, cfg.quantize)
    path = export_report(reports, _out(args, "report"), traces)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .pipeline.benchmark import composite_gradcheck
    from .tensor.primitives import check_primitives

    seed = args.seed or 0
    ok = True
    for kind, reps in check_primitives(trials=args.trials, seed=seed).items():
        worst = max(r.max_rel_error for r in reps)
        passed = all(r.passed for r in reps)
        ok &= passed
        print(f"{kind:>24}: {len(reps)} trials, max rel err {worst:.2e} {'ok' if passed else 'FAIL'}")
    for method, quantize in (("iterative", "per_iteration"), ("iterative", "final"), ("one_shot", "per_iteration")):
        total, disc, _ = composite_gradcheck(seed, method, quantize)
        passed = total.passed and disc.passed
        ok &= passed
        print(f"composite {method}/{quantize}: max rel err {max(total.max_rel_error, disc.max_rel_error):.2e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "construct": cmd_construct,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="training config JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="evpretrain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "gen-data":
            sp.add_argument("--dataset-config", help="JSON with dataset size overrides")
        elif name == "eval":
            sp.add_argument("--split", help="split to evaluate (default: config eval_split)")
            sp.add_argument("--tag", help="file tag for the outputs (default: method)")
        elif name == "report":
            sp.add_argument("reports", nargs="*", help="eval_*.json files")
        elif name == "gradcheck":
            sp.add_argument("--trials", type=int, default=25)
    return p


def main(argv=None) -> int:
    from .model import ArchitectureMismatch
    from .pipeline.config import ConfigError
    from .pipeline.evaluation import ReportError
    from .pipeline.training import NonFiniteLoss, TrainingError
    from .tensor.engine import NonFiniteError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ArchitectureMismatch, ReportError, TrainingError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
