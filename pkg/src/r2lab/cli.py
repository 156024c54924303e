"""Command-line front end: ``r2lab pretrain|qat|compress|report|verify``.

Every output file is written to a temp name and renamed into place, so a
crashed run leaves files either complete or absent.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import analytics, verify
from .checkpoint import atomic_write, config_hash, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ConfigError, R2LabError

log = logging.getLogger("r2lab")

CHECKPOINT_NAME = "checkpoint"
THREADS_ENV = "R2LAB_THREADS"


def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {raw!r}")
    return n


def _num(v):
    # repr keeps every bit of a float64, so reruns compare byte for byte
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    columns = list(history[0]) if history else []
    writer.writerow(columns)
    for row in history:
        writer.writerow([_num(row[c]) for c in columns])
    return buf.getvalue()


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def load_config(path, phase):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path}: invalid JSON ({e})") from None
    train = raw.get("train") if isinstance(raw, dict) else None
    if isinstance(train, dict) and train.get("phase", phase) != phase:
        raise ConfigError("train.phase", f"config says {train['phase']!r} but the command is {phase!r}")
    if isinstance(train, dict):
        raw = {**raw, "train": {**train, "phase": phase}}
    elif isinstance(raw, dict) and "train" not in raw:
        raw = {**raw, "train": {"phase": phase}}
    return ExperimentConfig.from_dict(raw)


def _init_path(path):
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    manifest = p if p.suffix == ".json" else p.with_name(p.name + ".json")
    if not manifest.exists():
        raise FileNotFoundError(f"checkpoint not found: {manifest}")
    return p


def run_phase(args):
    from . import trainer

    cfg = load_config(args.config, args.cmd)
    out = Path(args.out)
    if args.cmd == "pretrain":
        ckpt, history = trainer.run_pretrain(cfg, seed=args.seed)
    else:
        init = load_checkpoint(_init_path(args.init))
        runner = trainer.run_qat if args.cmd == "qat" else trainer.run_compress
        ckpt, history = runner(cfg, init, seed=args.seed)
    resolved = cfg.to_dict()
    summary = dict(ckpt.metrics)
    summary.update({"seed": ckpt.seed, "config_hash": config_hash(resolved),
                    "epochs": len(history), "final": history[-1] if history else None})
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    atomic_write(out / "metrics.csv", metrics_csv(history))
    atomic_write(out / "config.json", _json(resolved))
    atomic_write(out / "summary.json", _json(summary))
    print(f"{args.cmd}: test_acc={summary['test_acc']:.4f} -> {out}")
    return 0


def run_report(args):
    a = load_checkpoint(_init_path(args.a))
    b = load_checkpoint(_init_path(args.b))
    if a.model.spec() != b.model.spec():
        raise R2LabError("checkpoints have different architectures")
    out = Path(args.out)
    bins = (a.config or {}).get("report", {}).get("hist_bins", 50)
    rows = analytics.stats_table(a.model, b.model)
    atomic_write(out / "stats_table.csv", analytics.format_table(rows, fmt="{!r}"))
    skew = []
    for tag, ck in (("a", a), ("b", b)):
        for name, w in ck.model.weights().items():
            st = analytics.layer_stats(w, name, bins)
            atomic_write(out / f"hist_{tag}_{name}.txt", analytics.histogram_text(st.edges, st.counts))
            skew.append({"checkpoint": tag, "layer": name, **analytics.skew_check(w),
                         "kurtosis": st.kurtosis if st.kurtosis is not None else float("nan")})
    atomic_write(out / "skew.csv", analytics.format_table(skew, fmt="{!r}"))
    meta = {"a": str(args.a), "b": str(args.b), "seed_a": a.seed, "seed_b": b.seed,
            "std": "population", "kurtosis": "pearson (normal 3, uniform 1.8)", "hist_bins": bins}
    atomic_write(out / "report.json", _json(meta))
    for r in rows:
        print(f"{r['layer']}: range {r['range_a']:.4g} / {r['range_b']:.4g} = {r['range_ratio']:.3f}")
    return 0


def run_verify(args):
    results = verify.run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="r2lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name in ("pretrain", "qat", "compress"):
        p = sub.add_parser(name, help=f"run the {name} phase")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--init", help="checkpoint to start from (required for qat/compress)")
    p = sub.add_parser("report", help="compare the weight distributions of two checkpoints")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("verify", help="run the gradient/limit/palette oracle suites")
    p.add_argument("--suite", choices=("grad", "limits", "palette", "all"), default="all")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cmd in ("qat", "compress") and not args.init:
        parser.error(f"argument --init is required for {args.cmd}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            if args.cmd == "report":
                return run_report(args)
            if args.cmd == "verify":
                return run_verify(args)
            return run_phase(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except R2LabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
