"""Command-line surface: train, eval, sweep, analyze.

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

from . import runio, trainer
from .config import load_config, set_key
from .errors import ConfigError, DivergenceError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lenrl",
        description="Desk-scale length-controlled policy-gradient lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training job")
    p_train.add_argument("--config", required=True, help="path to a key=value config file")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="run directory (default: under the output root)")

    p_eval = sub.add_parser("eval", help="re-evaluate a finished run")
    p_eval.add_argument("--run", required=True, help="run directory")

    p_sweep = sub.add_parser("sweep", help="one run per value of a config key")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", required=True, help="config key to vary, e.g. shaping.beta")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--parallel", type=int, default=1)
    p_sweep.add_argument("--out", default=None, help="output root for the sweep's run dirs")

    p_analyze = sub.add_parser("analyze", help="export the frontier table for finished runs")
    p_analyze.add_argument("--runs", required=True, help="glob over run directories")
    p_analyze.add_argument("--out", default="frontier.csv")
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = set_key(cfg, "seed", args.seed)
    manifest = runio.execute_run(cfg, out_dir=args.out)
    print(f"run {manifest.run_id} -> {manifest.run_dir} [{manifest.status}]")
    return 0


def _cmd_eval(args) -> int:
    manifest = runio.RunManifest.load(args.run)
    cfg = load_config(manifest.run_dir / manifest.artifacts["config"])
    params = runio.load_params(manifest.run_dir / manifest.artifacts["params"])
    result = trainer.evaluate(params, cfg)
    print(f"accuracy = {result.accuracy!r}")
    print(f"mean_length = {result.mean_length!r}")
    print(f"mean_reward = {result.mean_reward!r}")
    for name, value in result.report.as_dict().items():
        print(f"{name} = {'' if value is None else repr(value)}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    manifests = runio.sweep(cfg, args.axis, values, out_root=args.out, parallel=args.parallel)
    for manifest in manifests:
        print(f"run {manifest.run_id} -> {manifest.run_dir} [{manifest.status}]")
    diverged = [m for m in manifests if m.status == runio.STATUS_DIVERGED]
    return 3 if diverged else 0


def _cmd_analyze(args) -> int:
    manifests = runio.find_manifests(args.runs)
    if not manifests:
        print(f"no runs match {args.runs!r}", file=sys.stderr)
        return 4
    rows = runio.export_frontier(manifests)
    runio.write_frontier(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "sweep": _cmd_sweep,
        "analyze": _cmd_analyze,
    }[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
