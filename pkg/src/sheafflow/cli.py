"""Command-line entry point.

Subcommands: run, demo2d, score, bench-ift, tear, kramers. Each consumes
a JSON config (embedded defaults for the canned experiments), applies
flag overrides at dotted key paths, validates, executes, and writes
artifacts under a per-run timestamped directory together with the
resolved config.

Exit codes: 0 success, 1 runtime abort, 2 config error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config, parse_config
from .experiments import (
    DEFAULT_CONFIGS,
    run_bench_experiment,
    run_flow_experiment,
    run_kramers_experiment,
    run_score_experiment,
    run_tear_experiment,
)
from .flow import FlowDiverged

OUT_ENV_VAR = "SHEAFFLOW_OUT"


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a JSON experiment config")
    p.add_argument("--out", help="output directory (default $SHEAFFLOW_OUT or ./runs)")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key at a dotted path, e.g. flow.eta=0.005",
    )
    p.add_argument("--seed", type=int, help="override flow.seed")
    p.add_argument("--threads", type=int, help="override flow.threads (1 = bit-reproducible)")


def _add_flow_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="override flow.steps")
    p.add_argument("--eta", type=float, help="override flow.eta")
    p.add_argument("--epsilon", type=float, help="override flow.epsilon")
    p.add_argument("--snapshot-every", type=int, help="override flow.snapshot_every")
    p.add_argument("--sinkhorn-tol", type=float, help="override flow.sinkhorn.tol")
    p.add_argument(
        "--sinkhorn-max-iters", type=int, help="override flow.sinkhorn.max_iters"
    )
    p.add_argument(
        "--noise-convention",
        choices=("alg1", "sde"),
        help="override flow.noise_convention",
    )
    p.add_argument("--drift-clip", type=float, help="override flow.drift_clip")
    p.add_argument(
        "--half-energy",
        action="store_true",
        default=None,
        help="report half the once-per-edge energy",
    )
    p.add_argument(
        "--hodge",
        action="store_true",
        default=None,
        help="emit stationarity and eigenvalue probes into the summary",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sheafflow",
        description="Entropic sheaf flow experiments on causal DAGs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="generic flow from a config file")
    p_demo = sub.add_parser("demo2d", help="the embedded 3-node 2D conflict")
    p_demo.add_argument("--n", type=int, help="particles per node (default 300)")
    p_score = sub.add_parser("score", help="rank candidate graphs by topological score")
    p_bench = sub.add_parser("bench-ift", help="IFT vs unrolled gradient benchmark")
    p_tear = sub.add_parser("tear", help="paired deterministic vs noisy runs")
    p_tear.add_argument("--tear-seeds", type=int, help="override tear.seeds")
    p_kram = sub.add_parser("kramers", help="first-hitting times over an epsilon list")
    p_kram.add_argument("--kramers-seeds", type=int, help="override kramers.seeds")
    p_kram.add_argument("--max-steps", type=int, help="override kramers.max_steps")
    p_kram.add_argument("--threshold", type=float, help="override kramers.threshold")

    for p in (p_run, p_demo, p_score, p_bench, p_tear, p_kram):
        _add_common_flags(p)
    for p in (p_run, p_demo, p_score, p_tear, p_kram):
        _add_flow_flags(p)
    return parser


_FLAG_PATHS = {
    "seed": "flow.seed",
    "threads": "flow.threads",
    "steps": "flow.steps",
    "eta": "flow.eta",
    "epsilon": "flow.epsilon",
    "snapshot_every": "flow.snapshot_every",
    "sinkhorn_tol": "flow.sinkhorn.tol",
    "sinkhorn_max_iters": "flow.sinkhorn.max_iters",
    "noise_convention": "flow.noise_convention",
    "drift_clip": "flow.drift_clip",
    "half_energy": "flow.half_energy",
    "hodge": "hodge",
    "tear_seeds": "tear.seeds",
    "kramers_seeds": "kramers.seeds",
    "max_steps": "kramers.max_steps",
    "threshold": "kramers.threshold",
}


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for attr, dotted in _FLAG_PATHS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = _parse_value(value)
    return overrides


def _base_config(command: str, args: argparse.Namespace) -> dict:
    if args.config:
        return load_config(args.config)
    if command == "demo2d":
        from .experiments import demo2d_config

        return demo2d_config(n=args.n or 300)
    if command in DEFAULT_CONFIGS:
        return DEFAULT_CONFIGS[command]()
    raise ConfigError("config", f"subcommand {command!r} requires --config")


def _make_run_dir(args: argparse.Namespace, cfg_out: str, experiment: str) -> Path:
    base = args.out or cfg_out or os.environ.get(OUT_ENV_VAR) or "runs"
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = Path(base) / f"{experiment}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


_SUMMARY_FILES = {
    "run": "summary.json",
    "demo2d": "summary.json",
    "score": "score_report.json",
    "bench-ift": "bench.json",
    "tear": "comparison.json",
    "kramers": "kramers.json",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        raw = _base_config(command, args)
        if command == "demo2d" and args.n and args.config:
            for spec in raw.get("init", {}).values():
                if isinstance(spec, dict) and spec.get("kind") == "gaussian":
                    spec["n"] = args.n
        raw = apply_overrides(raw, _collect_overrides(args))
        raw.setdefault("experiment", command)
        if raw["experiment"] != command:
            raise ConfigError(
                "experiment",
                f"config declares {raw['experiment']!r} but subcommand is {command!r}",
            )
        cfg = parse_config(raw)
        run_dir = _make_run_dir(args, cfg.out_dir, command)
        with open(run_dir / "config.resolved.json", "w") as fh:
            json.dump(raw, fh, indent=2)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if command in ("run", "demo2d"):
            result = run_flow_experiment(cfg, run_dir)
        elif command == "score":
            result = run_score_experiment(cfg, run_dir)
        elif command == "bench-ift":
            result = run_bench_experiment(cfg, run_dir)
        elif command == "tear":
            result = run_tear_experiment(cfg, run_dir)
        else:
            result = run_kramers_experiment(cfg, run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FlowDiverged as exc:
        if exc.trace is not None and exc.trace.rows:
            exc.trace.to_csv(run_dir / "trace.csv")
        with open(run_dir / _SUMMARY_FILES[command], "w") as fh:
            json.dump({"aborted_step": exc.step, "aborted_node": exc.node}, fh, indent=2)
        print(f"flow aborted: {exc} (artifacts in {run_dir})", file=sys.stderr)
        return 1

    with open(run_dir / _SUMMARY_FILES[command], "w") as fh:
        json.dump(result, fh, indent=2)
    print(str(run_dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())
