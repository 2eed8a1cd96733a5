import json
import subprocess
import sys
from pathlib import Path

import pytest


def run_primary(args, out_dir: Path) -> Path:
    """Invokes the sheafflow CLI in a subprocess (external interface only)
    and returns the run directory it created."""
    cmd = [sys.executable, "-m", "sheafflow.cli", *args, "--out", str(out_dir)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return Path(proc.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="session")
def primary_artifacts(tmp_path_factory):
    """Small real artifacts of every schema the plots consume."""
    base = tmp_path_factory.mktemp("primary")
    demo = run_primary(
        ["demo2d", "--n", "40", "--steps", "20", "--snapshot-every", "5"],
        base / "demo",
    )

    score_cfg = {
        "experiment": "score",
        "graph": {"nodes": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}], "edges": []},
        "init": {
            "A": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": 30, "seed": 1},
            "B": {"kind": "gaussian", "mean": [2.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": 30, "seed": 2},
        },
        "flow": {"eta": 0.01, "epsilon": 0.2, "steps": 20, "snapshot_every": 5,
                 "sinkhorn": {"max_iters": 60, "tol": 1e-4}},
        "score": {
            "tail": 3,
            "candidates": [
                {"label": "chain", "graph": {
                    "nodes": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}],
                    "edges": [{"src": "A", "dst": "B",
                               "mechanism": {"kind": "shift", "b": [2.0, 0.0]}}],
                }},
                {"label": "conflicted", "graph": {
                    "nodes": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}],
                    "edges": [{"src": "A", "dst": "B",
                               "mechanism": {"kind": "shift", "b": [-3.0, 1.0]}}],
                }},
            ],
        },
    }
    score_file = base / "score.json"
    score_file.write_text(json.dumps(score_cfg))
    score = run_primary(["score", "--config", str(score_file)], base / "score_out")

    bench = run_primary(
        [
            "bench-ift",
            "--set", "bench.sizes=[6]",
            "--set", "bench.horizons=[4,16]",
            "--set", "bench.epsilons=[0.5]",
        ],
        base / "bench",
    )

    kramers = run_primary(
        [
            "kramers",
            "--kramers-seeds", "2",
            "--max-steps", "400",
            "--set", "kramers.epsilons=[0.4,0.8]",
        ],
        base / "kramers",
    )

    return {
        "trace": demo / "trace.csv",
        "clouds": sorted(demo.glob("cloud_*.csv")),
        "score_traces": sorted(score.glob("score_trace_*.csv")),
        "bench": bench / "bench.json",
        "kramers": kramers / "kramers.json",
    }
