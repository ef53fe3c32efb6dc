"""Run the 3x3 cooling-grid desk experiment and keep its artifacts under results/desk.

Usage: python scripts/run_desk.py [--out results/desk] [--parallelism N]

Besides the usual ``run`` outputs this writes ``run_info.json`` with the
wall-clock time and the worker count, which the acceptance tests report.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

from bayesmpc.bench import desk_config
from bayesmpc.cli import EXIT_OK, main
from bayesmpc.config import config_hash, write_config

ROOT = Path(__file__).resolve().parents[1]


def run_desk(out: Path, parallelism: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg = desk_config()
    config_path = out / "desk.toml"
    write_config(cfg, config_path)
    start = time.perf_counter()
    code = main(["run", "--config", str(config_path), "--out", str(out), "--parallelism", str(parallelism)])
    if code != EXIT_OK:
        raise SystemExit(code)
    info = {
        "config_hash": config_hash(cfg),
        "seconds": round(time.perf_counter() - start, 1),
        "parallelism": parallelism,
        "cpu_count": os.cpu_count(),
        "machine": platform.machine(),
        "python": platform.python_version(),
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")
    return info


def main_cli(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(ROOT / "results" / "desk"))
    p.add_argument("--parallelism", type=int, default=min(20, os.cpu_count() or 1))
    args = p.parse_args(argv)
    info = run_desk(Path(args.out), args.parallelism)
    print(json.dumps(info))
    return 0


if __name__ == "__main__":
    sys.exit(main_cli())
