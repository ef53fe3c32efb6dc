"""Command-line front end: ``run`` experiments, ``compare`` result sets, ``check`` a config.

Result directories hold long-format CSV files (one header row, a leading
``# created`` comment line with the only non-deterministic content), a
``summary.json`` report, the normalized ``config.toml`` and ``schema.json``
describing every column.

Exit codes: 0 success, 2 configuration or usage error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_hash, load_config, parse_seeds, write_config
from .metrics import (
    InsufficientData,
    assess_seed,
    estimate_policy_lipschitz,
    regret_bound_ingredients,
    reward_lipschitz,
    sublinearity_fit,
    summarize,
    value_lipschitz_bound,
)
from .mpc import MpcSolveError, min_penalty_weight
from .posterior import map_estimate
from .sim import AGENTS, BAYES, NOMINAL, EpisodeSolveError, Streams, draw_truth, run_learning

SCHEMA_VERSION = 1
OUT_ENV = "BAYESMPC_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

STEP_COLUMNS = ["schema_version", "config_hash", "seed", "agent", "episode", "t", "x_*", "u_*", "reward", "max_slack"]
EPISODE_COLUMNS = [
    "schema_version", "config_hash", "seed", "agent", "episode", "regret", "regret_stderr",
    "cumulative_regret", "unsafe_observed", "unsafe_expected", "max_slack",
]
CURVE_COLUMNS = [
    "schema_version", "config_hash", "result_set", "agent", "episode",
    "mean_cumulative_regret", "q25_cumulative_regret", "q75_cumulative_regret", "mean_max_slack",
]
COLUMN_DOC = {
    "schema_version": "integer version of this file layout",
    "config_hash": "digest of the experiment config (seeds excluded); results are only comparable when equal",
    "seed": "experiment seed; fixes the true plant and every noise stream",
    "agent": f"one of {', '.join(AGENTS)}",
    "episode": "episode index e = 0..N-1",
    "t": "time step within the episode",
    "x_*": "state x_i(t) before the input is applied, one column per state",
    "u_*": "applied input u_j(t), one column per input",
    "reward": "measured (noisy) reward r(t)",
    "max_slack": "largest realized slack of the delta_0-tightened state constraints (per step, or max over the episode)",
    "regret": "Monte-Carlo estimate of the oracle value minus the value of this episode's policy",
    "regret_stderr": "standard error of the regret estimate over the shared rollouts",
    "cumulative_regret": "prefix sum of the regret estimates up to this episode",
    "unsafe_observed": "1 if a realized state left the constraint set in this episode",
    "unsafe_expected": "1 if the expected constraint excess is positive at the 95% lower confidence bound",
    "result_set": "index of the result directory in the compare command line",
    "mean_cumulative_regret": "mean over seeds of the cumulative regret",
    "q25_cumulative_regret": "25th percentile over seeds",
    "q75_cumulative_regret": "75th percentile over seeds",
    "mean_max_slack": "mean over seeds of the per-episode max slack",
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header: list, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# created {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# -- running ---------------------------------------------------------------


def run_seed(cfg: ExperimentConfig, seed: int, agents=None) -> dict:
    """Learning runs for every agent on the truth of one seed, plus their regret metrics."""
    agents = tuple(agents or cfg.agents)
    truth = draw_truth(cfg.prior, cfg.x0_dist, Streams(seed).rng("truth"))
    traces = {a: run_learning(a, truth, cfg.prior, cfg.N, cfg.spec, seed) for a in agents}
    metrics = assess_seed(truth, traces, cfg.spec, cfg.M, seed)
    return {"seed": seed, "traces": traces, "metrics": metrics}


def _seed_job(args):
    cfg, seed, agents = args
    try:
        return run_seed(cfg, seed, agents)
    except EpisodeSolveError as exc:
        return {"seed": seed, "error": str(exc)}
    except MpcSolveError as exc:
        return {"seed": seed, "error": f"seed {seed}, regret rollouts: {exc}"}


def _step_rows(cfg, h, result):
    for agent, trace in result["traces"].items():
        for ep in trace.episodes:
            for t in range(ep.T):
                yield [SCHEMA_VERSION, h, result["seed"], agent, ep.episode, t, *ep.x[t], *ep.u[t], ep.r[t],
                       float(np.max(ep.rho[t])) if ep.rho.shape[1] else 0.0]


def _episode_rows(h, result):
    for agent, m in result["metrics"].items():
        for e in range(len(m.regret)):
            yield [SCHEMA_VERSION, h, result["seed"], agent, e, m.regret[e], m.regret_stderr[e], m.cumulative[e],
                   m.observed_unsafe_flags[e], m.expected_unsafe_flags[e], m.max_slack[e]]


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _config_failure(exc, args)
    try:
        seeds = parse_seeds(args.seeds) if args.seeds else cfg.seeds
        agents = tuple(a.strip() for a in args.agents.split(",")) if args.agents else cfg.agents
    except ValueError as exc:
        return _config_failure(ConfigError([f"--seeds: {exc}"]), args)
    bad = [a for a in agents if a not in AGENTS]
    if bad:
        return _config_failure(ConfigError([f"--agents: unknown agent(s) {bad}; expected a subset of {AGENTS}"]), args)
    out = Path(args.out or os.environ.get(OUT_ENV, "results"))
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    start = time.perf_counter()
    jobs = [(cfg, s, agents) for s in seeds]
    if args.parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.parallelism) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_seed_job(job))
            if "error" in results[-1]:
                break
            if not args.json:
                print(f"seed {job[1]} done ({time.perf_counter() - start:.0f} s)", file=sys.stderr)
    failed = [r for r in results if "error" in r]
    if failed:
        print(f"solver failure: {failed[0]['error']}", file=sys.stderr)
        return EXIT_SOLVER

    n, m = cfg.prior.n, cfg.prior.m
    step_header = STEP_COLUMNS[:6] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)] + STEP_COLUMNS[-2:]
    _write_csv(out / "steps.csv", step_header, (row for r in results for row in _step_rows(cfg, h, r)))
    _write_csv(out / "episodes.csv", EPISODE_COLUMNS, (row for r in results for row in _episode_rows(h, r)))
    report = summarize([r["metrics"] for r in results], cfg.c_delta)
    summary = {"schema_version": SCHEMA_VERSION, "config_hash": h, "seeds": list(seeds), "agents": list(agents),
               "report": report.to_dict()}
    if BAYES in report.agents and NOMINAL in report.agents:
        summary["bayes_vs_nominal_reduction"] = report.reduction(BAYES, NOMINAL)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "schema.json").write_text(json.dumps(_schema(step_header), indent=2) + "\n")
    write_config(cfg, out / "config.toml")
    elapsed = time.perf_counter() - start
    line = {a: s.final_mean for a, s in report.agents.items()}
    if args.json:
        print(json.dumps({"out": str(out), "config_hash": h, "final_mean_cumulative_regret": line,
                          "seconds": round(elapsed, 1)}))
    else:
        for a, v in line.items():
            print(f"{a:22s} final mean cumulative regret {v:10.4f}")
        print(f"wrote {out} in {elapsed:.0f} s")
    return EXIT_OK


def _schema(step_header) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "files": {
            "steps.csv": STEP_COLUMNS,
            "episodes.csv": EPISODE_COLUMNS,
            "curves.csv": CURVE_COLUMNS,
        },
        "steps.csv columns in this run": step_header,
        "columns": COLUMN_DOC,
        "note": "the first line of every CSV is a '# created <UTC time>' comment",
    }


# -- comparing -------------------------------------------------------------


def _load_results(path: Path):
    rows = _read_csv(path / "episodes.csv")
    hashes = {r["config_hash"] for r in rows}
    by_agent: dict = {}
    for r in rows:
        by_agent.setdefault(r["agent"], {}).setdefault(int(r["seed"]), []).append(r)
    curves = {}
    for agent, seeds in by_agent.items():
        cr = np.array([[float(x["cumulative_regret"]) for x in sorted(v, key=lambda x: int(x["episode"]))]
                       for _, v in sorted(seeds.items())])
        slack = np.array([[float(x["max_slack"]) for x in sorted(v, key=lambda x: int(x["episode"]))]
                          for _, v in sorted(seeds.items())])
        curves[agent] = (cr, slack)
    return hashes, curves


def cmd_compare(args) -> int:
    dirs = [Path(d) for d in args.results]
    if len(dirs) < 2:
        return _config_failure(ConfigError(["compare: need at least two result directories"]), args)
    loaded = []
    for d in dirs:
        try:
            loaded.append(_load_results(d))
        except (OSError, KeyError, ValueError) as exc:
            return _config_failure(ConfigError([f"{d}: cannot read episodes.csv ({exc})"]), args)
    hashes = set().union(*(h for h, _ in loaded))
    if len(hashes) != 1:
        return _config_failure(ConfigError([f"config_hash: result sets come from different configs {sorted(hashes)}"]), args)
    h = hashes.pop()
    rows, summary = [], {"config_hash": h, "result_sets": [str(d) for d in dirs], "agents": {}}
    for k, (_, curves) in enumerate(loaded):
        for agent, (cr, slack) in sorted(curves.items()):
            mean, q25, q75 = cr.mean(0), np.percentile(cr, 25, axis=0), np.percentile(cr, 75, axis=0)
            ms = slack.mean(0)
            for e in range(cr.shape[1]):
                rows.append([SCHEMA_VERSION, h, k, agent, e, mean[e], q25[e], q75[e], ms[e]])
            try:
                p = sublinearity_fit(mean)
            except InsufficientData:
                p = None
            entry = summary["agents"].setdefault(agent, {"final_mean": [], "sublinearity": [], "difference_vs_first": []})
            entry["final_mean"].append(float(mean[-1]))
            entry["sublinearity"].append(p)
            first = entry["final_mean"][0]
            entry["difference_vs_first"].append(float((mean[-1] - first) / abs(first)) if first != 0 else 0.0)
    for k in range(len(loaded)):
        fm = {a: v["final_mean"][k] for a, v in summary["agents"].items()}
        if BAYES in fm and NOMINAL in fm and fm[NOMINAL] != 0:
            summary.setdefault("bayes_vs_nominal_reduction", []).append((fm[NOMINAL] - fm[BAYES]) / fm[NOMINAL])
    out = Path(args.out or os.environ.get(OUT_ENV, "comparison"))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "curves.csv", CURVE_COLUMNS, rows)
    (out / "comparison.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for agent, v in summary["agents"].items():
            diffs = ", ".join(f"{100 * d:+.1f}%" for d in v["difference_vs_first"])
            print(f"{agent:22s} final mean CR {v['final_mean']}  vs first set: {diffs}")
        for k, red in enumerate(summary.get("bayes_vs_nominal_reduction", [])):
            print(f"set {k}: {BAYES} reduces {NOMINAL} regret by {100 * red:.1f}%")
    return EXIT_OK


# -- checking --------------------------------------------------------------


def check_report(cfg: ExperimentConfig, lipschitz_pairs: int = 50) -> dict:
    """Diagnostics printed by ``check``: penalty weight, Lipschitz ingredients and the regret shape reference."""
    spec, prior = cfg.spec, cfg.prior
    c1_min = min_penalty_weight(spec.T, cfg.c_R, cfg.c_delta, float(spec.delta[0]))
    theta = map_estimate(prior)
    rng = Streams(0).rng("lipschitz", 0)
    sampler = lambda g: cfg.x0_dist.sample(g)  # noqa: E731
    K_bar = estimate_policy_lipschitz(theta, spec, 0, sampler, lipschitz_pairs, rng)
    L_ell = reward_lipschitz(prior.reward, spec, cfg.x_box, cfg.weight_bound)
    L_V = value_lipschitz_bound(theta.A, theta.B, K_bar, L_ell, spec.T) if spec.T >= 2 else 0.0
    N_series = np.arange(1, cfg.N + 1)
    bound = regret_bound_ingredients(prior.n, prior.m, prior.reward.n_ell, prior.sigma_R,
                                     float(np.max(prior.sigma_F)), L_V, spec.T, N_series)
    return {
        "valid": True,
        "config_hash": config_hash(cfg),
        "c_R": cfg.c_R,
        "c_delta": cfg.c_delta,
        "delta_0": float(spec.delta[0]),
        "min_penalty_weight": c1_min,
        "c1": spec.c1.tolist(),
        "c1_mode": cfg.c1_mode,
        "K_bar_estimate": K_bar,
        "L_ell_per_step": L_ell,
        "L_V": L_V,
        "bound_shape_reference_at_N": float(bound[-1]),
    }


def cmd_check(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _config_failure(exc, args)
    rep = check_report(cfg, args.pairs)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
        return EXIT_OK
    T, d0 = cfg.spec.T, rep["delta_0"]
    print(f"config valid (hash {rep['config_hash']})")
    print(f"c_R = {rep['c_R']:.6g}")
    print(f"c1 >= (2*{T}*c_R + {cfg.c_delta:g})/{d0:g} = {rep['min_penalty_weight']:.6g}; "
          f"configured c1 = {min(rep['c1']):.6g} ({rep['c1_mode']})")
    print(f"policy Lipschitz estimate K_bar = {rep['K_bar_estimate']:.4g}, L_V = {rep['L_V']:.4g}")
    print(f"regret bound shape reference at N = {cfg.N}: {rep['bound_shape_reference_at_N']:.4g} (constants omitted)")
    return EXIT_OK


def cmd_desk_config(args) -> int:
    from .bench import desk_config

    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_config(desk_config(), path)
    print(f"wrote {path}")
    return EXIT_OK


def _config_failure(exc: ConfigError, args) -> int:
    if getattr(args, "json", False):
        print(json.dumps({"valid": False, "errors": exc.messages}))
    else:
        print("configuration error:", file=sys.stderr)
        for msg in exc.messages:
            print(f"  {msg}", file=sys.stderr)
    return EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    cols = "\n".join(f"  {k}: {v}" for k, v in COLUMN_DOC.items())
    p = argparse.ArgumentParser(
        prog="bayesmpc",
        description="Posterior-sampling MPC experiments.",
        epilog=f"CSV columns (schema_version {SCHEMA_VERSION}):\n{cols}\n\n"
               f"The default output directory can be set with ${OUT_ENV}.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write CSV results")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./results)")
    r.add_argument("--seeds", default=None, help="seed range A..B (inclusive); default from the config")
    r.add_argument("--parallelism", type=int, default=1, help="worker processes, one seed per task")
    r.add_argument("--agents", default=None, help=f"comma-separated subset of {','.join(AGENTS)}")
    r.add_argument("--json", action="store_true", help="print a machine-readable summary line")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare result directories produced by run")
    c.add_argument("results", nargs="+")
    c.add_argument("--out", default=None)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("check", help="validate a config and print theory diagnostics")
    k.add_argument("--config", required=True)
    k.add_argument("--pairs", type=int, default=50, help="state pairs for the policy Lipschitz estimate")
    k.add_argument("--json", action="store_true")
    k.set_defaults(func=cmd_check)

    d = sub.add_parser("desk-config", help="write the 3x3 cooling-grid experiment config")
    d.add_argument("--out", default="desk.toml")
    d.set_defaults(func=cmd_desk_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
