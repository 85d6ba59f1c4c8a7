"""Command line entry point: analyze, optimize, sweep, baselines, simulate.

Exit codes: 0 success, 2 infeasible input or policy, 3 optimizer did not
converge, 4 the simulated stall exceeded the analytic bound.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analytics import bound_report
from .baselines import BaselineKind, baseline_init, comparison_csv, comparison_rows, run_baseline
from .model import (
    ConfigError,
    InfeasibleError,
    Instance,
    SolverConfig,
    load_instance,
    load_policy,
    policy_to_dict,
    uniform_policy,
    validate_policy,
)
from .optimizer import alternating_optimize, feasibility_repair
from .simulator import SimConfig, run_replications, summarize, trace_csv, validate_bound

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_NOT_CONVERGED = 3
EXIT_BOUND_VIOLATION = 4

log = logging.getLogger("vodstall")

DEFAULT_THETAS = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _solver(args, cfg: SolverConfig) -> SolverConfig:
    changes = {}
    if getattr(args, "theta", None) is not None:
        changes["theta"] = args.theta
    if getattr(args, "fd_gradients", False):
        changes["fd_gradients"] = True
    if getattr(args, "max_iters", None) is not None:
        changes["max_outer_iters"] = args.max_iters
    return cfg.replace(**changes) if changes else cfg


def _start_policy(inst: Instance, cfg: SolverConfig, init: str):
    if init == "uniform":
        return feasibility_repair(inst, uniform_policy(inst), cfg.slack_delta)
    return baseline_init(inst, BaselineKind.parse(init), slack_delta=cfg.slack_delta)


def _policy_arg(inst: Instance, cfg: SolverConfig, path: str | None):
    if path is None:
        return feasibility_repair(inst, uniform_policy(inst), cfg.slack_delta)
    return load_policy(path, inst)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    inst, cfg = load_instance(args.config)
    cfg = _solver(args, cfg)
    pol = _policy_arg(inst, cfg, args.policy)
    check = validate_policy(pol, inst, cfg.slack_delta)
    if not check.ok:
        print("infeasible policy:\n" + check.summary(), file=sys.stderr)
        return EXIT_INFEASIBLE
    rep = bound_report(inst, pol, cfg.theta)
    out = Path(args.out_dir)
    write_atomic(out / "report.json", rep.to_json())
    write_atomic(out / "report.csv", rep.to_csv(inst, pol))
    print(f"weighted mean stall bound {rep.weighted_mean_stall:.6g} s, "
          f"average quality {rep.average_quality:.6g}, objective {rep.objective:.9g}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    inst, cfg = load_instance(args.config)
    cfg = _solver(args, cfg)
    init = _start_policy(inst, cfg, args.init)
    res = alternating_optimize(inst, cfg.theta, init, cfg)
    rep = bound_report(inst, res.policy, cfg.theta)
    out = Path(args.out_dir)
    write_atomic(out / "policy.json", _dump(policy_to_dict(inst, res.policy)))
    write_atomic(out / "trace.csv", res.trace.to_csv())
    summary = rep.to_dict()
    summary.update({"converged": res.converged, "iterations": res.iterations,
                    "stationary": res.stationary, "pg_norms": res.pg_norms, "init": args.init})
    write_atomic(out / "report.json", _dump(summary))
    print(f"{'converged' if res.converged else 'NOT converged'} after {res.iterations} "
          f"iterations: objective {res.objective:.9g}, stall bound "
          f"{rep.weighted_mean_stall:.6g} s, average quality {rep.average_quality:.6g}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


@dataclass(frozen=True)
class SweepSpec:
    theta_values: tuple[float, ...]
    overrides: dict | None = None

    def __post_init__(self):
        if not self.theta_values:
            raise ConfigError("sweep needs at least one theta")
        if len(set(self.theta_values)) != len(self.theta_values):
            raise ConfigError("sweep theta values must be distinct")
        for th in self.theta_values:
            if not 0 <= th <= 1:
                raise ConfigError(f"theta {th} outside [0, 1]")


SWEEP_COLUMNS = ["theta", "mean_stall_bound", "average_quality", "objective", "iterations",
                 "converged", "error"]


def sweep_point(config: str, theta: float, cfg_dict: dict, init: str) -> dict:
    inst, _ = load_instance(config)
    cfg = SolverConfig.from_dict(cfg_dict).replace(theta=theta)
    row = {"theta": theta, "mean_stall_bound": "", "average_quality": "", "objective": "",
           "iterations": "", "converged": "", "error": ""}
    try:
        start = _start_policy(inst, cfg, init)
        res = alternating_optimize(inst, theta, start, cfg)
        rep = bound_report(inst, res.policy, theta)
        row.update(mean_stall_bound=rep.weighted_mean_stall, average_quality=rep.average_quality,
                   objective=rep.objective, iterations=res.iterations, converged=res.converged)
    except (InfeasibleError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}".splitlines()[0]
    return row


def run_sweep(config: str, spec: SweepSpec, cfg: SolverConfig, init: str = "uniform",
              jobs: int = 1) -> list[dict]:
    """Cold-start optimization for every theta, from the same initial policy."""
    thetas = sorted(spec.theta_values)
    base = cfg.to_dict()
    if spec.overrides:
        base.update(spec.overrides)
    if jobs > 1 and len(thetas) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(sweep_point, config, th, base, init) for th in thetas]
            return [f.result() for f in futs]
    return [sweep_point(config, th, base, init) for th in thetas]


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for row in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _parse_thetas(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def cmd_sweep(args) -> int:
    inst, cfg = load_instance(args.config)
    cfg = _solver(args, cfg)
    spec = SweepSpec(_parse_thetas(args.thetas))
    rows = run_sweep(args.config, spec, cfg, args.init, args.jobs)
    write_atomic(Path(args.out_dir) / "sweep.csv", sweep_csv(rows))
    for row in rows:
        print(f"theta {row['theta']:.1e}: stall {row['mean_stall_bound']}, "
              f"quality {row['average_quality']} {row['error']}")
    if any(r["error"] for r in rows):
        return EXIT_INFEASIBLE
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED


def _baseline_task(config: str, kind_value: str, theta: float, cfg_dict: dict):
    inst, _ = load_instance(config)
    cfg = SolverConfig.from_dict(cfg_dict)
    return run_baseline(inst, BaselineKind(kind_value), theta, cfg)


def cmd_baselines(args) -> int:
    inst, cfg = load_instance(args.config)
    cfg = _solver(args, cfg)
    kinds = list(BaselineKind) if not args.kinds else [BaselineKind.parse(k) for k in args.kinds.split(",")]
    cfg_dict = cfg.to_dict()
    if args.jobs > 1 and len(kinds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            futs = [ex.submit(_baseline_task, args.config, k.value, cfg.theta, cfg_dict) for k in kinds]
            runs = [f.result() for f in futs]
    else:
        runs = [run_baseline(inst, k, cfg.theta, cfg) for k in kinds]
    out = Path(args.out_dir)
    write_atomic(out / "baselines.csv", comparison_csv(runs))
    rows = comparison_rows(runs)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    wr.writeheader()
    for row in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    write_atomic(out / "baselines_summary.csv", buf.getvalue())
    for row in rows:
        print(f"{row['baseline']:8s} stall {row['mean_stall_bound']:.6g} s  "
              f"quality {row['average_quality']:.6g}  objective {row['objective']:.9g}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED


def cmd_simulate(args) -> int:
    inst, cfg = load_instance(args.config)
    pol = _policy_arg(inst, cfg, args.policy)
    check = validate_policy(pol, inst, cfg.slack_delta)
    if not check.ok:
        print("infeasible policy:\n" + check.summary(), file=sys.stderr)
        if not args.allow_unstable:
            return EXIT_INFEASIBLE
    sim = SimConfig(num_requests=args.requests, warmup_fraction=args.warmup,
                    seed=args.seed, replications=args.replications)
    out = Path(args.out_dir)
    reps = run_replications(inst, pol, sim, args.jobs)
    rep = summarize(inst, pol, reps, sim)
    write_atomic(out / "sim.json", rep.to_json())
    write_atomic(out / "streams.csv", rep.streams_csv())
    if args.trace:
        write_atomic(out / "trace.csv", trace_csv(inst, reps[0]))
    print(f"mean stall {rep.mean_stall:.6g} s (se {rep.mean_stall_se:.3g}), "
          f"average quality {rep.empirical_avg_quality:.6g}"
          + (" [unstable]" if rep.unstable else ""))
    if args.validate:
        chk = validate_bound(inst, pol, sim, args.jobs, report=rep)
        write_atomic(out / "bound_check.json", _dump(chk.to_dict()))
        write_atomic(out / "bound_check.csv", chk.to_csv())
        if chk.holds is None:
            print("unstable policy: no bound claimed")
        else:
            print(f"analytic bound {chk.analytic_bound:.6g} s vs empirical "
                  f"{chk.empirical_mean_stall:.6g} s: {'holds' if chk.holds else 'VIOLATED'}")
            if not chk.holds:
                return EXIT_BOUND_VIOLATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vodstall", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, theta=True):
        p.add_argument("config", help="instance JSON")
        p.add_argument("--out-dir", default="out")
        if theta:
            p.add_argument("--theta", type=float, default=None,
                           help="trade-off weight (defaults to the config's solver.theta)")

    p = sub.add_parser("analyze", help="evaluate the stall bound of a policy")
    common(p)
    p.add_argument("policy", nargs="?", help="policy JSON (default: repaired uniform policy)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("optimize", help="run the alternating optimizer")
    common(p)
    p.add_argument("--init", default="uniform",
                   help="uniform or a baseline name (pea, peb, peq, psp, plq, phq)")
    p.add_argument("--fd-gradients", action="store_true", help="use finite-difference gradients")
    p.add_argument("--max-iters", type=int, default=None)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", help="optimize over a grid of theta values")
    common(p, theta=False)
    p.add_argument("--thetas", default=",".join(f"{t:g}" for t in DEFAULT_THETAS))
    p.add_argument("--init", default="uniform")
    p.add_argument("--fd-gradients", action="store_true")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("baselines", help="run the comparison strategies")
    common(p)
    p.add_argument("--kinds", default="", help="comma-separated subset (default: all six)")
    p.add_argument("--fd-gradients", action="store_true")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("simulate", help="simulate a policy and optionally check the bound")
    common(p, theta=False)
    p.add_argument("policy", nargs="?", help="policy JSON (default: repaired uniform policy)")
    p.add_argument("--requests", type=int, default=100_000)
    p.add_argument("--replications", type=int, default=5)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--validate", action="store_true", help="compare against the analytic bound")
    p.add_argument("--trace", action="store_true", help="write a per-request trace CSV")
    p.add_argument("--allow-unstable", action="store_true",
                   help="simulate even when the policy fails validation")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
