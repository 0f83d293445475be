"""Command-line workflow: solve gains, simulate, compare against baselines.

    ncsgame solve    --scenario generic --out-dir out
    ncsgame simulate --scenario generic --out-dir out --runs 500
    ncsgame compare  --scenario generic --out-dir out --runs 1000
    ncsgame full     --scenario lfc --runs 1000 --seed 7

Artifacts written to ``--out-dir``:

- ``gains.txt``          gain container for the requested information mode
- ``A_blocks.csv``       state-feedback blocks per controller and step
- ``trace.csv``          one simulated episode
- ``simulate.csv``       cost summary of the solved schedule
- ``comparison.csv``     cost summaries of the schedule and its baselines
- ``summary.txt``        human-readable report of the last command
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .artifacts import CompatibilityError, atomic_write, read_schedule, spec_hash, write_A_csv, \
    write_schedule
from .network import IMPERFECT, PERFECT
from .rng import derive_seed
from .scenarios import BUILTINS, ConfigError, ScenarioConfig, load_config
from .simulator import paired_difference, run_episode, run_monte_carlo, write_summary_csv, \
    write_trace_csv
from .solver import (ConvergenceError, NumericalError, SolverError, converged_gains,
                     single_controller_gains, solve_game, stationary_schedule)

log = logging.getLogger("ncsgame")

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_COMPAT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncsgame", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("solve", "solve the game and write the gain container"),
                            ("simulate", "simulate the solved gains"),
                            ("compare", "compare the solved gains against baselines"),
                            ("full", "solve, simulate and compare")):
        p = sub.add_parser(name, help=help_text)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--scenario", default=None,
                         help=f"built-in scenario ({', '.join(sorted(BUILTINS))})")
        src.add_argument("--config", type=Path, default=None, help="JSON scenario config")
        p.add_argument("--runs", type=int, default=None, help="Monte Carlo episodes")
        p.add_argument("--seed", type=int, default=None,
                       help="seed for both the moment estimates and the episodes")
        p.add_argument("--samples", type=int, default=None, help="moment samples per step")
        p.add_argument("--mode", choices=(PERFECT, IMPERFECT), default=None)
        p.add_argument("--alpha", type=float, default=None,
                       help="delay bound as a fraction of the sampling period")
        p.add_argument("--out-dir", type=Path, default=None)
        p.add_argument("--gains", type=Path, default=None,
                       help="gain container to use (default: <out-dir>/gains.txt)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ScenarioConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        name = args.scenario or "generic"
        if name not in BUILTINS:
            raise ConfigError(f"unknown scenario {name!r}; built-in scenarios: "
                              f"{', '.join(sorted(BUILTINS))}")
        cfg = BUILTINS[name]()
    if args.alpha is not None:
        cfg = cfg.with_alpha(args.alpha)
    solver = cfg.solver
    if args.samples is not None:
        solver = replace(solver, n_samples=args.samples)
    if args.seed is not None:
        solver = replace(solver, seed=args.seed)
    if args.mode is not None:
        solver = replace(solver, mode=args.mode)
    experiment = cfg.experiment
    if args.runs is not None:
        experiment = replace(experiment, n_runs=args.runs)
    if args.seed is not None:
        experiment = replace(experiment, seed=args.seed)
    out_dir = str(args.out_dir) if args.out_dir is not None else cfg.out_dir
    return replace(cfg, solver=solver, experiment=experiment, out_dir=out_dir)


def _solve(cfg: ScenarioConfig, mode: str):
    s = cfg.solver
    return solve_game(cfg.plant, cfg.network, n_samples=s.n_samples, seed=s.seed, mode=mode,
                      method=s.method, keep_values=False)


def cmd_solve(cfg: ScenarioConfig, out: Path, report: list):
    sol = _solve(cfg, cfg.solver.mode)
    write_schedule(sol.schedule, out / "gains.txt")
    write_A_csv(sol.schedule, out / "A_blocks.csv")
    report.append(f"solved {cfg.name}: mode={cfg.solver.mode} N={cfg.plant.N} "
                  f"samples={cfg.solver.n_samples} seed={cfg.solver.seed}")
    for i, v in enumerate(sol.V0):
        report.append(f"  predicted cost J{i + 1} = {v:.6g}")
    report.append(f"  smallest eigenvalue ratio over all value matrices: "
                  f"{sol.min_eig_ratio.min():.3g}")
    return sol.schedule


def _load_gains(cfg: ScenarioConfig, args, out: Path):
    path = args.gains if args.gains is not None else out / "gains.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'solve' first")
    expect = spec_hash(cfg.plant, cfg.network.with_mode(cfg.solver.mode))
    return read_schedule(path, expect_hash=expect)


def cmd_simulate(cfg: ScenarioConfig, schedule, out: Path, report: list):
    ex = cfg.experiment
    trace = run_episode(cfg.plant, cfg.network, schedule, derive_seed(ex.seed, 0))
    write_trace_csv(trace, out / "trace.csv")
    res = run_monte_carlo(cfg.plant, cfg.network, {schedule.mode: schedule}, ex.n_runs, ex.seed)
    write_summary_csv(res, out / "simulate.csv")
    s = res[schedule.mode]
    report.append(f"simulated {ex.n_runs} episodes (seed {ex.seed}): joint cost "
                  f"{s.joint_mean:.6g} +/- {s.joint_stderr:.3g}")
    for i in range(s.J.shape[1]):
        report.append(f"  J{i + 1} = {s.mean[i]:.6g} +/- {s.stderr[i]:.3g}")


def cmd_compare(cfg: ScenarioConfig, schedule, out: Path, report: list):
    ex, sv = cfg.experiment, cfg.solver
    name = f"decentralized-{schedule.mode}"
    schedules = {name: schedule}
    if "imperfect" in ex.baselines and schedule.mode == PERFECT:
        schedules[f"decentralized-{IMPERFECT}"] = _solve(cfg, IMPERFECT).schedule
    if "single" in ex.baselines:
        schedules["single"] = single_controller_gains(cfg.plant, cfg.network,
                                                      n_samples=sv.n_samples, seed=sv.seed,
                                                      method=sv.method, keep_values=False)
    if "stationary" in ex.baselines:
        conv = converged_gains(cfg.plant, cfg.network, sv.N_large, sv.tol, schedule.mode,
                               n_samples=sv.n_samples, seed=sv.seed, method=sv.method)
        schedules["stationary"] = stationary_schedule(conv, cfg.plant)
    res = run_monte_carlo(cfg.plant, cfg.network, schedules, ex.n_runs, ex.seed)
    write_summary_csv(res, out / "comparison.csv")
    report.append(f"compared {len(schedules)} schedules over {ex.n_runs} paired episodes "
                  f"(seed {ex.seed})")
    for n, s in res.items():
        report.append(f"  {n:<26} joint cost {s.joint_mean:.6g} +/- {s.joint_stderr:.3g}")
    for n in res:
        if n != name:
            d, se = paired_difference(res[name], res[n])
            report.append(f"  {name} - {n}: {d:.6g} +/- {se:.3g}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"ncsgame: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out_dir)
    report: list[str] = []
    try:
        if args.command in ("solve", "full"):
            schedule = cmd_solve(cfg, out, report)
        else:
            schedule = _load_gains(cfg, args, out)
        if args.command in ("simulate", "full"):
            cmd_simulate(cfg, schedule, out, report)
        if args.command in ("compare", "full"):
            cmd_compare(cfg, schedule, out, report)
    except CompatibilityError as exc:
        print(f"ncsgame: incompatible gains: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (SolverError, NumericalError, ConvergenceError) as exc:
        print(f"ncsgame: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (FileNotFoundError, ValueError) as exc:
        print(f"ncsgame: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = "\n".join(report) + "\n"
    atomic_write(out / "summary.txt", text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
