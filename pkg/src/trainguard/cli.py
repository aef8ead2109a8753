"""``trainguard`` command line: run, verify, plot, calibrate, inspect.

Exit status is 0 on success, 1 when a run fails or an invariant is violated,
and 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, parse_overrides
from .errors import ConfigError, FormatError, TrainGuardError
from .experiment import ARMS, CONTROLLED, build_task, calibrate_epsilon, run_experiment
from .invariants import ALL_INVARIANTS
from .metrics import admissibility_report
from .model import gradient_check, init_params
from .numerics import RngStream
from .plotting import write_plots
from .results import snapshot_summary, write_results

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADIENT_CHECK = "gradient_check"
GRADIENT_TOL = 1e-4


def corrupt_restore(params: np.ndarray) -> np.ndarray:
    """Restore hook that nudges the first parameter by one ulp."""
    out = params.copy()
    out[0] = np.nextafter(out[0], math.inf)
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int, metavar="N", help="master seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override one config key (repeatable)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes for seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trainguard",
                                     description="Probe-based accept/rollback supervision of training runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run paired baseline/controlled seeds and write results")
    _common(p)
    p.add_argument("--out", default="results", metavar="DIR", help="output root (default: results)")

    p = sub.add_parser("verify", help="check every runtime invariant and the gradient")
    _common(p)
    p.add_argument("--corrupt-restore", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("plot", help="render SVG charts for a results directory")
    p.add_argument("results", metavar="DIR", help="experiment directory written by 'run'")
    p.add_argument("--out", metavar="DIR", help="where to write the SVGs (default: DIR)")

    p = sub.add_parser("calibrate", help="compute the threshold from a fault-free warmup")
    _common(p)

    p = sub.add_parser("inspect", help="summarize a saved snapshot")
    p.add_argument("snapshot", metavar="FILE")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _check_jobs(args) -> None:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")


def _fmt(x: float) -> str:
    return f"{x:.4g}" if isinstance(x, float) else str(x)


def cmd_run(args) -> int:
    cfg = _config(args)
    _check_jobs(args)
    result = run_experiment(cfg, jobs=args.jobs)
    root = write_results(result, args.out)
    print(f"epsilon = {result.epsilon!r}")
    for arm in ARMS:
        agg = result.aggregates[arm]
        m, s = agg.summary_mean, agg.summary_std
        print(f"{arm:>10}: peak probe loss {_fmt(m['peak_probe_loss'])} ± {_fmt(s['peak_probe_loss'])}, "
              f"steps to recovery {_fmt(m['steps_to_recovery'])} ± {_fmt(s['steps_to_recovery'])}, "
              f"rollbacks {_fmt(m['rollback_count'])}")
    print(f"wrote {root}")
    return EXIT_OK


def _gradient_violations(cfg: ExperimentConfig, instances: int = 3) -> list[tuple[int, float]]:
    task = build_task(cfg)
    bad = []
    for i in range(instances):
        params = init_params(task.spec, RngStream(cfg.seed, (7 << 32) | i))
        batch = task.train.subset(np.arange(i * 8, i * 8 + 8) % len(task.train))
        err = gradient_check(params, batch, task.spec)
        if not err < GRADIENT_TOL:
            bad.append((i, err))
    return bad


def cmd_verify(args) -> int:
    cfg = _config(args)
    _check_jobs(args)
    hook = corrupt_restore if args.corrupt_restore else None
    result = run_experiment(cfg, jobs=args.jobs, monitor=True, digests=True, restore_hook=hook)
    violations = result.violations()
    grad_bad = _gradient_violations(result.config)
    counts = {name: 0 for name in ALL_INVARIANTS}
    for v in violations:
        counts[v.invariant] = counts.get(v.invariant, 0) + 1
    counts[GRADIENT_CHECK] = len(grad_bad)
    width = max(len(k) for k in counts)
    print(f"{cfg.tag}: {cfg.num_seeds} seeds x {cfg.total_steps} steps, epsilon = {result.epsilon!r}")
    for name, n in counts.items():
        print(f"  {name:<{width}}  {'PASS' if n == 0 else 'FAIL'}  ({n} violations)")
    for v in violations:
        print(f"violation: invariant={v.invariant} seed={v.seed_index} step={v.step} {v.detail}")
    for i, err in grad_bad:
        print(f"violation: invariant={GRADIENT_CHECK} instance={i} relative error {err:.3g}")
    return EXIT_OK if not violations and not grad_bad else EXIT_FAIL


def cmd_plot(args) -> int:
    root = Path(args.results)
    if not (root / "config.txt").is_file():
        tagged = sorted(p.parent for p in root.glob("*/config.txt"))
        if len(tagged) == 1:
            root = tagged[0]
    paths = write_plots(root, args.out)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args).replace(epsilon=None)
    eps = calibrate_epsilon(cfg)
    print(f"epsilon = {eps!r}")
    print(f"({cfg.calibration_factor:g} x std of innovations over steps "
          f"[{cfg.calibration_burnin}, {cfg.calibration_burnin + cfg.calibration_steps}) "
          f"of a fault-free run, seed index 0)")
    if cfg.fault_enabled:
        probe_cfg = cfg.replace(epsilon=eps, num_seeds=1)
        run = run_experiment(probe_cfg).runs[CONTROLLED][0]
        for line in admissibility_report(run, nominal_start=cfg.calibration_burnin).lines():
            print(f"  {line}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.snapshot)
    if not path.is_file():
        raise ConfigError(f"snapshot not found: {path}")
    for key, value in snapshot_summary(path.read_bytes()).items():
        print(f"{key}: {value!r}" if isinstance(value, float) else f"{key}: {value}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "plot": cmd_plot,
            "calibrate": cmd_calibrate, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainGuardError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
