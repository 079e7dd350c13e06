"""Command line front end.

Exit status: 0 success, 1 computation error, 2 configuration error,
3 plan failed verification (``verify-plan`` only).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import SHIPPED, ConfigError, RunConfig, flag_overrides, load_config, shipped_config, with_overrides

EXIT_OK, EXIT_COMPUTE, EXIT_CONFIG, EXIT_PLAN = 0, 1, 2, 3
COMMANDS = ("simulate", "bound", "validate", "verify-plan", "compare", "experiment")


def _eps(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number or 'auto'") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochtube",
                                 description="Probabilistic tubes for contracting stochastic systems.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("name", nargs="?", help=f"experiment name for 'experiment' ({', '.join(SHIPPED)})")
    ap.add_argument("--config", type=Path, help="YAML run configuration")
    ap.add_argument("--experiment", help="shipped configuration to start from")
    ap.add_argument("--out", type=Path, help="output directory")
    ap.add_argument("--seed", type=_u64, help="master seed")
    ap.add_argument("--delta", type=float)
    ap.add_argument("--eps", type=_eps, help="AMGF epsilon in (0, 1) or 'auto'")
    ap.add_argument("--dt-seg", type=float, dest="dt_seg")
    ap.add_argument("--n", type=int, help="number of Monte Carlo rollouts")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    name = args.experiment or (args.name if args.command == "experiment" else None)
    if args.config is not None and name is not None:
        raise ConfigError("give either --config or an experiment name, not both")
    if args.config is not None:
        cfg = load_config(args.config)
    elif name is not None:
        cfg = shipped_config(name)
    else:
        raise ConfigError("no configuration: pass --config PATH or an experiment name")
    ov = flag_overrides(out=args.out, seed=args.seed, delta=args.delta, eps=args.eps,
                        dt_seg=args.dt_seg, n=args.n)
    return with_overrides(cfg, ov)


def dispatch(cfg: RunConfig, command: str) -> int:
    from . import harness

    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    if command == "experiment":
        res = harness.run_config(cfg)
        print((out / "summary.txt").read_text(encoding="utf-8"), end="")
        ok = all(r.passed for r in res.reports if r.trajectory_level) and \
            (res.plan is None or res.plan.passed)
        return EXIT_OK if ok else EXIT_COMPUTE
    if command == "simulate":
        path = harness.simulate_command(cfg, out)
        print(f"wrote {path}")
        return EXIT_OK
    problem = harness.build_problem(cfg)
    if command == "bound":
        harness.write_bound_artifacts(problem, out)
        print(f"wrote {len(problem.curves)} curves to {out / 'curves.csv'}")
        for note in problem.notes:
            print(f"note: {note}")
        return EXIT_OK
    if command == "compare":
        cmp = harness.compare_bounds(problem.curves)
        cmp.to_csv(out / "comparison.csv")
        cmp.write_pairs_csv(out / "comparison_ratios.csv")
        for a, b, mx, mean, mn in cmp.pairs():
            print(f"{a} / {b}: max {mx:.4g}, mean {mean:.4g}, min {mn:.4g}")
        return EXIT_OK
    if command == "validate":
        reports, stats = harness.run_rollouts(problem)
        harness.write_validation_csv(out / "validation.csv", reports)
        harness.write_pointwise_csv(out / "validation_pointwise.csv", reports)
        for r in reports:
            print(r.summary())
        return EXIT_OK if all(r.passed for r in reports if r.trajectory_level) else EXIT_COMPUTE
    if command == "verify-plan":
        report = harness.check_plan(problem)
        report.to_csv(out / "plan_report.csv")
        print(report.summary())
        return EXIT_OK if report.passed else EXIT_PLAN
    raise AssertionError(command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return dispatch(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # computation failures of any stage
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
