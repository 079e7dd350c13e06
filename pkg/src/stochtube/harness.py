"""Experiment plumbing: assemble a problem from a config, validate bound
curves by Monte Carlo, compare curves and write the artifact bundle."""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_continuous_are
from scipy.stats import beta

from . import plotting
from ._csv import fmt, write_rows
from .bounds import (BoundCurve, BoundError, BoundParams, ScheduleIntegrals, all_bounds,
                     compute_integrals, write_curves_csv, write_integrals_csv)
from .config import ConfigError, RunConfig, shipped_config, with_overrides
from .contraction import (Box, LmiReport, LqrSpec, MetricSchedule, close_loop,
                          estimate_rate_schedule, riccati_tvlqr, verify_lmi)
from .plans import pvtol_min_jerk_plan
from .simulate import (TrajectoryGrid, integrate_deterministic, integrate_sde, iter_rollouts,
                       time_grid, write_trajectories_csv, batch_rollouts)
from .systems import PVTOL_DEFAULTS, SystemModel, builtin, eval_input_jacobian, eval_jacobian
from .tube import (AlignmentError, Circle, PlanReport, Rect, SafeSetSpec, metrics_on,
                   project_tube_radius, verify_plan)

QUANTILES = (0.5, 0.9, 0.99, 0.999, 1.0)
CONFIDENCE = 0.99


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as exc:  # annotate and re-raise anything computational
        raise StageError(name, exc) from exc


# -- problem assembly ------------------------------------------------------------------


@dataclass
class Problem:
    """Everything the commands need, built once from a :class:`RunConfig`."""

    config: RunConfig
    model: SystemModel
    x0: np.ndarray
    nominal: TrajectoryGrid
    schedule: MetricSchedule
    region: Box
    params: BoundParams
    integrals: ScheduleIntegrals
    curves: list[BoundCurve]
    safe_set: Optional[SafeSetSpec] = None
    notes: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.model.state_dim

    def curve(self, kind: str) -> BoundCurve:
        for c in self.curves:
            if c.kind == kind:
                return c
        raise KeyError(kind)

    def plan_curve(self) -> BoundCurve:
        """The tightest trajectory-level curve available."""
        kinds = [c.kind for c in self.curves]
        return self.curve("trajectory_segmented" if "trajectory_segmented" in kinds else "trajectory")


def _system(cfg: RunConfig) -> tuple[SystemModel, np.ndarray, TrajectoryGrid, dict]:
    sc = cfg.system
    params = dict(sc.params)
    model = builtin(sc.name, params)
    T, dt = cfg.bounds.T, cfg.simulation.dt
    if sc.plan is not None and sc.plan.kind == "min_jerk":
        if sc.x0 is not None:
            raise ConfigError("system.x0 cannot be combined with a generated plan; the plan fixes x0")
        full = {**PVTOL_DEFAULTS, **params}
        model, nominal = pvtol_min_jerk_plan(model, sc.plan.start, sc.plan.goal, T, dt, full)
        return model, nominal.states[0].copy(), nominal, full
    x0 = np.zeros(model.state_dim) if sc.x0 is None else np.asarray(sc.x0, dtype=float)
    return model, x0, integrate_deterministic(model, x0, T, dt), params


def _metric(cfg: RunConfig, model: SystemModel, nominal: TrajectoryGrid):
    mc = cfg.metric
    n = model.state_dim
    if mc.source == "identity":
        return model, MetricSchedule.constant(nominal.times, np.eye(n), model.sigma), []
    if mc.source == "csv":
        sched = MetricSchedule.from_csv_bundle(mc.path, model.sigma)
        return model, sched, [f"metric loaded from {Path(mc.path).name}"]
    Q, R = np.diag(mc.lqr.Q), np.diag(mc.lqr.R)
    if mc.lqr.terminal == "care":
        t = nominal.T
        x = nominal.states[-1]
        A = eval_jacobian(model, x, t)
        B = eval_input_jacobian(model, x, model.input(t), t)
        terminal = solve_continuous_are(A, B, Q, R)
    else:
        terminal = Q
    sched, gains = riccati_tvlqr(model, LqrSpec(Q, R, terminal, nominal))
    sched = replace(sched, info={**sched.info, "terminal": mc.lqr.terminal})
    notes = [f"nominal closed-loop rates in [{sched.rates.min():.4g}, {sched.rates.max():.4g}]"]
    return close_loop(model, gains), sched, notes


def _region(cfg: RunConfig, n: int) -> Box:
    hw = cfg.rates.half_widths if cfg.rates.half_widths is not None else [1.0] * n
    return Box.symmetric(hw, relative=cfg.rates.relative)


def _safe_set(cfg: RunConfig) -> Optional[SafeSetSpec]:
    s = cfg.safe_set
    if s is None:
        return None
    return SafeSetSpec(circles=[Circle(c.center, c.radius) for c in s.circles],
                       boxes=[Rect(b.lower, b.upper) for b in s.boxes],
                       goal=Circle(s.goal.center, s.goal.radius),
                       proj_coords=tuple(s.proj_coords))


def bound_params(cfg: RunConfig) -> BoundParams:
    b = cfg.bounds
    return BoundParams(b.delta, b.eps, b.T, b.dt_seg, b.grid_dt, b.segment_weighting)


def build_problem(cfg: RunConfig) -> Problem:
    """System, metric, sampled rates, integrals and all applicable curves."""
    with stage("system"):
        open_loop, x0, nominal, _ = _system(cfg)
    with stage("metric"):
        model, schedule, notes = _metric(cfg, open_loop, nominal)
    region = _region(cfg, model.state_dim)
    with stage("rates"):
        center = nominal if region.relative else None
        schedule = estimate_rate_schedule(model, schedule, region, cfg.rates.samples,
                                          cfg.simulation.master_seed, center=center)
    with stage("integrals"):
        params = bound_params(cfg)
        si = compute_integrals(schedule, params)
    with stage("bounds"):
        curves = all_bounds(si, model.state_dim, params)
    if not np.all(si.rates < 0):
        k = int(np.argmax(si.rates))
        notes.append(f"segmented trajectory bound skipped: sampled rate {si.rates[k]:.4g} >= 0 "
                     f"at t={si.times[k]:.4g}")
    with stage("safe-set"):
        safe = _safe_set(cfg)
    return Problem(cfg, model, x0, nominal, schedule, region, params, si, curves, safe, notes)


# -- Monte Carlo validation ----------------------------------------------------------------


def clopper_pearson(k: int, N: int, confidence: float = CONFIDENCE) -> tuple[float, float]:
    """One-sided exact binomial bounds: each side holds with ``confidence``."""
    alpha = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta.ppf(alpha, k, N - k + 1))
    hi = 1.0 if k == N else float(beta.ppf(confidence, k + 1, N - k))
    return lo, hi


@dataclass
class ValidationReport:
    kind: str
    N: int
    delta: float
    master_seed: int
    grid_dt: float
    trajectory_level: bool
    times: np.ndarray
    pointwise_violations: np.ndarray
    trajectory_violations: int
    sup_ratio_quantiles: dict

    def __post_init__(self):
        assert 0 <= self.trajectory_violations <= self.N
        assert np.all(self.pointwise_violations >= 0)

    @property
    def violations(self) -> int:
        """Path-supremum count for whole-path curves, worst knot count otherwise."""
        if self.trajectory_level:
            return self.trajectory_violations
        return int(self.pointwise_violations.max()) if self.pointwise_violations.size else 0

    @property
    def violation_rate(self) -> float:
        return self.violations / self.N

    @property
    def confidence_interval(self) -> tuple[float, float]:
        return clopper_pearson(self.violations, self.N)

    @property
    def passed(self) -> bool:
        return self.violation_rate <= self.delta

    def summary(self) -> str:
        lo, hi = self.confidence_interval
        scope = "paths" if self.trajectory_level else "worst knot"
        return (f"{self.kind}: {self.violations}/{self.N} violations ({scope}), rate "
                f"{self.violation_rate:.3g} vs delta {self.delta:g}, {int(CONFIDENCE * 100)}% upper "
                f"{hi:.3g}, max sup ratio {self.sup_ratio_quantiles[1.0]:.3g} -> "
                f"{'pass' if self.passed else 'FAIL'}")


@dataclass
class RolloutStats:
    N: int
    collided: int
    region_exits: int
    max_planar_deviation: float
    sample_deviations: np.ndarray
    sample_states: np.ndarray

    @property
    def collision_free(self) -> bool:
        return self.collided == 0


def _states_at(traj: TrajectoryGrid, times: np.ndarray) -> np.ndarray:
    if len(traj.times) == len(times) and np.allclose(traj.times, times, rtol=0, atol=1e-12):
        return traj.states
    return np.stack([np.interp(times, traj.times, traj.states[:, j]) for j in range(traj.dim)], axis=1)


def _reference_path(model: SystemModel, x0, T: float, dt: float) -> TrajectoryGrid:
    """Noise-free path from the same Euler scheme as the rollouts, so the
    measured deviation carries no integrator mismatch."""
    quiet = replace(model, sigma=0.0, diffusion=None)
    ref = integrate_sde(quiet, x0, T, dt, 0)
    return TrajectoryGrid(ref.times, ref.states, "deterministic")


def validate_curves(model: SystemModel, schedule: MetricSchedule, curves: Sequence[BoundCurve],
                    x0, T: float, dt: float, N: int, master_seed: int, *, workers: int = 1,
                    safe_set: Optional[SafeSetSpec] = None, region: Optional[Box] = None,
                    center: Optional[TrajectoryGrid] = None,
                    keep: int = 0) -> tuple[list[ValidationReport], RolloutStats]:
    """Check every curve against the same ``N`` rollouts in one streamed pass.

    Deviations are checked at the simulation knots only.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    ref = _reference_path(model, x0, T, dt)
    times = ref.times
    try:
        radii = [c.radius_at(times) for c in curves]
    except BoundError as exc:
        raise AlignmentError(f"simulation grid (dt={dt:g}) is not aligned with the curves: {exc}") from None
    metrics = metrics_on(schedule, times)
    point = [np.zeros(len(times), dtype=np.int64) for _ in curves]
    sups = [np.empty(N) for _ in curves]
    lo = hi = cstates = None
    if region is not None:
        lo, hi = region.lower, region.upper
        if region.relative:
            if center is None:
                raise ValueError("relative region needs a center trajectory")
            cstates = _states_at(center, times)
    collided = exits = 0
    max_planar = 0.0
    kept_dev, kept_states = [], []
    for idx, X in iter_rollouts(model, x0, T, dt, master_seed, N, workers):
        d = X - ref.states[None]
        dev = np.sqrt(np.maximum(np.einsum("pki,kij,pkj->pk", d, metrics, d), 0.0))
        for j, r in enumerate(radii):
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(r > 0, dev / np.where(r > 0, r, 1.0), np.where(dev > 0, np.inf, 0.0))
            point[j] += np.sum(ratio > 1.0, axis=0)
            sups[j][idx] = ratio.max(axis=1)
        if safe_set is not None:
            planar = safe_set.project(X)
            collided += int(np.sum(np.any(safe_set.collides(planar), axis=1)))
            dp = planar - safe_set.project(ref.states)[None]
            max_planar = max(max_planar, float(np.linalg.norm(dp, axis=-1).max()))
        if region is not None:
            off = X - cstates[None] if region.relative else X
            exits += int(np.sum(np.any((off < lo) | (off > hi), axis=(1, 2))))
        if len(kept_dev) < keep:
            take = min(keep - len(kept_dev), len(idx))
            kept_dev.extend(dev[:take])
            kept_states.extend(X[:take])
    reports = []
    for c, pv, s in zip(curves, point, sups):
        q = np.quantile(s, QUANTILES, method="inverted_cdf")
        reports.append(ValidationReport(c.kind, N, c.params.delta, master_seed, dt, c.trajectory_level,
                                        times, pv, int(np.sum(s > 1.0)),
                                        {qq: float(v) for qq, v in zip(QUANTILES, q)}))
    n = len(x0)
    stats = RolloutStats(N, collided, exits, max_planar,
                         np.array(kept_dev).reshape(-1, len(times)),
                         np.array(kept_states).reshape(-1, len(times), n))
    return reports, stats


def validate_bound(model: SystemModel, schedule: MetricSchedule, curve: BoundCurve, x0, N: int,
                   master_seed: int, dt: Optional[float] = None, workers: int = 1) -> ValidationReport:
    """Monte Carlo violation count of one curve over ``N`` seeded rollouts."""
    if dt is None:
        dt = float(schedule.times[1] - schedule.times[0])
    reports, _ = validate_curves(model, schedule, [curve], x0, curve.params.T, dt, N, master_seed,
                                 workers=workers)
    return reports[0]


def write_validation_csv(path, reports: Sequence[ValidationReport]) -> None:
    header = ["kind", "N", "delta", "violations", "violation_rate", "ci_low", "ci_high",
              "trajectory_violations", "max_pointwise_violations"]
    header += [f"sup_ratio_q{q:g}" for q in QUANTILES] + ["master_seed", "grid_dt", "passed"]
    rows = []
    for r in reports:
        lo, hi = r.confidence_interval
        rows.append([r.kind, r.N, r.delta, r.violations, r.violation_rate, lo, hi,
                     r.trajectory_violations, int(r.pointwise_violations.max()),
                     *[r.sup_ratio_quantiles[q] for q in QUANTILES], r.master_seed, r.grid_dt,
                     r.passed])
    write_rows(path, header, rows)


def write_pointwise_csv(path, reports: Sequence[ValidationReport]) -> None:
    times = reports[0].times
    write_rows(path, ["t", *[r.kind for r in reports]],
               ([t, *[int(r.pointwise_violations[k]) for r in reports]] for k, t in enumerate(times)))


# -- comparison -------------------------------------------------------------------------------


@dataclass
class Comparison:
    times: np.ndarray
    radii: dict

    def ratio(self, a: str, b: str) -> np.ndarray:
        """Elementwise ``a / b``; NaN where either radius is zero."""
        ra, rb = self.radii[a], self.radii[b]
        ok = (ra > 0) & (rb > 0)
        out = np.full(len(ra), np.nan)
        out[ok] = ra[ok] / rb[ok]
        return out

    def below(self, a: str, b: str) -> np.ndarray:
        return self.radii[a] < self.radii[b]

    def pairs(self) -> list[tuple[str, str, float, float, float]]:
        """``(a, b, max, mean, min)`` of ``a / b`` for every ordered pair."""
        out = []
        for a, b in itertools.permutations(self.radii, 2):
            r = self.ratio(a, b)
            r = r[np.isfinite(r)]
            stats = (float(r.max()), float(r.mean()), float(r.min())) if r.size else (math.nan,) * 3
            out.append((a, b, *stats))
        return out

    def to_csv(self, path) -> None:
        labels = list(self.radii)
        header = ["t", *labels]
        flag = "trajectory_segmented" in self.radii and "trajectory" in self.radii
        if flag:
            header.append("segmented_below_plain")
            below = self.below("trajectory_segmented", "trajectory")
        rows = []
        for k, t in enumerate(self.times):
            row = [t, *[self.radii[lbl][k] for lbl in labels]]
            if flag:
                row.append(bool(below[k]))
            rows.append(row)
        write_rows(path, header, rows)

    def write_pairs_csv(self, path) -> None:
        write_rows(path, ["numerator", "denominator", "max_ratio", "mean_ratio", "min_ratio"], self.pairs())


def compare_bounds(curves: Sequence[BoundCurve]) -> Comparison:
    if not curves:
        raise BoundError("nothing to compare")
    t0 = curves[0].times
    radii = {}
    for c in curves:
        if len(c.times) != len(t0) or not np.allclose(c.times, t0, rtol=0, atol=1e-12):
            raise BoundError(f"curve {c.label!r} is on a different grid")
        label = c.label
        i = 2
        while label in radii:
            label = f"{c.label}_{i}"
            i += 1
        radii[label] = np.asarray(c.radii, dtype=float)
    return Comparison(t0, radii)


# -- commands and experiments -------------------------------------------------------------


def run_rollouts(problem: Problem, keep: Optional[int] = None):
    cfg = problem.config
    center = problem.nominal if problem.region.relative else None
    with stage("validate"):
        return validate_curves(problem.model, problem.schedule, problem.curves, problem.x0,
                               cfg.bounds.T, cfg.simulation.dt, cfg.simulation.N,
                               cfg.simulation.master_seed, workers=cfg.simulation.workers,
                               safe_set=problem.safe_set, region=problem.region, center=center,
                               keep=cfg.simulation.save_paths if keep is None else keep)


def check_plan(problem: Problem) -> PlanReport:
    if problem.safe_set is None:
        raise ConfigError("verify-plan needs a safe_set section in the config")
    with stage("verify-plan"):
        return verify_plan(problem.nominal, problem.schedule, problem.plan_curve(), problem.safe_set)


def held_out_lmi(problem: Problem) -> LmiReport:
    """LMI check on a fresh, twice as dense sample set (not the estimation samples)."""
    center = problem.nominal if problem.region.relative else None
    with stage("lmi-check"):
        return verify_lmi(problem.model, problem.schedule, problem.region,
                          2 * problem.config.rates.samples, 1e-8,
                          problem.config.simulation.master_seed + 1, center=center)


def simulate_command(cfg: RunConfig, out: Path) -> Path:
    with stage("system"):
        open_loop, x0, nominal, _ = _system(cfg)
    with stage("metric"):
        model, _, _ = _metric(cfg, open_loop, nominal)
    with stage("simulate"):
        det = integrate_deterministic(model, x0, cfg.bounds.T, cfg.simulation.dt)
        paths = batch_rollouts(model, x0, cfg.bounds.T, cfg.simulation.dt, cfg.simulation.master_seed,
                               max(1, cfg.simulation.save_paths), cfg.simulation.workers)
        path = out / "trajectories.csv"
        write_trajectories_csv(path, [det, *paths])
    return path


def write_bound_artifacts(problem: Problem, out: Path) -> None:
    with stage("write"):
        write_curves_csv(out / "curves.csv", problem.curves)
        write_integrals_csv(out / "integrals.csv", problem.integrals)
        problem.schedule.to_csv_bundle(out / "metric")


def _rate_line(problem: Problem) -> str:
    r = problem.schedule.rates
    k = int(np.argmax(r))
    return (f"rates: {problem.config.rates.samples} samples/knot in {problem.region.describe()}; "
            f"max rate {r[k]:.6g} at t={problem.schedule.times[k]:.6g}, min {r.min():.6g}")


def _summary(problem: Problem, reports, stats: Optional[RolloutStats], comparison: Comparison,
             plan: Optional[PlanReport], lmi: Optional[LmiReport]) -> str:
    cfg = problem.config
    lines = [f"experiment: {cfg.name}",
             f"system: {cfg.system.name} (n={problem.n}), sigma={problem.model.sigma:g}",
             f"metric: {cfg.metric.source}" + (f" (terminal {cfg.metric.lqr.terminal})"
                                                if cfg.metric.source == "riccati" else ""),
             _rate_line(problem)]
    if lmi is not None:
        lines.append(f"held-out {lmi.summary()}")
    p = problem.params
    lines.append(f"bounds: delta={p.delta:g}, eps={fmt(problem.curves[0].eps)}, T={p.T:g}, "
                 f"dt_seg={p.dt_seg:g}, grid_dt={p.grid_dt:g}, segment weighting {p.segment_weighting}")
    for c in problem.curves:
        lines.append(f"  {c.kind}: max radius {c.radii.max():.6g}, radius at T {c.radii[-1]:.6g}")
    lines.extend(f"note: {n}" for n in problem.notes)
    if reports:
        lines.append(f"validation: N={cfg.simulation.N}, master_seed={cfg.simulation.master_seed}, "
                     f"checked on the dt={cfg.simulation.dt:g} grid (inter-knot excursions unchecked)")
        lines.extend(f"  {r.summary()}" for r in reports)
    if stats is not None:
        lines.append(f"rollouts leaving the rate-sampling region: {stats.region_exits}/{stats.N}")
        if problem.safe_set is not None:
            lines.append(f"rollouts colliding with un-inflated obstacles: {stats.collided}/{stats.N}; "
                         f"max planar deviation {stats.max_planar_deviation:.4g}")
    if "trajectory_segmented" in comparison.radii and "trajectory" in comparison.radii:
        below = comparison.below("trajectory_segmented", "trajectory")
        half = comparison.times <= p.T / 2 + 1e-12
        lines.append(f"segmented below plain on {int(below.sum())}/{len(below)} knots "
                     f"(all t <= T/2: {bool(below[half].all())})")
    if "isa_baseline" in comparison.radii and "single_time" in comparison.radii:
        r = comparison.ratio("isa_baseline", "single_time")
        lines.append(f"isa_baseline / single_time ratio: min {np.nanmin(r):.4g}")
    if plan is not None:
        lines.append(plan.summary())
        lines.append(f"plan curve: {problem.plan_curve().kind}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    out_dir: Path
    problem: Problem
    reports: list
    stats: RolloutStats
    comparison: Comparison
    plan: Optional[PlanReport]
    lmi: LmiReport

    @property
    def files(self) -> list[Path]:
        return sorted(p for p in self.out_dir.rglob("*") if p.is_file())


def run_config(cfg: RunConfig, out_dir: Union[str, Path, None] = None) -> ExperimentResult:
    """Full pipeline for one config, writing the bundle under ``out_dir``."""
    if out_dir is not None:
        cfg = with_overrides(cfg, {"output": {"dir": str(out_dir)}})
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    lmi = held_out_lmi(problem)
    write_bound_artifacts(problem, out)
    reports, stats = run_rollouts(problem)
    comparison = compare_bounds(problem.curves)
    plan = check_plan(problem) if problem.safe_set is not None else None
    with stage("write"):
        write_validation_csv(out / "validation.csv", reports)
        write_pointwise_csv(out / "validation_pointwise.csv", reports)
        comparison.to_csv(out / "comparison.csv")
        comparison.write_pairs_csv(out / "comparison_ratios.csv")
        write_rows(out / "rollout_stats.csv", ["N", "collided", "region_exits", "max_planar_deviation"],
                   [[stats.N, stats.collided, stats.region_exits, stats.max_planar_deviation]])
        if plan is not None:
            plan.to_csv(out / "plan_report.csv")
        (out / "summary.txt").write_text(_summary(problem, reports, stats, comparison, plan, lmi),
                                         encoding="utf-8")
        (out / "resolved_config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    if cfg.output.figures:
        with stage("figures"):
            plotting.render_bundle(out / "figures", problem, stats, plan)
    return ExperimentResult(out, problem, reports, stats, comparison, plan, lmi)


def run_experiment(name: str, overrides: Optional[dict] = None,
                   out_dir: Union[str, Path, None] = None) -> ExperimentResult:
    """Run a shipped experiment (``fig2`` or ``pvtol``; ``ou`` also works)."""
    cfg = with_overrides(shipped_config(name), overrides)
    return run_config(cfg, out_dir)
