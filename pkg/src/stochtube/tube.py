"""Tube geometry: weighted deviations, planar projection and set erosion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import BoundCurve
from .contraction import CertificateError, MetricSchedule
from .simulate import TrajectoryGrid
from ._csv import write_rows


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Circle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Euclidean distance from ``p`` (shape ``(..., 2)``) to the disk."""
        return np.maximum(np.linalg.norm(p - self.center, axis=-1) - self.radius, 0.0)

    def signed_clearance(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - self.center, axis=-1) - self.radius


@dataclass(frozen=True)
class Rect:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(2)
        hi = np.asarray(self.upper, dtype=float).reshape(2)
        if np.any(hi <= lo):
            raise ValueError("box obstacle is degenerate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def distance(self, p: np.ndarray) -> np.ndarray:
        d = np.maximum(np.maximum(self.lower - p, p - self.upper), 0.0)
        return np.linalg.norm(d, axis=-1)

    def signed_clearance(self, p: np.ndarray) -> np.ndarray:
        outside = self.distance(p)
        inside = np.min(np.minimum(p - self.lower, self.upper - p), axis=-1)
        return np.where(outside > 0, outside, -np.maximum(inside, 0.0))


@dataclass(frozen=True)
class SafeSetSpec:
    """Planar obstacles, a circular goal and the state coordinates of the plane."""

    circles: Sequence[Circle] = ()
    boxes: Sequence[Rect] = ()
    goal: Circle = field(default_factory=lambda: Circle(np.zeros(2), 1e9))
    proj_coords: tuple = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "circles", tuple(self.circles))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        i, j = self.proj_coords
        if i == j or i < 0 or j < 0:
            raise ValueError("proj_coords must be two distinct non-negative indices")

    @property
    def obstacles(self) -> tuple:
        return self.circles + self.boxes

    def project(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states)[..., list(self.proj_coords)]

    def collides(self, p: np.ndarray) -> np.ndarray:
        """True where a planar point lies inside (or on) any obstacle."""
        p = np.asarray(p, dtype=float)
        hit = np.zeros(p.shape[:-1], dtype=bool)
        for ob in self.obstacles:
            hit |= ob.distance(p) <= 0.0
        return hit


def weighted_deviation(X: TrajectoryGrid, x: TrajectoryGrid, schedule: MetricSchedule) -> np.ndarray:
    """``|X_k - x_k|_{M_k}`` at every knot."""
    if len(X.times) != len(x.times) or not np.allclose(X.times, x.times, atol=1e-12):
        raise AlignmentError("trajectories are not on the same time grid")
    metrics = metrics_on(schedule, X.times)
    d = X.states - x.states
    return np.sqrt(np.maximum(np.einsum("ki,kij,kj->k", d, metrics, d), 0.0))


def metrics_on(schedule: MetricSchedule, times: np.ndarray) -> np.ndarray:
    """Schedule metrics at ``times``; exact knots when the grids coincide."""
    times = np.asarray(times, dtype=float)
    if len(times) == len(schedule.times) and np.allclose(times, schedule.times, atol=1e-12):
        return schedule.metrics
    tol = 1e-9 * max(1.0, float(schedule.times[-1]))
    if times[0] < schedule.times[0] - tol or times[-1] > schedule.times[-1] + tol:
        raise AlignmentError("times fall outside the metric schedule")
    return np.stack([schedule.metric_at(t) for t in times])


def _selector(n: int, proj_coords) -> np.ndarray:
    i, j = proj_coords
    if max(i, j) >= n:
        raise ValueError(f"proj_coords {proj_coords} out of range for dimension {n}")
    E = np.zeros((2, n))
    E[0, i] = 1.0
    E[1, j] = 1.0
    return E


def project_tube_ellipse(M, proj_coords) -> np.ndarray:
    """Shape matrix ``S = E M^{-1} E^T`` of the planar shadow: the shadow of
    ``{v : v^T M v <= r^2}`` is ``{p : p^T S^{-1} p <= r^2}``."""
    M = np.asarray(M, dtype=float)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise CertificateError("metric is not symmetric positive definite") from None
    E = _selector(M.shape[-1], proj_coords)
    # E M^{-1} E^T = (L^{-1} E^T)^T (L^{-1} E^T)
    Z = np.linalg.solve(L, np.broadcast_to(E.T, M.shape[:-2] + E.T.shape))
    return np.swapaxes(Z, -1, -2) @ Z


def project_tube_radius(M, r, proj_coords) -> float | np.ndarray:
    """Radius of the smallest circle containing the planar shadow of the
    ellipsoid ``{v : v^T M v <= r^2}``; ``M`` may be batched."""
    S = project_tube_ellipse(M, proj_coords)
    out = np.asarray(r, dtype=float) * np.sqrt(np.linalg.eigvalsh(S)[..., -1])
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class SafetyVerdict:
    margins: np.ndarray
    obstacle_safe: np.ndarray
    goal_distance: float
    in_goal: bool
    goal_infeasible: bool

    @property
    def safe(self) -> bool:
        return bool(np.all(self.obstacle_safe))

    @property
    def violating(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.obstacle_safe)]

    @property
    def min_margin(self) -> float:
        return float(self.margins.min()) if self.margins.size else float("inf")


def erode_check(spec: SafeSetSpec, p, r_tube: float) -> SafetyVerdict:
    """Membership of ``p`` in the safe set eroded by a disk of radius ``r_tube``.

    Obstacles are grown by ``r_tube`` (exact distance, so boxes get rounded
    corners) and the goal disk shrinks by ``r_tube``.
    """
    if r_tube < 0:
        raise ValueError("tube radius must be non-negative")
    p = np.asarray(p, dtype=float).reshape(2)
    margins = np.array([ob.distance(p) - r_tube for ob in spec.obstacles], dtype=float)
    # touching an obstacle counts as a collision even for r_tube = 0
    safe = np.array([ob.distance(p) > r_tube for ob in spec.obstacles], dtype=bool)
    gd = float(np.linalg.norm(p - spec.goal.center))
    infeasible = spec.goal.radius <= r_tube
    in_goal = (not infeasible) and gd <= spec.goal.radius - r_tube
    return SafetyVerdict(margins, safe, gd, in_goal, infeasible)


@dataclass
class PlanReport:
    times: np.ndarray
    proj_radius: np.ndarray
    min_margin: np.ndarray
    safe: np.ndarray
    terminal_in_goal: bool
    goal_infeasible: bool
    knot_spacing: float
    curve_kind: str

    @property
    def max_proj_radius(self) -> float:
        return float(self.proj_radius.max())

    @property
    def first_violation(self) -> float | None:
        bad = np.flatnonzero(~self.safe)
        return float(self.times[bad[0]]) if bad.size else None

    @property
    def passed(self) -> bool:
        return bool(np.all(self.safe)) and self.terminal_in_goal

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = [f"plan {status}: max projected radius {self.max_proj_radius:.4g}",
                 f"min obstacle margin {self.min_margin.min():.4g}",
                 f"terminal in shrunken goal: {self.terminal_in_goal}"]
        if self.first_violation is not None:
            parts.append(f"first violation at t={self.first_violation:.4g}")
        if self.goal_infeasible:
            parts.append("goal infeasible: goal radius <= projected tube radius")
        parts.append(f"checked on knots every {self.knot_spacing:g} s (inter-knot motion unchecked)")
        return "; ".join(parts)

    def to_csv(self, path) -> None:
        write_rows(path, ["t", "proj_radius", "min_obstacle_margin", "safe"],
                   zip(self.times, self.proj_radius, self.min_margin, self.safe))


def verify_plan(nominal: TrajectoryGrid, schedule: MetricSchedule, curve: BoundCurve,
                spec: SafeSetSpec) -> PlanReport:
    """Check the nominal plan against the eroded safe set at every knot."""
    if not curve.trajectory_level:
        raise ValueError(f"verify_plan needs a trajectory-level bound, got {curve.kind!r}: a "
                         "pointwise radius holds at each time separately, not for the whole path")
    try:
        radii = curve.radius_at(nominal.times)
    except ValueError as exc:
        raise AlignmentError(str(exc)) from None
    metrics = metrics_on(schedule, nominal.times)
    proj = project_tube_radius(metrics, radii, spec.proj_coords)
    pts = spec.project(nominal.states)
    margins = np.empty(len(nominal.times))
    safe = np.empty(len(nominal.times), dtype=bool)
    for k in range(len(nominal.times)):
        v = erode_check(spec, pts[k], float(proj[k]))
        margins[k] = v.min_margin
        safe[k] = v.safe
    final = erode_check(spec, pts[-1], float(proj[-1]))
    # a goal narrower than the widest tube section cannot be certified
    infeasible = final.goal_infeasible or spec.goal.radius <= float(proj.max())
    return PlanReport(nominal.times, proj, margins, safe, final.in_goal and not infeasible,
                      infeasible, nominal.dt, curve.kind)
