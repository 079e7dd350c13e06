"""Concentration radii around a nominal trajectory.

All radii are in the metric norm ``|X_t - x_t|_{M_t}`` and are built from
two integrals of the metric schedule on a uniform quadrature grid:

    psi_t = int_0^t c                     (accumulated contraction)
    Psi_t = int_0^t sigma_bar^2 e^{-2 psi}  (accumulated noise energy)
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_simpson as _scipy_cumulative_simpson

from .amgf import epsilon_terms, optimize_epsilon
from .contraction import MetricSchedule
from .simulate import time_grid
from ._csv import write_rows

KINDS = ("single_time", "trajectory", "trajectory_segmented", "isa_baseline")
TRAJECTORY_KINDS = ("trajectory", "trajectory_segmented")


class BoundError(ValueError):
    pass


class HypothesisError(BoundError):
    """A bound was requested outside the conditions it is valid for."""


@dataclass(frozen=True)
class BoundParams:
    delta: float
    eps: Union[float, str] = 0.9
    T: float = 1.0
    dt_seg: float = 0.1
    grid_dt: Optional[float] = None
    segment_weighting: str = "absolute"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise BoundError(f"delta must lie in (0, 1), got {self.delta}")
        if self.eps != "auto" and not (isinstance(self.eps, (int, float)) and 0.0 < self.eps < 1.0):
            raise BoundError(f"eps must lie in (0, 1) or be 'auto', got {self.eps!r}")
        if self.grid_dt is None:
            object.__setattr__(self, "grid_dt", min(1e-3, self.dt_seg / 10.0))
        if not 0.0 < self.grid_dt <= self.dt_seg * (1 + 1e-12) or self.dt_seg > self.T * (1 + 1e-12):
            raise BoundError("need 0 < grid_dt <= dt_seg <= T")
        if self.segment_weighting not in ("absolute", "rebased"):
            raise BoundError(f"unknown segment weighting {self.segment_weighting!r}")

    def resolve_eps(self, n: int) -> float:
        if self.eps == "auto":
            return optimize_epsilon(n, self.delta)
        return float(self.eps)


@dataclass(frozen=True)
class ScheduleIntegrals:
    times: np.ndarray
    psi: np.ndarray
    Psi: np.ndarray
    Psi_seg: np.ndarray
    rates: np.ndarray
    sigma_bar: np.ndarray
    dt_seg: float
    seg_stride: int

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def segment_index(self, k: np.ndarray | int) -> np.ndarray:
        """Segment ``floor(t_k / dt_seg)`` of each knot index; ``t = T`` maps to
        the last segment."""
        return np.minimum(np.asarray(k) // self.seg_stride, len(self.Psi_seg) - 1)


@dataclass(frozen=True)
class BoundCurve:
    times: np.ndarray
    radii: np.ndarray
    kind: str
    params: BoundParams
    n: int
    eps: Optional[float] = None
    label: str = field(default="")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BoundError(f"unknown curve kind {self.kind!r}")
        if not np.all(np.isfinite(self.radii)) or np.any(self.radii < 0):
            raise BoundError("radii must be finite and non-negative")
        if not self.label:
            object.__setattr__(self, "label", self.kind)

    @property
    def trajectory_level(self) -> bool:
        return self.kind in TRAJECTORY_KINDS

    def knot_indices(self, times) -> np.ndarray:
        """Indices of the curve knots matching ``times``; raises if any is off-grid."""
        times = np.asarray(times, dtype=float)
        idx = np.clip(np.searchsorted(self.times, times), 0, len(self.times) - 1)
        prev = np.clip(idx - 1, 0, None)
        pick = np.where(np.abs(self.times[prev] - times) < np.abs(self.times[idx] - times), prev, idx)
        tol = 1e-9 * max(1.0, float(self.times[-1]))
        if np.any(np.abs(self.times[pick] - times) > tol):
            raise BoundError("time grid is not aligned with the bound curve knots")
        return pick

    def radius_at(self, times) -> np.ndarray:
        return self.radii[self.knot_indices(times)]


@dataclass(frozen=True)
class AffineMartingaleSpec:
    """Coefficients of ``E[dB | Y_t] <= (a_t B + b_t) dt`` on ``linspace(0, T, K+1)``."""

    a: np.ndarray
    b: np.ndarray
    B0: float
    T: float

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if np.any(b < 0):
            raise BoundError("b_t must be non-negative")
        if self.B0 < 0:
            raise BoundError("B0 must be non-negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


def cumulative_simpson(y: np.ndarray, h: float) -> np.ndarray:
    """Running integral of samples on a uniform grid, starting from 0 (fourth order)."""
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        return np.zeros(len(y))
    return _scipy_cumulative_simpson(y, dx=h, initial=0.0)


def compute_integrals(schedule: MetricSchedule, params: BoundParams) -> ScheduleIntegrals:
    """``psi``, ``Psi`` and per-segment ``Psi`` on the quadrature grid."""
    T, h = params.T, params.grid_dt
    tol = 1e-9 * max(1.0, T)
    if schedule.times[0] > tol or schedule.times[-1] < T - tol:
        raise BoundError(f"schedule covers [{schedule.times[0]:g}, {schedule.times[-1]:g}], "
                         f"shorter than the horizon [0, {T:g}]")
    try:
        grid = time_grid(T, h)
    except ValueError as exc:
        raise BoundError(str(exc)) from None
    stride = int(round(params.dt_seg / h))
    if abs(stride * h - params.dt_seg) > 1e-9 * params.dt_seg:
        raise BoundError(f"dt_seg={params.dt_seg} is not a multiple of grid_dt={h}")
    h = grid[1] - grid[0]
    rates = np.interp(grid, schedule.times, schedule.rates)
    sbar = np.interp(grid, schedule.times, schedule.sigma_bar)
    psi = cumulative_simpson(rates, h)
    Psi = cumulative_simpson(sbar ** 2 * np.exp(-2.0 * psi), h)
    K = len(grid) - 1
    starts = np.arange(0, K, stride)
    ends = np.minimum(starts + stride, K)
    Psi_seg = Psi[ends] - Psi[starts]
    return ScheduleIntegrals(grid, psi, Psi, Psi_seg, rates, sbar, params.dt_seg, stride)


def _factor(n: int, delta: float, eps: float, log_arg: Optional[float] = None) -> float:
    e1, e2 = epsilon_terms(eps)
    return e1 * n + e2 * math.log(1.0 / delta if log_arg is None else log_arg)


def bound_single_time(si: ScheduleIntegrals, n: int, params: BoundParams) -> BoundCurve:
    """Pointwise radius ``sqrt(e^{2 psi_t} Psi_t (eps1 n + eps2 log(1/delta)))``."""
    eps = params.resolve_eps(n)
    energy = np.exp(2.0 * si.psi) * si.Psi
    radii = np.sqrt(energy * _factor(n, params.delta, eps))
    return BoundCurve(si.times, radii, "single_time", params, n, eps)


def bound_trajectory(si: ScheduleIntegrals, n: int, params: BoundParams) -> BoundCurve:
    """Whole-path radius ``sqrt(e^{2 psi_t} Psi_T (eps1 n + eps2 log(1/delta)))``."""
    eps = params.resolve_eps(n)
    energy = np.exp(2.0 * si.psi) * si.Psi[-1]
    radii = np.sqrt(energy * _factor(n, params.delta, eps))
    return BoundCurve(si.times, radii, "trajectory", params, n, eps)


def bound_trajectory_segmented(si: ScheduleIntegrals, n: int, params: BoundParams) -> BoundCurve:
    """Whole-path radius for strongly contracting schedules.

    ``(sqrt(e^{2 psi_t} Psi_t) + sqrt(Psi_seg(t))) sqrt(eps1 n + eps2 log(2T / (delta dt_seg)))``
    where ``Psi_seg(t)`` is the noise energy of the segment containing ``t``.
    Requires every rate to be strictly negative.
    """
    if np.any(si.rates >= 0):
        k = int(np.flatnonzero(si.rates >= 0)[0])
        raise HypothesisError(f"segmented trajectory bound needs c_t < 0 everywhere; "
                              f"c = {si.rates[k]:.4g} at t = {si.times[k]:.4g}")
    eps = params.resolve_eps(n)
    seg = si.segment_index(np.arange(len(si.times)))
    seg_energy = si.Psi_seg[seg]
    if params.segment_weighting == "rebased":
        seg_energy = seg_energy * np.exp(2.0 * si.psi[seg * si.seg_stride])
    head = np.sqrt(np.exp(2.0 * si.psi) * si.Psi)
    log_arg = 2.0 * si.T / (params.delta * params.dt_seg)
    radii = (head + np.sqrt(seg_energy)) * math.sqrt(_factor(n, params.delta, eps, log_arg))
    return BoundCurve(si.times, radii, "trajectory_segmented", params, n, eps)


def bound_isa_baseline(si: ScheduleIntegrals, n: int, delta: float,
                       params: Optional[BoundParams] = None) -> BoundCurve:
    """Second-moment (Chebyshev) baseline ``sqrt(e^{2 psi_t} Psi_t n / delta)``.

    Not a result of the AMGF analysis; included as the conservative comparator.
    """
    if not 0.0 < delta <= 1.0:
        raise BoundError(f"delta must lie in (0, 1], got {delta}")
    radii = np.sqrt(np.exp(2.0 * si.psi) * si.Psi * n / delta)
    if params is None:
        params = BoundParams(min(delta, 0.5), 0.9, si.T, si.dt_seg, float(si.times[1] - si.times[0]))
    return BoundCurve(si.times, radii, "isa_baseline", params, n, None)


def all_bounds(si: ScheduleIntegrals, n: int, params: BoundParams) -> list[BoundCurve]:
    """Every applicable curve; the segmented one only when all rates are negative."""
    curves = [bound_single_time(si, n, params), bound_trajectory(si, n, params)]
    if np.all(si.rates < 0):
        curves.append(bound_trajectory_segmented(si, n, params))
    curves.append(bound_isa_baseline(si, n, params.delta, params))
    return curves


def am_sublevel_probability(spec: AffineMartingaleSpec, B_bar: float, grid_dt: float) -> float:
    """Lower bound on ``P(B_tilde(Y_t, t) <= B_bar for all t <= T)``.

    ``xi_t = exp(int_t^T a)``; the bound is
    ``1 - (B0 xi_0 + int_0^T b xi) / B_bar``, clipped to ``[0, 1]``.
    """
    if not B_bar > 0:
        raise BoundError("B_bar must be positive")
    grid = time_grid(spec.T, grid_dt)
    src = np.linspace(0.0, spec.T, len(spec.a)) if len(spec.a) > 1 else None
    a = np.interp(grid, src, spec.a) if src is not None else np.full(len(grid), spec.a[0])
    srcb = np.linspace(0.0, spec.T, len(spec.b)) if len(spec.b) > 1 else None
    b = np.interp(grid, srcb, spec.b) if srcb is not None else np.full(len(grid), spec.b[0])
    h = grid[1] - grid[0]
    A = cumulative_simpson(a, h)
    xi = np.exp(A[-1] - A)
    total = spec.B0 * xi[0] + cumulative_simpson(b * xi, h)[-1]
    return float(min(1.0, max(0.0, 1.0 - total / B_bar)))


def write_curves_csv(path, curves: Sequence[BoundCurve]) -> None:
    """Long-format CSV: ``t, radius, kind, delta, eps, dt_seg``."""
    rows = []
    for c in curves:
        eps = "" if c.eps is None else c.eps
        for t, r in zip(c.times, c.radii):
            rows.append([t, r, c.kind, c.params.delta, eps, c.params.dt_seg])
    write_rows(path, ["t", "radius", "kind", "delta", "eps", "dt_seg"], rows)


def write_integrals_csv(path, si: ScheduleIntegrals) -> None:
    seg = si.segment_index(np.arange(len(si.times)))
    rows = zip(si.times, si.rates, si.sigma_bar, si.psi, si.Psi, seg, si.Psi_seg[seg])
    write_rows(path, ["t", "rate", "sigma_bar", "psi", "Psi", "segment", "Psi_seg"], rows)
