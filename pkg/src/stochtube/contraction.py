"""Time-varying contraction certificates.

A schedule pairs metrics ``M_t`` with rates ``c_t`` such that

    J^T M_t + M_t J + dM_t/dt  <=  2 c_t M_t

for the Jacobians ``J`` of the (closed-loop) drift. Rates are estimated by
taking the worst case over sampled states, so they are only as good as the
sampled region.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .systems import SystemModel, eval_input_jacobian, eval_jacobian, finite_difference_jacobian
from .simulate import TrajectoryGrid
from ._csv import read_rows, write_rows

MAX_CONDITION = 1e12
# box corners are added to the sample set up to this dimension (2**n points)
MAX_VERTEX_DIM = 10


class CertificateError(ValueError):
    """Broken contraction certificate (non-SPD or ill-conditioned metric)."""


def _spd_check(M: np.ndarray, where: str = "") -> None:
    if not np.allclose(M, np.swapaxes(M, -1, -2), rtol=0, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise CertificateError(f"metric is not symmetric{where}")
    w = np.linalg.eigvalsh(M)
    lo, hi = w[..., 0], w[..., -1]
    bad = np.flatnonzero(np.atleast_1d(lo <= 0))
    if bad.size:
        raise CertificateError(f"metric is not positive definite{where} (index {bad[0]})")
    bad = np.flatnonzero(np.atleast_1d(hi / lo > MAX_CONDITION))
    if bad.size:
        raise CertificateError(f"metric condition number exceeds {MAX_CONDITION:g}{where} (index {bad[0]})")


@dataclass(frozen=True)
class MetricSchedule:
    """Metrics, their time derivatives and contraction rates on a time grid.

    ``m_bar`` (largest eigenvalue of each metric) and ``sigma_bar``
    (``sqrt(m_bar) * sigma``) are derived on construction.
    """

    times: np.ndarray
    metrics: np.ndarray
    metric_dots: np.ndarray
    rates: np.ndarray
    sigma: float
    info: dict = field(default_factory=dict, compare=False)
    m_bar: np.ndarray = field(init=False, compare=False)
    sigma_bar: np.ndarray = field(init=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        metrics = np.asarray(self.metrics, dtype=float)
        dots = np.asarray(self.metric_dots, dtype=float)
        rates = np.asarray(self.rates, dtype=float)
        K = len(times)
        if metrics.ndim != 3 or metrics.shape[0] != K or metrics.shape[1] != metrics.shape[2]:
            raise CertificateError(f"metrics must have shape ({K}, n, n), got {metrics.shape}")
        if dots.shape != metrics.shape:
            raise CertificateError("metric_dots shape differs from metrics")
        if rates.shape != (K,):
            raise CertificateError(f"rates must have shape ({K},)")
        if K > 1 and np.any(np.diff(times) <= 0):
            raise CertificateError("schedule times must be increasing")
        if self.sigma < 0:
            raise CertificateError("sigma must be non-negative")
        _spd_check(metrics, " in schedule")
        if K > 1:
            _spd_check(0.5 * (metrics[1:] + metrics[:-1]), " at an interpolation midpoint")
        m_bar = np.linalg.eigvalsh(metrics)[:, -1]
        for name, val in (("times", times), ("metrics", metrics), ("metric_dots", dots),
                          ("rates", rates), ("m_bar", m_bar),
                          ("sigma_bar", np.sqrt(m_bar) * self.sigma)):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.metrics.shape[1]

    @classmethod
    def constant(cls, times, M, sigma: float, rates=None) -> "MetricSchedule":
        times = np.asarray(times, dtype=float)
        M = np.atleast_2d(np.asarray(M, dtype=float))
        metrics = np.broadcast_to(M, (len(times),) + M.shape).copy()
        rates = np.zeros(len(times)) if rates is None else np.broadcast_to(rates, times.shape).astype(float)
        return cls(times, metrics, np.zeros_like(metrics), rates, float(sigma))

    @classmethod
    def from_metrics(cls, times, metrics, sigma: float, rates=None, metric_dots=None) -> "MetricSchedule":
        """Schedule from sampled metrics; derivatives by central differences
        (one-sided at the ends) when ``metric_dots`` is not given."""
        times = np.asarray(times, dtype=float)
        metrics = np.asarray(metrics, dtype=float)
        if metric_dots is None:
            metric_dots = np.gradient(metrics, times, axis=0, edge_order=1) if len(times) > 1 \
                else np.zeros_like(metrics)
        rates = np.zeros(len(times)) if rates is None else rates
        return cls(times, metrics, metric_dots, rates, float(sigma))

    def with_rates(self, rates, **info) -> "MetricSchedule":
        return replace(self, rates=np.asarray(rates, dtype=float), info={**self.info, **info})

    def _locate(self, t: float) -> tuple[int, float]:
        ts = self.times
        if t <= ts[0]:
            return 0, 0.0
        if t >= ts[-1]:
            return len(ts) - 2 if len(ts) > 1 else 0, 1.0 if len(ts) > 1 else 0.0
        k = int(np.searchsorted(ts, t, side="right")) - 1
        return k, (t - ts[k]) / (ts[k + 1] - ts[k])

    def metric_at(self, t: float) -> np.ndarray:
        """Metric at ``t`` by entrywise linear interpolation (clamped)."""
        if len(self.times) == 1:
            return self.metrics[0].copy()
        k, w = self._locate(t)
        return (1 - w) * self.metrics[k] + w * self.metrics[k + 1]

    def resample(self, times) -> "MetricSchedule":
        """Linear interpolation of every quantity onto new knots."""
        times = np.asarray(times, dtype=float)
        ts = self.times

        def interp(arr):
            flat = arr.reshape(len(ts), -1)
            cols = [np.interp(times, ts, flat[:, j]) for j in range(flat.shape[1])]
            return np.stack(cols, axis=-1).reshape((len(times),) + arr.shape[1:])

        return MetricSchedule(times, interp(self.metrics), interp(self.metric_dots),
                              np.interp(times, ts, self.rates), self.sigma, dict(self.info))

    # -- CSV bundle -----------------------------------------------------------

    def to_csv_bundle(self, directory) -> None:
        """One CSV per quantity: ``t`` then row-major matrix entries."""
        d = Path(directory)
        n = self.dim
        ent = [f"m_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        write_rows(d / "metrics.csv", ["t", *ent],
                   ([t, *M.reshape(-1)] for t, M in zip(self.times, self.metrics)))
        write_rows(d / "metric_dots.csv", ["t", *ent],
                   ([t, *M.reshape(-1)] for t, M in zip(self.times, self.metric_dots)))
        write_rows(d / "rates.csv", ["t", "rate"], zip(self.times, self.rates))
        write_rows(d / "m_bar.csv", ["t", "m_bar"], zip(self.times, self.m_bar))
        write_rows(d / "sigma_bar.csv", ["t", "sigma_bar"], zip(self.times, self.sigma_bar))

    @classmethod
    def from_csv_bundle(cls, directory, sigma: float) -> "MetricSchedule":
        d = Path(directory)
        _, rows = read_rows(d / "metrics.csv")
        data = np.array(rows, dtype=float)
        times = data[:, 0]
        n = int(round(np.sqrt(data.shape[1] - 1)))
        metrics = data[:, 1:].reshape(-1, n, n)
        dots = None
        if (d / "metric_dots.csv").exists():
            dots = np.array(read_rows(d / "metric_dots.csv")[1], dtype=float)[:, 1:].reshape(-1, n, n)
        rates = None
        if (d / "rates.csv").exists():
            rates = np.array(read_rows(d / "rates.csv")[1], dtype=float)[:, 1]
        return cls.from_metrics(times, metrics, sigma, rates, dots)


# -- pointwise rates ------------------------------------------------------------


def _whitened_max_eig(S: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Largest generalized eigenvalue of the symmetric pencil ``(S, M)``."""
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise CertificateError("metric is not symmetric positive definite") from None
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    Y = np.linalg.solve(L, S)
    C = np.linalg.solve(L, np.swapaxes(Y, -1, -2))
    return np.linalg.eigvalsh(0.5 * (C + np.swapaxes(C, -1, -2)))[..., -1]


def pointwise_rate(J, M, Mdot) -> float | np.ndarray:
    """Smallest ``c`` with ``J^T M + M J + Mdot <= 2 c M`` (batched over ``J``)."""
    J = np.asarray(J, dtype=float)
    M = np.asarray(M, dtype=float)
    S = np.swapaxes(J, -1, -2) @ M + M @ J + np.asarray(Mdot, dtype=float)
    out = 0.5 * _whitened_max_eig(S, np.broadcast_to(M, S.shape))
    return float(out) if np.ndim(out) == 0 else out


# -- TVLQR --------------------------------------------------------------------


@dataclass(frozen=True)
class LqrSpec:
    Q: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    reference: TrajectoryGrid

    def __post_init__(self):
        for name in ("Q", "R", "terminal"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n = self.reference.dim
        if self.Q.shape != (n, n) or self.terminal.shape != (n, n):
            raise ValueError(f"Q and terminal must be {n}x{n}")
        if self.R.shape[0] != self.R.shape[1]:
            raise ValueError("R must be square")


@dataclass(frozen=True)
class GainSchedule:
    """Feedback ``u = u_ref(t) - K_t (x - x_ref(t))`` along a reference."""

    times: np.ndarray
    gains: np.ndarray
    reference: TrajectoryGrid

    def _interp(self, arr: np.ndarray, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return arr[0]
        if t >= ts[-1]:
            return arr[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1 - w) * arr[k] + w * arr[k + 1]

    def gain(self, t: float) -> np.ndarray:
        return self._interp(self.gains, t)

    def state(self, t: float) -> np.ndarray:
        return self._interp(self.reference.states, t)


def _reference_state(ref: TrajectoryGrid, t: float) -> np.ndarray:
    cols = [np.interp(t, ref.times, ref.states[:, j]) for j in range(ref.dim)]
    return np.array(cols)


def riccati_tvlqr(model: SystemModel, spec: LqrSpec, dt: Optional[float] = None):
    """Backward RK4 integration of the Riccati differential equation.

    ``-dP/dt = A^T P + P A - P B R^{-1} B^T P + Q`` with ``P_T = terminal``,
    linearized along ``spec.reference`` and the model's input signal.
    Returns ``(schedule, gains)`` with ``M_t = P_t``, ``dM/dt`` from the
    right-hand side and nominal closed-loop rates of ``A - B K``.
    """
    ref = spec.reference
    times = ref.times
    n, p = model.state_dim, model.input_dim
    if p == 0:
        raise ValueError("TVLQR needs a model with inputs")
    if ref.dim != n or spec.R.shape != (p, p):
        raise ValueError("LQR spec dimensions do not match the model")
    try:
        Rinv = np.linalg.inv(spec.R)
    except np.linalg.LinAlgError:
        raise ValueError("R is not invertible") from None
    Q = spec.Q

    def AB(t):
        x = _reference_state(ref, t)
        u = model.input(t)
        return eval_jacobian(model, x, t), eval_input_jacobian(model, x, u, t)

    def rhs(t, P):
        A, B = AB(t)
        return -(A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q)

    base_sub = 1 if dt is None else max(1, int(round(ref.dt / dt)))
    P = 0.5 * (spec.terminal + spec.terminal.T)
    K = len(times)
    Ps = np.empty((K, n, n))
    Ps[-1] = P
    for k in range(K - 1, 0, -1):
        t = times[k]
        span = times[k] - times[k - 1]
        # keep RK4 inside its stability region: |h| * stiffness <= 2
        A, B = AB(t)
        stiff = 2.0 * (np.linalg.norm(A, 2) + np.linalg.norm(B @ Rinv @ B.T @ P, 2))
        sub = max(base_sub, int(np.ceil(span * stiff / 2.0)))
        h = -span / sub
        for _ in range(sub):
            k1 = rhs(t, P)
            k2 = rhs(t + 0.5 * h, P + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, P + 0.5 * h * k2)
            k4 = rhs(t + h, P + h * k3)
            P = P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            P = 0.5 * (P + P.T)
            t = t + h
        if not np.all(np.isfinite(P)) or np.linalg.eigvalsh(P)[0] <= 0:
            raise CertificateError(f"Riccati solution lost positive definiteness at t={times[k - 1]:.6g}")
        Ps[k - 1] = P

    dots = np.empty_like(Ps)
    gains = np.empty((K, p, n))
    rates = np.empty(K)
    for k, t in enumerate(times):
        A, B = AB(t)
        P = Ps[k]
        dots[k] = -(A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q)
        gains[k] = Rinv @ B.T @ P
        rates[k] = pointwise_rate(A - B @ gains[k], P, dots[k])
    schedule = MetricSchedule(times, Ps, dots, rates, model.sigma, {"metric_source": "riccati"})
    return schedule, GainSchedule(times, gains, ref)


def close_loop(model: SystemModel, gains: GainSchedule) -> SystemModel:
    """Model with the TVLQR feedback folded into the drift.

    The model's open-loop input signal is kept as the feedforward term.
    """

    def fb_input(x, u, t):
        dx = x - gains.state(t)
        return u - np.einsum("ij,...j->...i", gains.gain(t), dx)

    def drift(x, u, t):
        return model.drift(x, fb_input(x, u, t), t)

    def jac(x, u, t):
        v = fb_input(x, u, t)
        A = model.jacobian(x, v, t) if model.jacobian is not None else \
            finite_difference_jacobian(lambda z: model.drift(z, v, t), x)
        B = eval_input_jacobian(model, x, v, t)
        return A - B @ gains.gain(t)

    def ujac(x, u, t):
        return eval_input_jacobian(model, x, fb_input(x, u, t), t)

    return replace(model, drift=drift, jacobian=jac, input_jacobian=ujac,
                   name=f"{model.name}+tvlqr")


# -- sampled rate estimation -----------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned sampling region; ``relative`` boxes are offsets from a
    per-knot center trajectory."""

    lower: np.ndarray
    upper: np.ndarray
    relative: bool = False

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("box needs lower <= upper with equal lengths")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_widths, relative: bool = True) -> "Box":
        h = np.asarray(half_widths, dtype=float)
        return cls(-h, h, relative)

    def describe(self) -> str:
        kind = "relative" if self.relative else "absolute"
        return f"{kind} box lower={self.lower.tolist()} upper={self.upper.tolist()}"

    def unit_samples(self, samples: int, seed: int) -> np.ndarray:
        if samples <= 0:
            return np.zeros((0, len(self.lower)))
        # Halton prefixes are stable: more samples only add points
        gen = qmc.Halton(d=len(self.lower), scramble=True, seed=np.random.default_rng(seed))
        return gen.random(samples)

    def vertices(self) -> np.ndarray:
        """All ``2**n`` corners, in a fixed order."""
        return np.array(list(itertools.product(*zip(self.lower, self.upper))), dtype=float)


def _use_vertices(region: Box, vertices: Optional[bool]) -> bool:
    if vertices is None:
        return len(region.lower) <= MAX_VERTEX_DIM
    return vertices


def _sample_points(region: Box, samples: int, seed: int, center,
                   vertices: Optional[bool] = None) -> np.ndarray:
    unit = region.unit_samples(samples, seed)
    pts = region.lower + unit * (region.upper - region.lower)
    if _use_vertices(region, vertices):
        pts = np.concatenate([pts, region.vertices()])
    if region.relative and center is None:
        raise ValueError("relative region needs a center trajectory")
    return pts


def _knot_points(pts: np.ndarray, region: Box, center: Optional[np.ndarray], k: int) -> np.ndarray:
    if region.relative:
        return center[k] + pts
    return pts


def _center_states(schedule: MetricSchedule, center: Optional[TrajectoryGrid]):
    if center is None:
        return None
    if len(center.times) == len(schedule.times) and np.allclose(center.times, schedule.times):
        return center.states
    return np.stack([_reference_state(center, t) for t in schedule.times])


def estimate_rate_schedule(model: SystemModel, schedule: MetricSchedule, region: Box,
                           samples: int, seed: int,
                           center: Optional[TrajectoryGrid] = None,
                           vertices: Optional[bool] = None) -> MetricSchedule:
    """Rates ``c_k = max_x pointwise_rate(J(x, t_k), M_k, dM_k)`` over sampled ``x``.

    The sample set is a scrambled Halton sequence plus, by default for
    dimensions up to ``MAX_VERTEX_DIM``, every corner of the box (Jacobians
    that are multilinear in the state peak there). It is still an inner
    approximation of the true supremum over the region.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    pts = _sample_points(region, samples, seed, center, vertices)
    cstates = _center_states(schedule, center)
    rates = np.empty(len(schedule.times))
    for k, t in enumerate(schedule.times):
        x = _knot_points(pts, region, cstates, k)
        J = eval_jacobian(model, x, t)
        rates[k] = np.max(pointwise_rate(J, schedule.metrics[k], schedule.metric_dots[k]))
    return schedule.with_rates(rates, rate_samples=samples, rate_points=len(pts),
                               rate_region=region.describe(), rate_seed=seed)


@dataclass
class LmiReport:
    samples: int
    region: str
    worst_margin: float
    worst_time: float
    violations: list
    tol: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        status = "pass" if self.passed else f"FAIL ({len(self.violations)} violations)"
        extra = f" [{self.note}]" if self.note else ""
        return (f"LMI check {status}: worst margin {self.worst_margin:.3e} at t={self.worst_time:.4g}, "
                f"{self.samples} points/knot in {self.region}, tol {self.tol:g}{extra}")


def verify_lmi(model: SystemModel, schedule: MetricSchedule, region: Box, samples: int,
               tol: float, seed: int, center: Optional[TrajectoryGrid] = None,
               vertices: Optional[bool] = None) -> LmiReport:
    """Check the contraction LMI at sampled ``(x, t_k)``; violations are data, not errors.

    Uses the same point set as :func:`estimate_rate_schedule` for equal
    ``samples``, ``seed`` and ``vertices``.
    """
    if samples <= 0:
        return LmiReport(0, region.describe(), float("-inf"), float("nan"), [], tol, "no samples")
    pts = _sample_points(region, samples, seed, center, vertices)
    cstates = _center_states(schedule, center)
    worst, worst_t = -np.inf, float("nan")
    violations = []
    for k, t in enumerate(schedule.times):
        x = _knot_points(pts, region, cstates, k)
        J = eval_jacobian(model, x, t)
        M, Md, c = schedule.metrics[k], schedule.metric_dots[k], schedule.rates[k]
        S = np.swapaxes(J, -1, -2) @ M + M @ J + Md - 2.0 * c * M
        margin = _whitened_max_eig(S, np.broadcast_to(M, S.shape))
        j = int(np.argmax(margin))
        if margin[j] > worst:
            worst, worst_t = float(margin[j]), float(t)
        for i in np.flatnonzero(margin > tol):
            violations.append((float(t), int(i), float(margin[i])))
    return LmiReport(len(pts), region.describe(), worst, worst_t, violations, tol)
