"""Averaged moment generating function (AMGF) and its tail bounds.

For ``X`` in ``R^n`` the AMGF energy is the average of ``exp(lam <l, X>)``
over directions ``l`` uniform on the unit sphere. It depends on ``X`` only
through ``|X|`` and equals the confluent hypergeometric limit function

    Phi = 0F1(; n/2; (lam r)^2 / 4),

evaluated with :func:`scipy.special.hyp0f1`.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import hyp0f1

OVERFLOW_GUARD = 700.0


class AmgfError(ValueError):
    pass


@dataclass(frozen=True)
class AmgfQuery:
    lam: float
    radius: float
    dim: int

    def __post_init__(self):
        if not self.radius >= 0:
            raise AmgfError(f"radius must be non-negative, got {self.radius}")
        if self.dim < 1:
            raise AmgfError(f"dim must be >= 1, got {self.dim}")


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise AmgfError(f"eps must lie in (0, 1), got {eps}")


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise AmgfError(f"delta must lie in (0, 1), got {delta}")


def amgf_value(q: AmgfQuery) -> float:
    """Exact sphere average of ``exp(lam <l, X>)`` with ``|X| = q.radius``."""
    x = abs(q.lam) * q.radius
    if x > OVERFLOW_GUARD:
        raise AmgfError(f"|lam| * radius = {x:.6g} exceeds the overflow guard {OVERFLOW_GUARD}")
    value = float(hyp0f1(0.5 * q.dim, 0.25 * x * x))
    if not math.isfinite(value):
        raise AmgfError(f"AMGF overflowed at |lam| * radius = {x:.6g}, n = {q.dim}")
    return value


def amgf_weighted(x, M, lam: float) -> float:
    """``Phi_M(x) = Phi(M^{1/2} x)``, i.e. the AMGF at radius ``|x|_M``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    M = np.asarray(M, dtype=float)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise AmgfError("weight matrix is not symmetric positive definite") from None
    r = math.sqrt(max(float(x @ M @ x), 0.0))
    return amgf_value(AmgfQuery(lam, r, len(x)))


def amgf_lower_bound(q: AmgfQuery, eps: float) -> float:
    """``(1 - eps^2)^{n/2} exp(eps |lam| r)``, never above :func:`amgf_value`."""
    _check_eps(eps)
    return (1.0 - eps * eps) ** (0.5 * q.dim) * math.exp(eps * abs(q.lam) * q.radius)


def epsilon_terms(eps: float) -> tuple[float, float]:
    """``eps1 = log(1/(1-eps^2)) / eps^2`` and ``eps2 = 2 / eps^2``."""
    _check_eps(eps)
    e2 = eps * eps
    return -math.log1p(-e2) / e2, 2.0 / e2


def radius_factor(n: int, delta: float, eps: float) -> float:
    """``eps1 n + eps2 log(1/delta)``, the squared multiplier of every tail radius."""
    _check_delta(delta)
    e1, e2 = epsilon_terms(eps)
    return e1 * n + e2 * math.log(1.0 / delta)


def amgf_tail_radius(theta: float, n: int, delta: float, eps: float) -> float:
    """Radius ``theta * sqrt(eps1 n + eps2 log(1/delta))``.

    If ``E Phi_M(X) <= exp(lam^2 theta^2 / 2)`` for every ``lam`` then
    ``P(|X|_M <= radius) >= 1 - delta``. The hypothesis is not checked here.
    """
    if not theta >= 0:
        raise AmgfError("theta must be non-negative")
    if n < 1:
        raise AmgfError("n must be >= 1")
    return theta * math.sqrt(radius_factor(n, delta, eps))


def optimize_epsilon(n: int, delta: float, lo: float = 1e-3, hi: float = 1.0 - 1e-6) -> float:
    """Minimize ``eps1(eps) n + eps2(eps) log(1/delta)`` over ``eps``."""
    _check_delta(delta)
    log_term = math.log(1.0 / delta)

    def objective(e):
        e1, e2 = epsilon_terms(e)
        return e1 * n + e2 * log_term

    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-9})
    best = float(res.x)
    # guard against a bracket-edge miss
    for e in (0.5, 0.9, 15 / 16):
        if objective(e) < objective(best):
            best = e
    return best
