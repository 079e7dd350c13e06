"""System models for Ito SDEs ``dX = f(X, u, t) dt + g_t(X) dW``.

Drift, Jacobian and diffusion callables are vectorized: ``x`` may carry
leading batch axes (shape ``(..., n)``) and the result keeps them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

Drift = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
Jacobian = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
Diffusion = Callable[[np.ndarray, float], np.ndarray]

DEFAULT_FD_STEP = 1e-5


class ModelError(ValueError):
    """Bad model definition or failed model evaluation."""


class ModelEvaluationError(ModelError):
    pass


@dataclass(frozen=True)
class InputSignal:
    """Sampled open-loop input ``u_t``.

    ``mode`` is ``"hold"`` (piecewise constant, value of the last knot at or
    before ``t``) or ``"linear"``. Outside ``[times[0], times[-1]]`` the
    signal clamps to the nearest endpoint.
    """

    times: np.ndarray
    values: np.ndarray
    mode: str = "hold"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(times), -1) if len(times) else values.reshape(0, 0)
        if len(times) == 0:
            raise ModelError("input signal needs at least one knot")
        if values.shape[0] != len(times):
            raise ModelError(f"input signal has {len(times)} knots but {values.shape[0]} values")
        if np.any(np.diff(times) <= 0):
            raise ModelError("input signal knot times must be strictly increasing")
        if self.mode not in ("hold", "linear"):
            raise ModelError(f"unknown input evaluation mode {self.mode!r}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, u) -> "InputSignal":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(np.array([0.0]), u.reshape(1, -1))

    @classmethod
    def empty(cls) -> "InputSignal":
        return cls(np.array([0.0]), np.zeros((1, 0)))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        """Value at ``t``; ``left=True`` gives the left limit at a hold knot,
        i.e. the value held over the interval that ends at ``t``."""
        ts = self.times
        if t <= ts[0]:
            return self.values[0].copy()
        if t >= ts[-1] and not left:
            return self.values[-1].copy()
        if self.mode == "hold":
            # tiny slack so that t == knot (up to rounding) picks that knot
            slack = 1e-12 * max(1.0, abs(t))
            if left:
                k = int(np.searchsorted(ts, t - slack, side="right")) - 1
            else:
                k = int(np.searchsorted(ts, t + slack, side="right")) - 1
            return self.values[min(k, len(ts) - 1)].copy()
        if t >= ts[-1]:
            return self.values[-1].copy()
        k = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]


@dataclass(frozen=True)
class SystemModel:
    """Continuous-time system with a uniform diffusion bound ``sigma``.

    Any state feedback is assumed to be folded into ``drift`` already.
    ``diffusion`` is optional; when absent simulation uses ``sigma * I``,
    which is the worst case allowed by the bound.
    """

    state_dim: int
    drift: Drift
    sigma: float
    input: InputSignal = field(default_factory=InputSignal.empty)
    jacobian: Optional[Jacobian] = None
    input_jacobian: Optional[Jacobian] = None
    diffusion: Optional[Diffusion] = None
    name: str = "custom"

    def __post_init__(self):
        if self.state_dim < 1:
            raise ModelError("state_dim must be positive")
        if not self.sigma >= 0:
            raise ModelError(f"sigma must be non-negative, got {self.sigma}")

    @property
    def input_dim(self) -> int:
        return self.input.dim

    def diffusion_matrix(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.diffusion is None:
            return self.sigma * np.eye(self.state_dim)
        g = np.asarray(self.diffusion(x, t), dtype=float)
        # the bounds only see sigma, so a larger diffusion would void them
        if np.any(np.linalg.norm(g, 2, axis=(-2, -1)) > self.sigma * (1 + 1e-9)):
            raise ModelEvaluationError(f"diffusion spectral norm exceeds sigma={self.sigma:g} at t={t:g}")
        return g


def _check_finite(value: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        bad = np.argwhere(~np.isfinite(value))[0]
        comp = int(bad[-1]) if value.ndim else 0
        raise ModelEvaluationError(f"{what} is not finite (component {comp})")
    return value


def eval_drift(model: SystemModel, x, t: float) -> np.ndarray:
    """Return ``f(x, u(t), t)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.state_dim:
        raise ModelError(f"state has dimension {x.shape[-1]}, model expects {model.state_dim}")
    out = np.asarray(model.drift(x, model.input(t), t), dtype=float)
    return _check_finite(out, "drift")


def finite_difference_jacobian(fun, x: np.ndarray, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vectorized map ``fun(x) -> (..., m)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def eval_jacobian(model: SystemModel, x, t: float, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """State Jacobian ``df/dx`` at ``(x, u(t), t)``.

    The analytic Jacobian is used when the model provides one; otherwise a
    central difference with step ``h``.
    """
    x = np.asarray(x, dtype=float)
    u = model.input(t)
    if model.jacobian is not None:
        jac = np.asarray(model.jacobian(x, u, t), dtype=float)
    else:
        if h <= 0:
            raise ModelError("finite-difference step must be positive")
        jac = finite_difference_jacobian(lambda z: model.drift(z, u, t), x, h)
    return _check_finite(jac, "jacobian")


def eval_input_jacobian(model: SystemModel, x, u, t: float, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Input Jacobian ``df/du`` at ``(x, u, t)``, shape ``(..., n, p)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if model.input_jacobian is not None:
        jac = np.asarray(model.input_jacobian(x, u, t), dtype=float)
    else:
        jac = finite_difference_jacobian(lambda v: model.drift(x, v, t), u, h)
    return _check_finite(jac, "input jacobian")


# -- builtin systems ---------------------------------------------------------


def _matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    # einsum keeps per-row arithmetic identical for any batch size
    return np.einsum("ij,...j->...i", A, x)


def linear_model(A, B=None, sigma: float = 0.0, input: InputSignal | None = None,
                 name: str = "linear") -> SystemModel:
    """Time-invariant ``dX = (A X + B u) dt + sigma dW``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if B is None:
        B = np.zeros((n, 0))
    B = np.asarray(B, dtype=float).reshape(n, -1)
    if input is None:
        input = InputSignal.constant(np.zeros(B.shape[1])) if B.shape[1] else InputSignal.empty()

    def drift(x, u, t):
        out = _matvec(A, x)
        if B.shape[1]:
            out = out + _matvec(B, u)
        return out

    def jac(x, u, t):
        return np.broadcast_to(A, x.shape[:-1] + (n, n)).copy()

    def ujac(x, u, t):
        return np.broadcast_to(B, x.shape[:-1] + B.shape).copy()

    return SystemModel(n, drift, float(sigma), input, jac, ujac, name=name)


def ou_model(c: float = -1.0, sigma: float = 1.0) -> SystemModel:
    """Scalar Ornstein-Uhlenbeck process ``dX = c X dt + sigma dW``."""
    return linear_model([[c]], sigma=sigma, name="ou")


def ltv_decay_model(base: float = -1.0, amp: float = 0.5, sigma: float = 0.5,
                    rot: float = 2.0) -> SystemModel:
    """2-state LTV system ``A_t = (base - amp sin t) I + rot [[0, 1], [-1, 0]]``.

    The skew part does not change the symmetric part, so with ``M = I`` the
    contraction rate is exactly ``base - amp sin t``.
    """
    S = np.array([[0.0, rot], [-rot, 0.0]])
    I = np.eye(2)

    def A(t):
        return (base - amp * np.sin(t)) * I + S

    def drift(x, u, t):
        return _matvec(A(t), x)

    def jac(x, u, t):
        return np.broadcast_to(A(t), x.shape[:-1] + (2, 2)).copy()

    return SystemModel(2, drift, float(sigma), InputSignal.empty(), jac, name="ltv_decay")


PVTOL_DEFAULTS = {"m": 0.486, "J": 0.00383, "l": 0.25, "g": 9.81}


def pvtol_model(m: float = 0.486, J: float = 0.00383, l: float = 0.25, g: float = 9.81,
                sigma: float = 0.1, input: InputSignal | None = None) -> SystemModel:
    """Planar VTOL with body-frame velocities.

    State ``(p_x, p_z, phi, v_x, v_z, omega)``, inputs are the two rotor
    thrusts ``(u1, u2)``. Without an explicit input signal the model hovers.
    """
    if input is None:
        input = InputSignal.constant([m * g / 2.0, m * g / 2.0])

    def drift(x, u, t):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        phi, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        u1, u2 = u[..., 0], u[..., 1]
        c, s = np.cos(phi), np.sin(phi)
        return np.stack([
            vx * c - vz * s,
            vx * s + vz * c,
            om,
            vz * om - g * s,
            -vx * om - g * c + (u1 + u2) / m,
            l * (u1 - u2) / J * np.ones_like(phi),
        ], axis=-1)

    def jac(x, u, t):
        x = np.asarray(x, dtype=float)
        phi, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        c, s = np.cos(phi), np.sin(phi)
        out = np.zeros(x.shape[:-1] + (6, 6))
        out[..., 0, 2] = -vx * s - vz * c
        out[..., 0, 3] = c
        out[..., 0, 4] = -s
        out[..., 1, 2] = vx * c - vz * s
        out[..., 1, 3] = s
        out[..., 1, 4] = c
        out[..., 2, 5] = 1.0
        out[..., 3, 2] = -g * c
        out[..., 3, 4] = om
        out[..., 3, 5] = vz
        out[..., 4, 2] = g * s
        out[..., 4, 3] = -om
        out[..., 4, 5] = -vx
        return out

    Bu = np.zeros((6, 2))
    Bu[4] = [1.0 / m, 1.0 / m]
    Bu[5] = [l / J, -l / J]

    def ujac(x, u, t):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(Bu, x.shape[:-1] + (6, 2)).copy()

    return SystemModel(6, drift, float(sigma), input, jac, ujac, name="pvtol")


_BUILTINS = {
    "ou": (ou_model, ("c", "sigma")),
    "ltv_decay": (ltv_decay_model, ("base", "amp", "sigma")),
    "pvtol": (pvtol_model, ("sigma",)),
}
_OPTIONAL = {"ltv_decay": ("rot",), "pvtol": ("m", "J", "l", "g"), "ou": ()}


def builtin(name: str, params: Mapping[str, float] | None = None) -> SystemModel:
    """Construct a builtin benchmark system by name."""
    if name not in _BUILTINS:
        raise ModelError(f"unknown builtin system {name!r}; choose from {sorted(_BUILTINS)}")
    params = dict(params or {})
    factory, required = _BUILTINS[name]
    missing = [k for k in required if k not in params]
    if missing:
        raise ModelError(f"missing parameter(s) for {name}: {', '.join(missing)}")
    unknown = set(params) - set(required) - set(_OPTIONAL[name])
    if unknown:
        raise ModelError(f"unknown parameter(s) for {name}: {', '.join(sorted(unknown))}")
    return factory(**{k: float(v) for k, v in params.items()})
