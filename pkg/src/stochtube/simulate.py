"""Deterministic (RK4) and stochastic (Euler-Maruyama) integration.

Every stochastic path owns a Philox stream keyed on a 64-bit seed; batch
seeds are derived from ``(master_seed, index)`` so the output does not
depend on chunking or on the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .systems import SystemModel
from ._csv import write_rows

CHUNK_SIZE = 256


class SimulationError(RuntimeError):
    pass


class DivergenceError(SimulationError):
    def __init__(self, message: str, step: int, paths: Sequence[int] = ()):
        super().__init__(message)
        self.step = step
        self.paths = list(paths)


@dataclass(frozen=True)
class TrajectoryGrid:
    times: np.ndarray
    states: np.ndarray
    kind: str = "deterministic"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.states.shape[0] != len(self.times):
            raise ValueError("states and times disagree in length")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def time_grid(T: float, dt: float) -> np.ndarray:
    """Uniform grid ``0, dt, ..., T``; ``T`` must be a multiple of ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if T < dt * (1 - 1e-12):
        raise ValueError("horizon T must be at least dt")
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return np.linspace(0.0, T, K + 1)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-trajectory 64-bit seed from the master seed and path index."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def integrate_deterministic(model: SystemModel, x0, T: float, dt: float) -> TrajectoryGrid:
    """Classical RK4 on a uniform grid.

    Held inputs are applied over ``[t_k, t_{k+1})``, so the last stage of a
    step uses the left limit of the input signal.
    """
    times = time_grid(T, dt)
    x = np.asarray(x0, dtype=float).reshape(model.state_dim)
    out = np.empty((len(times), model.state_dim))
    out[0] = x
    for k in range(len(times) - 1):
        t = times[k]
        h = times[k + 1] - t
        k1 = model.drift(x, model.input(t), t)
        k2 = model.drift(x + 0.5 * h * k1, model.input(t + 0.5 * h), t + 0.5 * h)
        k3 = model.drift(x + 0.5 * h * k2, model.input(t + 0.5 * h), t + 0.5 * h)
        k4 = model.drift(x + h * k3, model.input(t + h, left=True), t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"deterministic state diverged at step {k + 1}", k + 1)
        out[k + 1] = x
    return TrajectoryGrid(times, out, "deterministic")


def _noise_dim(model: SystemModel, x0: np.ndarray) -> int:
    if model.diffusion is None:
        return model.state_dim
    return model.diffusion_matrix(x0, 0.0).shape[-1]


def _euler_maruyama(model: SystemModel, x0: np.ndarray, times: np.ndarray,
                    seeds: Sequence[int]) -> np.ndarray:
    """Euler-Maruyama for a block of paths; returns ``(len(seeds), K+1, n)``."""
    K = len(times) - 1
    n = model.state_dim
    m = _noise_dim(model, x0)
    noise = np.stack([_rng(s).standard_normal((K, m)) for s in seeds])
    X = np.broadcast_to(x0, (len(seeds), n)).copy()
    out = np.empty((len(seeds), K + 1, n))
    out[:, 0] = X
    for k in range(K):
        t = times[k]
        h = times[k + 1] - t
        f = model.drift(X, model.input(t), t)
        if model.diffusion is None:
            dW = model.sigma * np.sqrt(h) * noise[:, k]
        else:
            g = model.diffusion_matrix(X, t)
            dW = np.sqrt(h) * np.einsum("...ij,...j->...i", g, noise[:, k])
        X = X + f * h + dW
        if not np.all(np.isfinite(X)):
            bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
            raise DivergenceError(f"stochastic state diverged at step {k + 1}", k + 1, bad)
        out[:, k + 1] = X
    return out


def integrate_sde(model: SystemModel, x0, T: float, dt: float, seed: int) -> TrajectoryGrid:
    """One Euler-Maruyama path ``X_{k+1} = X_k + f dt + g sqrt(dt) z_k``."""
    times = time_grid(T, dt)
    x0 = np.asarray(x0, dtype=float).reshape(model.state_dim)
    states = _euler_maruyama(model, x0, times, [seed])[0]
    return TrajectoryGrid(times, states, "stochastic", int(seed))


def rollout_associated_pair(model: SystemModel, x0, T: float, dt: float, seed: int):
    """Deterministic and stochastic paths sharing ``x0`` and the input signal."""
    return integrate_deterministic(model, x0, T, dt), integrate_sde(model, x0, T, dt, seed)


def iter_rollouts(model: SystemModel, x0, T: float, dt: float, master_seed: int, N: int,
                  workers: int = 1, chunk_size: int = CHUNK_SIZE) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(indices, states)`` blocks of stochastic rollouts in index order.

    Memory stays bounded by ``chunk_size`` paths (times ``workers``).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    times = time_grid(T, dt)
    x0 = np.asarray(x0, dtype=float).reshape(model.state_dim)
    blocks = [np.arange(s, min(s + chunk_size, N)) for s in range(0, N, chunk_size)]

    def run(idx):
        seeds = [derive_seed(master_seed, i) for i in idx]
        try:
            return _euler_maruyama(model, x0, times, seeds)
        except DivergenceError as exc:
            exc.paths = [int(idx[p]) for p in exc.paths]
            raise DivergenceError(f"{exc} (paths {exc.paths[:10]})", exc.step, exc.paths) from None

    if workers <= 1:
        for idx in blocks:
            yield idx, run(idx)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(blocks), workers):
            group = blocks[start:start + workers]
            for idx, states in zip(group, pool.map(run, group)):
                yield idx, states


def batch_rollouts(model: SystemModel, x0, T: float, dt: float, master_seed: int, N: int,
                   workers: int = 1) -> list[TrajectoryGrid]:
    """``N`` stochastic paths; path ``i`` uses ``derive_seed(master_seed, i)``."""
    times = time_grid(T, dt)
    out = []
    for idx, states in iter_rollouts(model, x0, T, dt, master_seed, N, workers):
        for i, s in zip(idx, states):
            out.append(TrajectoryGrid(times, s, "stochastic", derive_seed(master_seed, i)))
    return out


def write_trajectories_csv(path, grids: Sequence[TrajectoryGrid]) -> None:
    """CSV with columns ``t, x_1..x_n, kind, seed``."""
    if not grids:
        raise ValueError("nothing to write")
    n = grids[0].dim
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + ["kind", "seed"]
    rows = []
    for g in grids:
        seed = "" if g.seed is None else str(g.seed)
        for t, x in zip(g.times, g.states):
            rows.append([t, *x, g.kind, seed])
    write_rows(path, header, rows)
