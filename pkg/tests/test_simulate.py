import math

import numpy as np
import pytest
from scipy.integrate import quad

from stochtube.simulate import (
    DivergenceError,
    batch_rollouts,
    derive_seed,
    integrate_deterministic,
    integrate_sde,
    iter_rollouts,
    rollout_associated_pair,
    time_grid,
    write_trajectories_csv,
)
from stochtube.systems import ModelEvaluationError, SystemModel, builtin, ltv_decay_model, ou_model
from stochtube._csv import read_rows


def test_time_grid():
    g = time_grid(1.0, 0.25)
    assert g.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        time_grid(1.0, 0.3)
    with pytest.raises(ValueError):
        time_grid(0.01, 0.1)


def test_rk4_ou_closed_form():
    traj = integrate_deterministic(ou_model(-1.0, 1.0), [1.0], 1.0, 1e-3)
    assert traj.states[-1, 0] == pytest.approx(math.exp(-1), abs=1e-9)
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0


def test_rk4_fourth_order():
    m = ou_model(-2.0, 0.0)
    errs = [abs(integrate_deterministic(m, [1.0], 1.0, h).states[-1, 0] - math.exp(-2)) for h in (0.1, 0.05)]
    assert 14 < errs[0] / errs[1] < 18


def test_zero_drift_is_constant():
    m = SystemModel(3, lambda x, u, t: np.zeros_like(x), 0.0)
    traj = integrate_deterministic(m, [1.0, -2.0, 3.0], 0.5, 0.01)
    assert np.all(traj.states == np.array([1.0, -2.0, 3.0]))


def test_ltv_contracts_at_least_exponentially():
    m = ltv_decay_model(-1.0, 0.5, 0.5)
    T = 10.0
    traj = integrate_deterministic(m, [1.0, 0.0], T, 1e-3)
    psi_T = quad(lambda s: -1 - 0.5 * math.sin(s), 0, T)[0]
    assert np.linalg.norm(traj.states[-1]) <= math.exp(psi_T) * (1 + 1e-6)
    # with a skew part the norm follows the symmetric part exactly
    assert np.linalg.norm(traj.states[-1]) == pytest.approx(math.exp(psi_T), rel=1e-8)


def test_sde_determinism():
    m = builtin("ltv_decay", {"base": -1, "amp": 0.5, "sigma": 0.5})
    a = integrate_sde(m, [1.0, 1.0], 1.0, 1e-2, 42)
    b = integrate_sde(m, [1.0, 1.0], 1.0, 1e-2, 42)
    c = integrate_sde(m, [1.0, 1.0], 1.0, 1e-2, 43)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)
    assert a.seed == 42 and a.kind == "stochastic"


def test_sigma_zero_matches_euler_and_rk4():
    m = ou_model(-1.0, 0.0)
    for dt, tol in ((1e-2, 1e-2), (1e-3, 1e-3)):
        det, sto = rollout_associated_pair(m, [1.0], 1.0, dt, 5)
        euler = (1 - dt) ** np.arange(len(det.times))
        assert np.allclose(sto.states[:, 0], euler, rtol=1e-12)
        assert np.abs(det.states - sto.states).max() < tol


def test_ou_stationary_variance():
    m = ou_model(-1.0, 1.0)
    finals = np.concatenate([X[:, -1, 0] for _, X in iter_rollouts(m, [0.0], 5.0, 1e-3, 11, 100_000)])
    assert finals.var(ddof=1) == pytest.approx(0.5, abs=0.01)
    assert abs(finals.mean()) < 0.01


def test_chunking_and_workers_do_not_change_paths():
    m = builtin("ltv_decay", {"base": -1, "amp": 0.5, "sigma": 0.5})
    a = np.concatenate([X for _, X in iter_rollouts(m, [1.0, 0.0], 0.5, 1e-2, 9, 70, chunk_size=16)])
    b = np.concatenate([X for _, X in iter_rollouts(m, [1.0, 0.0], 0.5, 1e-2, 9, 70, workers=3, chunk_size=7)])
    c = np.stack([integrate_sde(m, [1.0, 0.0], 0.5, 1e-2, derive_seed(9, i)).states for i in range(70)])
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_derive_seed_distinct():
    seeds = {derive_seed(1, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(1, 0) != derive_seed(2, 0)
    assert all(0 <= s < 2**64 for s in seeds)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_reports_step():
    m = SystemModel(1, lambda x, u, t: x ** 3, 0.0)
    with pytest.raises(DivergenceError) as info:
        integrate_deterministic(m, [10.0], 1.0, 0.1)
    assert info.value.step >= 1
    with pytest.raises(DivergenceError):
        integrate_sde(m, [10.0], 1.0, 0.1, 0)


def _zero_drift(x, u, t):
    return np.zeros_like(x)


def test_custom_diffusion_used():
    G = np.array([[0.0], [1.0]])
    m = SystemModel(2, _zero_drift, 1.0, diffusion=lambda x, t: np.broadcast_to(G, x.shape[:-1] + G.shape))
    X = integrate_sde(m, [0.0, 0.0], 1.0, 0.01, 3).states
    assert np.all(X[:, 0] == 0.0) and np.any(X[:, 1] != 0.0)


def test_diffusion_above_sigma_rejected():
    m = SystemModel(1, _zero_drift, 0.5, diffusion=lambda x, t: np.ones(x.shape[:-1] + (1, 1)))
    with pytest.raises(ModelEvaluationError, match="exceeds sigma"):
        integrate_sde(m, [0.0], 0.1, 0.01, 0)


def test_trajectory_csv(tmp_path):
    m = ou_model(-1.0, 1.0)
    paths = batch_rollouts(m, [1.0], 0.02, 0.01, 3, 2)
    write_trajectories_csv(tmp_path / "t.csv", paths)
    header, rows = read_rows(tmp_path / "t.csv")
    assert header == ["t", "x_1", "kind", "seed"]
    assert len(rows) == 6
    assert rows[0][2] == "stochastic" and int(rows[0][3]) == derive_seed(3, 0)
