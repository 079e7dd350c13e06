import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import solve_continuous_are

from stochtube.contraction import (
    Box,
    CertificateError,
    LqrSpec,
    MetricSchedule,
    close_loop,
    estimate_rate_schedule,
    pointwise_rate,
    riccati_tvlqr,
    verify_lmi,
)
from stochtube.simulate import TrajectoryGrid, integrate_deterministic, time_grid
from stochtube.systems import eval_jacobian, finite_difference_jacobian, linear_model, ltv_decay_model, pvtol_model


def rest_reference(n, T, dt):
    t = time_grid(T, dt)
    return TrajectoryGrid(t, np.zeros((len(t), n)))


class TestPointwiseRate:
    def test_symmetric_case(self):
        assert pointwise_rate(-np.eye(3), np.eye(3), np.zeros((3, 3))) == pytest.approx(-1.0)

    def test_skew_jacobian(self):
        J = np.array([[0.0, 2.0], [-2.0, -2.0]])
        assert pointwise_rate(J, np.eye(2), np.zeros((2, 2))) == pytest.approx(0.0, abs=1e-14)

    def test_matches_dense_generalized_eigensolver(self):
        from scipy.linalg import eigh
        rng = np.random.default_rng(0)
        for _ in range(20):
            J = rng.normal(size=(4, 4))
            A = rng.normal(size=(4, 4))
            M = A @ A.T + np.eye(4)
            D = rng.normal(size=(4, 4))
            D = D + D.T
            S = J.T @ M + M @ J + D
            ref = 0.5 * eigh(S, M, eigvals_only=True)[-1]
            assert pointwise_rate(J, M, D) == pytest.approx(ref, rel=1e-10, abs=1e-12)

    def test_rate_satisfies_lmi_tightly(self):
        rng = np.random.default_rng(5)
        J = rng.normal(size=(3, 3))
        M = np.diag([1.0, 2.0, 5.0])
        c = pointwise_rate(J, M, np.zeros((3, 3)))
        w = np.linalg.eigvalsh(J.T @ M + M @ J - 2 * c * M)
        assert w[-1] == pytest.approx(0.0, abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(J=arrays(float, (3, 3), elements=st.floats(-5, 5)), alpha=st.floats(1e-3, 1e3),
           d=arrays(float, 3, elements=st.floats(0.2, 5)))
    def test_scale_invariance(self, J, alpha, d):
        M = np.diag(d)
        a = pointwise_rate(J, M, np.zeros((3, 3)))
        b = pointwise_rate(J, alpha * M, np.zeros((3, 3)))
        assert b == pytest.approx(a, rel=1e-10, abs=1e-10)

    def test_not_spd(self):
        with pytest.raises(CertificateError):
            pointwise_rate(np.eye(2), np.diag([1.0, -1.0]), np.zeros((2, 2)))


class TestRiccati:
    def double_integrator(self, T):
        m = linear_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
        spec = LqrSpec(np.eye(2), np.eye(1), np.eye(2), rest_reference(2, T, 0.01))
        return riccati_tvlqr(m, spec)

    def test_double_integrator_care(self):
        sched, gains = self.double_integrator(10.0)
        s3 = math.sqrt(3)
        P_care = np.array([[s3, 1.0], [1.0, s3]])
        assert np.allclose(P_care, solve_continuous_are(np.array([[0, 1], [0, 0.0]]),
                                                        np.array([[0], [1.0]]), np.eye(2), np.eye(1)))
        assert np.abs(sched.metrics[0] - P_care).max() < 1e-4
        assert np.abs(gains.gains[0] - np.array([[1.0, s3]])).max() < 1e-4

    def test_scalar(self):
        m = linear_model([[0.0]], [[1.0]])
        sched, gains = riccati_tvlqr(m, LqrSpec([[1.0]], [[1.0]], [[3.0]], rest_reference(1, 10.0, 0.01)))
        assert sched.metrics[0, 0, 0] == pytest.approx(1.0, abs=1e-6)
        assert gains.gains[0, 0, 0] == pytest.approx(1.0, abs=1e-6)
        # closed-form p(t) = coth-type solution from p(T) = 3
        tau = 10.0 - sched.times
        k = (3 - 1) / (3 + 1)
        exact = (1 + k * np.exp(-2 * tau)) / (1 - k * np.exp(-2 * tau))
        assert np.abs(sched.metrics[:, 0, 0] - exact).max() < 1e-7

    def test_terminal_condition_exact(self):
        m = linear_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
        PT = np.array([[2.0, 0.3], [0.3, 1.0]])
        sched, _ = riccati_tvlqr(m, LqrSpec(np.eye(2), np.eye(1), PT, rest_reference(2, 1.0, 0.01)))
        assert np.array_equal(sched.metrics[-1], PT)

    def test_convergence_monotone_in_horizon(self):
        s3 = math.sqrt(3)
        P_care = np.array([[s3, 1.0], [1.0, s3]])
        errs = [np.abs(self.double_integrator(T)[0].metrics[0] - P_care).max() for T in (2.0, 5.0, 10.0)]
        assert errs[0] > errs[1] > errs[2]

    def test_metric_dots_match_finite_differences(self):
        sched, _ = self.double_integrator(3.0)
        fd = np.gradient(sched.metrics, sched.times, axis=0)
        assert np.abs(fd[5:-5] - sched.metric_dots[5:-5]).max() < 1e-3

    def test_nominal_rates_negative_for_lti(self):
        sched, _ = self.double_integrator(10.0)
        assert np.all(sched.rates < 0)

    def test_dimension_mismatch(self):
        m = linear_model([[0.0]], [[1.0]])
        with pytest.raises(ValueError):
            riccati_tvlqr(m, LqrSpec(np.eye(2), np.eye(1), np.eye(2), rest_reference(2, 1.0, 0.1)))


def test_close_loop_jacobian():
    m = linear_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
    sched, gains = riccati_tvlqr(m, LqrSpec(np.eye(2), np.eye(1), np.eye(2), rest_reference(2, 2.0, 0.01)))
    cl = close_loop(m, gains)
    x = np.array([0.3, -0.2])
    J = eval_jacobian(cl, x, 0.5)
    fd = finite_difference_jacobian(lambda z: cl.drift(z, cl.input(0.5), 0.5), x)
    assert np.abs(J - fd).max() < 1e-8


def test_close_loop_pvtol_nonlinear_jacobian():
    m = pvtol_model()
    ref = integrate_deterministic(m, np.zeros(6), 1.0, 0.01)
    P_T = np.eye(6)
    _, gains = riccati_tvlqr(m, LqrSpec(np.eye(6), np.eye(2), P_T, ref))
    cl = close_loop(m, gains)
    x = np.array([0.1, -0.1, 0.2, 0.3, -0.2, 0.5])
    fd = finite_difference_jacobian(lambda z: cl.drift(z, cl.input(0.3), 0.3), x)
    assert np.abs(eval_jacobian(cl, x, 0.3) - fd).max() < 1e-5


class TestRateEstimation:
    def test_ltv_identity_metric(self):
        m = ltv_decay_model(-1.0, 0.5, 0.5)
        t = time_grid(10.0, 0.01)
        sched = MetricSchedule.constant(t, np.eye(2), 0.5)
        est = estimate_rate_schedule(m, sched, Box.symmetric([1.0, 1.0], relative=False), 8, 0)
        assert np.abs(est.rates - (-1 - 0.5 * np.sin(t))).max() < 1e-9

    def test_linear_is_sample_independent(self):
        A = np.array([[-1.0, 3.0], [0.0, -2.0]])
        m = linear_model(A)
        t = time_grid(1.0, 0.1)
        M = np.array([[2.0, 0.5], [0.5, 1.0]])
        sched = MetricSchedule.constant(t, M, 1.0)
        ref = pointwise_rate(A, M, np.zeros((2, 2)))
        for samples in (1, 5, 50):
            est = estimate_rate_schedule(m, sched, Box.symmetric([3.0, 3.0], relative=False), samples, 4)
            assert np.allclose(est.rates, ref, atol=1e-12)

    def test_more_samples_never_decrease(self):
        m = pvtol_model()
        ref = integrate_deterministic(m, np.zeros(6), 0.2, 0.01)
        sched = MetricSchedule.constant(ref.times, np.diag([1, 1, 0.5, 1, 1, 0.2]), 0.1)
        region = Box.symmetric([0.5] * 6)
        prev = None
        for samples in (4, 8, 16, 32):
            r = estimate_rate_schedule(m, sched, region, samples, 3, center=ref, vertices=False).rates
            if prev is not None:
                assert np.all(r >= prev)
            prev = r

    def test_vertices_included(self):
        # the rate of this system peaks at the box corners
        m = pvtol_model()
        ref = integrate_deterministic(m, np.zeros(6), 0.05, 0.01)
        sched = MetricSchedule.constant(ref.times, np.eye(6), 0.1)
        region = Box.symmetric([0.3, 0.3, 0.3, 1.0, 1.0, 2.0])
        with_v = estimate_rate_schedule(m, sched, region, 4, 0, center=ref).rates
        without = estimate_rate_schedule(m, sched, region, 4, 0, center=ref, vertices=False).rates
        assert np.all(with_v >= without)
        assert len(region.vertices()) == 64
        assert est_info_points(m, sched, region, ref) == 4 + 64

    def test_relative_region_needs_center(self):
        m = ltv_decay_model()
        sched = MetricSchedule.constant(time_grid(1.0, 0.1), np.eye(2), 0.5)
        with pytest.raises(ValueError):
            estimate_rate_schedule(m, sched, Box.symmetric([1.0, 1.0]), 4, 0)


def est_info_points(m, sched, region, ref):
    return estimate_rate_schedule(m, sched, region, 4, 0, center=ref).info["rate_points"]


class TestVerifyLmi:
    def setup_method(self):
        self.model = pvtol_model()
        self.ref = integrate_deterministic(self.model, np.zeros(6), 0.3, 0.01)
        M = np.diag([2.0, 2.0, 0.5, 1.0, 1.0, 0.3])
        self.sched = MetricSchedule.constant(self.ref.times, M, 0.1)
        self.region = Box.symmetric([0.2] * 6)

    def test_same_samples_pass(self):
        est = estimate_rate_schedule(self.model, self.sched, self.region, 16, 9, center=self.ref)
        rep = verify_lmi(self.model, est, self.region, 16, 1e-8, 9, center=self.ref)
        assert rep.passed and rep.worst_margin <= 1e-8

    def test_shifted_rates_violate_by_two_shifts(self):
        m = ltv_decay_model(-1.0, 0.5, 0.5)
        t = time_grid(2.0, 0.1)
        sched = MetricSchedule.constant(t, np.eye(2), 0.5, rates=-1 - 0.5 * np.sin(t) - 0.1)
        rep = verify_lmi(m, sched, Box.symmetric([1.0, 1.0], relative=False), 4, 1e-8, 0)
        assert not rep.passed
        assert rep.worst_margin == pytest.approx(0.2, abs=1e-9)
        assert len(rep.violations) == len(t) * (4 + 4)

    def test_empty_sample_set(self):
        rep = verify_lmi(self.model, self.sched, self.region, 0, 1e-8, 0, center=self.ref)
        assert rep.passed and rep.note == "no samples"
        assert "no samples" in rep.summary()


class TestMetricSchedule:
    def test_derived_fields(self):
        t = np.linspace(0, 1, 5)
        M = np.stack([np.diag([1.0 + s, 4.0]) for s in t])
        sched = MetricSchedule.from_metrics(t, M, 0.5)
        assert np.allclose(sched.m_bar, 4.0)
        assert np.allclose(sched.sigma_bar, 1.0)
        # linear entries: differences are exact everywhere, ends included
        assert np.allclose(sched.metric_dots[:, 0, 0], 1.0)

    def test_rejects_non_spd_and_ill_conditioned(self):
        t = np.linspace(0, 1, 3)
        with pytest.raises(CertificateError):
            MetricSchedule.constant(t, np.diag([1.0, -1.0]), 1.0)
        with pytest.raises(CertificateError, match="condition"):
            MetricSchedule.constant(t, np.diag([1.0, 1e-13]), 1.0)
        with pytest.raises(CertificateError):
            MetricSchedule.constant(t, np.array([[1.0, 2.0], [0.0, 1.0]]), 1.0)

    def test_interpolation_and_resample(self):
        t = np.array([0.0, 1.0])
        M = np.stack([np.eye(2), 3 * np.eye(2)])
        sched = MetricSchedule.from_metrics(t, M, 1.0)
        assert np.allclose(sched.metric_at(0.25), 1.5 * np.eye(2))
        r = sched.resample([0.0, 0.5, 1.0])
        assert np.allclose(r.metrics[1], 2 * np.eye(2))
        assert np.allclose(r.sigma_bar, np.sqrt([1.0, 2.0, 3.0]))

    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        t = np.linspace(0, 1, 6)
        A = rng.normal(size=(6, 3, 3))
        M = A @ np.swapaxes(A, 1, 2) + np.eye(3)
        sched = MetricSchedule.from_metrics(t, M, 0.7, rates=-np.linspace(1, 2, 6))
        sched.to_csv_bundle(tmp_path)
        back = MetricSchedule.from_csv_bundle(tmp_path, 0.7)
        assert np.allclose(back.metrics, sched.metrics, rtol=1e-11)
        assert np.allclose(back.metric_dots, sched.metric_dots, rtol=1e-10, atol=1e-10)
        assert np.allclose(back.rates, sched.rates)
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("t,m_11,m_12,m_13,m_21")
