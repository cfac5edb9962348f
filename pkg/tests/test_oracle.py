"""Tests for the finite-difference and enumeration reference oracles."""

import time

import numpy as np
import pytest

from hessopt import optim
from hessopt import problems as pr
from hessopt.oracle import (
    all_sign_vectors,
    descent_slack,
    exact_hutchinson_expectation,
    fd_gradient,
    fd_hessian,
    fd_hvp,
    hutchinson_enumerate,
    reference_descent_check,
    run_verification_suite,
)


class TestFiniteDifferences:
    def test_fd_gradient_on_quadratic(self):
        p = pr.make_fig1_quadratic()
        theta = np.array([1.0, 1.0])
        np.testing.assert_allclose(
            fd_gradient(p, theta), p.analytic_gradient(theta), rtol=1e-7, atol=1e-8
        )

    def test_fd_gradient_on_logistic_regression(self):
        p = pr.make_logreg()
        rng = np.random.default_rng(0)
        theta = 0.2 * rng.normal(size=p.dim)
        np.testing.assert_allclose(
            fd_gradient(p, theta), p.analytic_gradient(theta), rtol=1e-6, atol=1e-7
        )

    def test_fd_hvp_on_quadratic_is_near_exact(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        p = pr.QuadraticProblem(A, np.zeros(2), name="q")
        z = np.array([0.3, -0.7])
        np.testing.assert_allclose(
            fd_hvp(p, np.ones(2), z), A @ z, rtol=1e-9, atol=1e-9
        )

    def test_fd_hvp_zero_direction_returns_zero(self):
        p = pr.make_fig1_quadratic()
        np.testing.assert_array_equal(fd_hvp(p, np.ones(2), np.zeros(2)), np.zeros(2))

    def test_fd_hessian_recovers_quadratic_matrix(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        p = pr.QuadraticProblem(A, np.zeros(2), name="q")
        dense = fd_hessian(p, np.array([0.5, -0.5]))
        np.testing.assert_allclose(dense.H, A, atol=1e-8)
        assert dense.asymmetry < 1e-8
        np.testing.assert_allclose(dense.diagonal(), [2.0, 3.0], atol=1e-8)

    def test_fd_hessian_on_noisy_parabola_second_derivative(self):
        # truncation error at step h is ~(h^2/6) f'''' = (h^2/6) 0.4 (20 pi)^3,
        # so h=1e-4 can only promise ~1.7e-4; halving h buys back the 1e-4 goal
        p = pr.make_noisy_parabola()
        want = 2.0 + 4.0 * np.pi
        got_coarse = fd_hessian(p, np.zeros(1), h=1e-4).H[0, 0]
        assert abs(got_coarse - want) < 2e-4
        got_fine = fd_hessian(p, np.zeros(1), h=5e-5).H[0, 0]
        assert abs(got_fine - want) < 1e-4

    def test_fd_hessian_is_nearly_symmetric_on_smooth_problem(self):
        p = pr.make_logreg()
        rng = np.random.default_rng(1)
        dense = fd_hessian(p, 0.1 * rng.normal(size=p.dim))
        assert dense.asymmetry < 1e-6

    def test_fd_hessian_matches_analytic_logistic_hessian(self):
        p = pr.make_logreg()
        rng = np.random.default_rng(2)
        theta = 0.1 * rng.normal(size=p.dim)
        dense = fd_hessian(p, theta)
        np.testing.assert_allclose(dense.H, p.analytic_hessian(theta), atol=1e-5)

    def test_fd_hessian_rejects_large_dimension(self):
        p = pr.QuadraticProblem(np.eye(64), np.zeros(64), name="big")

        class Wide:
            dim = 65

        with pytest.raises(ValueError):
            fd_hessian(p, np.zeros(65))
        assert p.dim == 64  # d=64 itself is allowed


class TestSignEnumeration:
    def test_all_sign_vectors_shape_and_uniqueness(self):
        Z = all_sign_vectors(4)
        assert Z.shape == (16, 4)
        assert set(np.unique(Z)) == {-1.0, 1.0}
        assert len({tuple(row) for row in Z}) == 16

    def test_enumeration_limited_to_twelve_dimensions(self):
        with pytest.raises(ValueError):
            all_sign_vectors(13)

    def test_expectation_equals_diagonal_on_hand_matrix(self):
        H = np.array([[2.0, 1.0], [1.0, 3.0]])
        np.testing.assert_allclose(exact_hutchinson_expectation(H), [2.0, 3.0], atol=1e-15)

    def test_expectation_on_zero_matrix_is_zero(self):
        np.testing.assert_array_equal(exact_hutchinson_expectation(np.zeros((3, 3))), np.zeros(3))

    def test_enumerate_through_hvp_matches_direct_expectation(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            d = int(rng.integers(2, 9))
            M = rng.normal(size=(d, d))
            H = 0.5 * (M + M.T)
            got = hutchinson_enumerate(lambda z: H @ z, d)
            np.testing.assert_allclose(got, np.diag(H), atol=1e-12)

    def test_enumerate_through_autodiff_tape(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        p = pr.QuadraticProblem(A, np.zeros(2), name="q")
        hvp = p.hvp_operator(np.zeros(2), None)
        np.testing.assert_allclose(hutchinson_enumerate(hvp, 2), [2.0, 3.0], atol=1e-12)

    def test_twelve_dimensional_enumeration_is_fast(self):
        rng = np.random.default_rng(4)
        M = rng.normal(size=(12, 12))
        H = 0.5 * (M + M.T)
        start = time.perf_counter()
        got = hutchinson_enumerate(lambda z: H @ z, 12)
        elapsed = time.perf_counter() - start
        np.testing.assert_allclose(got, np.diag(H), atol=1e-12)
        assert elapsed < 10.0


class TestDescentInequality:
    def test_fig1_quadratic_full_newton_step(self):
        q = pr.make_fig1_quadratic()
        w = np.array([1.0, 1.0])
        assert reference_descent_check(q, w, k=1.0, mode="full")
        slack = descent_slack(q, w, k=1.0, mode="full")
        assert slack <= 1e-12 * max(1.0, float(q.analytic_gradient(w) @ q.analytic_gradient(w)))

    @pytest.mark.parametrize("k", [0.0, 0.5, 1.0])
    @pytest.mark.parametrize("mode", ["full", "diag", "block"])
    def test_random_spd_instances(self, k, mode):
        rng = np.random.default_rng(5)
        for _ in range(5):
            d = int(rng.integers(1, 6)) * 2  # even so block sizes divide d
            cond = float(rng.uniform(1.5, 50.0))
            q = pr.make_random_spd_quadratic(d=d, condition_number=cond, seed=int(rng.integers(1e6)))
            w = rng.normal(size=d)
            bs = 2 if mode == "block" else None
            assert reference_descent_check(q, w, k=k, mode=mode, block_size=bs), (
                f"descent failed: d={d} cond={cond:.2f} k={k} mode={mode}"
            )

    def test_gradient_descent_direction_at_k_zero(self):
        # k=0 ignores the preconditioner entirely; the bound is the classical
        # smooth-descent guarantee at step 1/beta
        q = pr.make_random_spd_quadratic(d=4, condition_number=10.0, seed=6)
        w = np.ones(4)
        for mode in ("full", "diag"):
            assert reference_descent_check(q, w, k=0.0, mode=mode)

    def test_block_mode_requires_divisible_block_size(self):
        q = pr.make_random_spd_quadratic(d=6, condition_number=5.0, seed=7)
        with pytest.raises(ValueError):
            descent_slack(q, np.ones(6), k=1.0, mode="block", block_size=4)

    def test_unknown_mode_raises(self):
        q = pr.make_fig1_quadratic()
        with pytest.raises(ValueError):
            descent_slack(q, np.ones(2), k=1.0, mode="cholesky")

    def test_non_spd_quadratic_rejected(self):
        q = pr.QuadraticProblem(np.diag([1.0, -2.0]), np.zeros(2), name="saddle")
        with pytest.raises(ValueError):
            descent_slack(q, np.ones(2), k=1.0)


class TestVerificationSuite:
    def test_full_suite_passes(self):
        report = run_verification_suite(seed=0)
        failed = [p.name for p in report.properties if not p.passed]
        assert report.all_passed, f"failed properties: {failed}"
        assert len(report.properties) == 16

    def test_report_serializes_with_schema(self):
        report = run_verification_suite(names=["rademacher_mean"], seed=0)
        payload = report.to_dict()
        assert payload["schema"] == "hessopt-verify-1"
        assert payload["all_passed"] is True
        assert payload["properties"][0]["name"] == "rademacher_mean"
        assert "detail" in payload["properties"][0]

    def test_subset_selection_runs_only_requested(self):
        report = run_verification_suite(names=["hvp_linearity", "adam_reduction"], seed=0)
        assert sorted(p.name for p in report.properties) == ["adam_reduction", "hvp_linearity"]

    def test_unknown_property_name_raises_before_running(self):
        with pytest.raises(KeyError, match="no_such_property"):
            run_verification_suite(names=["no_such_property"])

    def test_results_are_deterministic_in_seed(self):
        a = run_verification_suite(names=["hutchinson_variance"], seed=3)
        b = run_verification_suite(names=["hutchinson_variance"], seed=3)
        assert a.properties[0].detail == b.properties[0].detail


class TestSuiteCanFail:
    """Inject a fault into the curvature EMA and insist the suite notices.

    A verification suite that cannot fail verifies nothing; flipping the
    sign of the squared-diagonal accumulation must break the second-order
    checks while leaving the plain Adam baseline intact.
    """

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_sign_flip_in_curvature_ema_is_detected(self, monkeypatch):
        monkeypatch.setattr(
            optim,
            "hessian_ema_square_update",
            lambda prev, val, b2: b2 * prev - (1.0 - b2) * val * val,
        )
        report = run_verification_suite(
            names=["adam_reduction", "one_step_quadratic"], seed=0
        )
        assert not report.all_passed
        assert all(not p.passed for p in report.properties)

    def test_suite_recovers_after_fault_removed(self):
        report = run_verification_suite(
            names=["adam_reduction", "one_step_quadratic"], seed=0
        )
        assert report.all_passed

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_crashing_property_reports_failure_not_exception(self, monkeypatch):
        def boom(prev, val, b2):
            raise RuntimeError("synthetic fault")

        monkeypatch.setattr(optim, "hessian_ema_square_update", boom)
        report = run_verification_suite(names=["one_step_quadratic"], seed=0)
        assert not report.all_passed
        assert "synthetic fault" in report.properties[0].detail
