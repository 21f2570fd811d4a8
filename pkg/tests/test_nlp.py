import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simred.errors import SimredError
from simred.nlp import NlpProblem, kkt_residuals, solve_nlp, solve_qp


def bounded_square():
    return NlpProblem(n_vars=1, objective=lambda x: float(x[0] ** 2), gradient=lambda x: 2 * x,
                      lower=[1.0], upper=[2.0])


def equality_quadratic():
    return NlpProblem(
        n_vars=2,
        objective=lambda x: float((x[0] - 1) ** 2 + (x[1] - 2) ** 2),
        gradient=lambda x: np.array([2 * (x[0] - 1), 2 * (x[1] - 2)]),
        constraints=lambda x: np.array([x[0] + x[1] - 1]),
        jacobian=lambda x: np.array([[1.0, 1.0]]),
        n_eq=1,
    )


def rosenbrock(hessian=False):
    def f(x):
        return float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)

    def g(x):
        return np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])

    def H(x, lam):
        return np.array([[1200 * x[0] ** 2 - 400 * x[1] + 2, -400 * x[0]], [-400 * x[0], 200.0]])

    return NlpProblem(n_vars=2, objective=f, gradient=g, hessian=H if hessian else None)


def circle_problem():
    """min x1 + x2 on the unit circle: x = -(1, 1)/sqrt(2), and 1 = lam 2 x_i gives lam = -1/sqrt(2)."""
    return NlpProblem(
        n_vars=2,
        objective=lambda x: float(x[0] + x[1]),
        gradient=lambda x: np.ones(2),
        constraints=lambda x: np.array([x @ x - 1.0]),
        jacobian=lambda x: 2 * x.reshape(1, 2),
        n_eq=1,
    )


class TestExamples:
    def test_active_lower_bound(self):
        sol = solve_nlp(bounded_square(), [1.5], tol=1e-8)
        assert sol.success
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        # grad f - mu = 0 with mu > 0 on an active lower bound
        assert sol.bound_multipliers[0] == pytest.approx(2.0, rel=1e-6)

    def test_equality_quadratic(self):
        sol = solve_nlp(equality_quadratic(), [0.0, 0.0], tol=1e-8)
        assert sol.success
        np.testing.assert_allclose(sol.x, [0.0, 1.0], atol=1e-8)
        # grad f = lam grad c gives lam = -2 under L = f - lam c
        assert sol.eq_multipliers[0] == pytest.approx(-2.0, rel=1e-6)

    def test_rosenbrock(self):
        sol = solve_nlp(rosenbrock(), [-1.2, 1.0], tol=1e-10)
        assert sol.success
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-6)

    def test_rosenbrock_exact_hessian(self):
        sol = solve_nlp(rosenbrock(hessian=True), [-1.2, 1.0], tol=1e-10)
        assert sol.success
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-6)

    def test_nonlinear_equality(self):
        sol = solve_nlp(circle_problem(), [0.5, -0.2], tol=1e-9)
        assert sol.success
        np.testing.assert_allclose(sol.x, -np.ones(2) / np.sqrt(2), atol=1e-7)
        assert sol.eq_multipliers[0] == pytest.approx(-1 / np.sqrt(2), rel=1e-6)

    def test_starting_point_projected(self):
        sol = solve_nlp(bounded_square(), [10.0], tol=1e-8)
        assert sol.success and sol.x[0] == pytest.approx(1.0, abs=1e-8)


class TestKktResiduals:
    def test_zero_at_solution(self):
        pb = equality_quadratic()
        res = kkt_residuals(pb, [0.0, 1.0], (np.array([-2.0]), None))
        assert res.max() <= 1e-8

    def test_feasibility_at_origin(self):
        res = kkt_residuals(equality_quadratic(), [0.0, 0.0], (None, None))
        assert res.feasibility == pytest.approx(1.0)

    def test_unconstrained_stationary_point(self):
        res = kkt_residuals(rosenbrock(), [1.0, 1.0], (None, None))
        assert res.stationarity == 0.0

    def test_wrong_sign_multiplier_breaks_stationarity(self):
        res = kkt_residuals(equality_quadratic(), [0.0, 1.0], (np.array([2.0]), None))
        assert res.stationarity > 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kkt_residuals(equality_quadratic(), [0.0, 1.0], (np.zeros(3), None))

    def test_bound_multiplier_complementarity(self):
        # a positive lower-bound multiplier away from the bound is a violation
        res = kkt_residuals(bounded_square(), [1.5], (None, np.array([3.0])))
        assert res.complementarity > 0


class TestProperties:
    @pytest.mark.parametrize("make,x0", [(bounded_square, [1.5]), (equality_quadratic, [0.0, 0.0]),
                                         (rosenbrock, [-1.2, 1.0]), (circle_problem, [0.5, -0.2])])
    def test_converged_is_certified(self, make, x0):
        tol = 1e-7
        pb = make()
        sol = solve_nlp(pb, x0, tol=tol)
        assert sol.success
        assert kkt_residuals(pb, sol.x, (sol.eq_multipliers, sol.bound_multipliers)).max() <= tol

    def test_deterministic(self):
        runs = [solve_nlp(rosenbrock(), [-1.2, 1.0], tol=1e-10) for _ in range(2)]
        assert runs[0].x.tobytes() == runs[1].x.tobytes()
        assert [h.objective for h in runs[0].history] == [h.objective for h in runs[1].history]

    @pytest.mark.parametrize("make,x0", [(rosenbrock, [-1.2, 1.0]), (circle_problem, [2.0, 0.3])])
    def test_merit_non_increasing(self, make, x0):
        sol = solve_nlp(make(), x0, tol=1e-9)
        assert sol.history
        for rec in sol.history:
            assert rec.merit_after <= rec.merit_before + 1e-12 * max(1.0, abs(rec.merit_before))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(-3, 3))
    def test_random_projection_problems(self, a, b):
        # min |x - a|^2 s.t. sum x = b has x = a + (b - sum a)/3
        a = np.array(a)
        pb = NlpProblem(n_vars=3, objective=lambda x: float((x - a) @ (x - a)), gradient=lambda x: 2 * (x - a),
                        constraints=lambda x: np.array([x.sum() - b]), jacobian=lambda x: np.ones((1, 3)),
                        n_eq=1)
        sol = solve_nlp(pb, np.zeros(3), tol=1e-9)
        assert sol.success
        np.testing.assert_allclose(sol.x, a + (b - a.sum()) / 3, atol=1e-7)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-4, 4), min_size=2, max_size=2))
    def test_random_box_problems(self, a):
        # min |x - a|^2 on [-1, 1]^2 is the clipped point
        a = np.array(a)
        pb = NlpProblem(n_vars=2, objective=lambda x: float((x - a) @ (x - a)), gradient=lambda x: 2 * (x - a),
                        lower=[-1, -1], upper=[1, 1])
        sol = solve_nlp(pb, np.zeros(2), tol=1e-9)
        assert sol.success
        np.testing.assert_allclose(sol.x, np.clip(a, -1, 1), atol=1e-8)


class TestFailures:
    def test_infeasible_reports_status(self):
        # x^2 + 1 = 0 has no real solution
        pb = NlpProblem(n_vars=1, objective=lambda x: float(x[0]), gradient=lambda x: np.ones(1),
                        constraints=lambda x: np.array([x[0] ** 2 + 1]), jacobian=lambda x: 2 * x.reshape(1, 1),
                        n_eq=1)
        sol = solve_nlp(pb, [0.7], tol=1e-8, max_iter=100)
        assert not sol.success
        assert sol.status in ("infeasible_stationary", "line_search_failure", "max_iter")
        assert sol.kkt.feasibility >= 1.0 - 1e-8

    def test_max_iter(self):
        sol = solve_nlp(rosenbrock(), [-1.2, 1.0], tol=1e-12, max_iter=3)
        assert sol.status == "max_iter" and sol.iterations == 3

    def test_evaluator_failure_is_backtracked(self):
        # the objective is undefined left of 0.5; the first full step would land there
        def f(x):
            if x[0] < 0.5:
                raise ArithmeticError("outside domain")
            return float((x[0] - 0.6) ** 2 + np.log(x[0]))

        def g(x):
            if x[0] < 0.5:
                raise ArithmeticError("outside domain")
            return np.array([2 * (x[0] - 0.6) + 1 / x[0]])

        pb = NlpProblem(n_vars=1, objective=f, gradient=g)
        sol = solve_nlp(pb, [3.0], tol=1e-8)
        assert np.all(sol.x >= 0.5)
        assert sol.objective <= f(np.array([3.0]))

    def test_bad_start_raises(self):
        pb = NlpProblem(n_vars=1, objective=lambda x: float("nan") if x[0] > 0 else 0.0, gradient=lambda x: x)
        with pytest.raises(SimredError):
            solve_nlp(pb, [1.0])

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            NlpProblem(n_vars=1, objective=abs, gradient=abs, lower=[2.0], upper=[1.0])
        with pytest.raises(ValueError):
            NlpProblem(n_vars=1, objective=abs, gradient=abs, n_eq=1)
        with pytest.raises(ValueError):
            NlpProblem(n_vars=2, objective=abs, gradient=abs, hessian_blocks=[[0]])


class TestDerivativeCheck:
    def test_passes_for_correct_derivatives(self):
        assert equality_quadratic().check_derivatives(np.array([0.3, -0.7])) < 1e-6

    def test_flags_wrong_gradient(self):
        pb = NlpProblem(n_vars=1, objective=lambda x: float(x[0] ** 3), gradient=lambda x: 2 * x)
        with pytest.raises(AssertionError):
            pb.check_derivatives(np.array([1.3]))


class TestQp:
    def test_unconstrained_newton_step(self):
        B = np.diag([2.0, 4.0])
        g = np.array([2.0, -4.0])
        res = solve_qp(B, g, np.zeros((0, 2)), np.zeros(0), np.full(2, -np.inf), np.full(2, np.inf), rho=10.0)
        np.testing.assert_allclose(res.d, [-1.0, 1.0], atol=1e-12)

    def test_bound_becomes_active(self):
        res = solve_qp(np.eye(2), np.array([-3.0, 0.5]), np.zeros((0, 2)), np.zeros(0),
                       np.array([-1.0, -1.0]), np.array([1.0, 1.0]), rho=10.0)
        np.testing.assert_allclose(res.d, [1.0, -0.5], atol=1e-12)
        assert res.active[0] == 1 and res.mu[0] < 0

    def test_equality_satisfied_without_slack(self):
        res = solve_qp(np.eye(2), np.zeros(2), np.array([[1.0, 1.0]]), np.array([-1.0]),
                       np.full(2, -np.inf), np.full(2, np.inf), rho=100.0)
        np.testing.assert_allclose(res.d, [0.5, 0.5], atol=1e-10)
        assert res.slack < 1e-10

    def test_inconsistent_linearisation_uses_slack(self):
        # d in [-0.1, 0.1] cannot reach d1 + d2 = 1
        res = solve_qp(np.eye(2), np.zeros(2), np.array([[1.0, 1.0]]), np.array([-1.0]),
                       np.full(2, -0.1), np.full(2, 0.1), rho=100.0)
        np.testing.assert_allclose(res.d, [0.1, 0.1], atol=1e-10)
        assert res.slack == pytest.approx(0.8, abs=1e-10)


class TestLog:
    def test_verbose_log_columns(self):
        buf = io.StringIO()
        solve_nlp(equality_quadratic(), [0.0, 0.0], tol=1e-8, verbose=True, stream=buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "iter,objective,feasibility,stationarity,step"
        assert len(lines) > 1 and all(len(l.split(",")) == 5 for l in lines[1:])
