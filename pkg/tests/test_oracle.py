import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stablenewton.core import CompositeObjective, ProxTerm, QuadraticModel
from stablenewton.errors import DomainError, RateFitError
from stablenewton.objectives import GlmObjective, QuadraticObjective, ScalarLink, make_problem
from stablenewton.oracle import (finite_diff_check, fit_rate, grid_minimize_quadratic, model_lipschitz,
                                 noise_floor, scalar_stability_exact)
from stablenewton.solvers import SolverConfig, exact_newton, gradient_descent_baseline


class TestGrid:
    def model(self):
        return QuadraticModel([0.0], [1.0], [[1.0]], 1.0)

    def test_unconstrained_minimum(self):
        step, val = grid_minimize_quadratic(self.model(), {"lo": -2.0, "hi": 2.0}, 1e-3)
        assert_allclose(step, [-1.0], atol=1e-3)
        assert val == pytest.approx(-0.5, abs=1e-6)

    def test_boundary_minimum(self):
        step, val = grid_minimize_quadratic(self.model(), {"lo": -0.5, "hi": 2.0}, 1e-3)
        assert_allclose(step, [-0.5], atol=1e-12)
        assert val == pytest.approx(-0.375)

    def test_indicator_restricts_grid(self):
        m = QuadraticModel([0.0], [1.0], [[1.0]], 1.0, ProxTerm.box(-0.25, 1.0))
        step, _ = grid_minimize_quadratic(m, {"lo": -2.0, "hi": 2.0}, 1e-3)
        assert step[0] >= -0.25 - 1e-12

    def test_radius_restricts_grid(self):
        m = QuadraticModel([0.0, 0.0], [1.0, 1.0], np.eye(2), 1.0)
        step, _ = grid_minimize_quadratic(m, {"lo": -1.0, "hi": 1.0, "norm": "l2", "radius": 0.5}, 1e-2)
        assert np.linalg.norm(step) <= 0.5 + 1e-12

    def test_rejects_large_dimension(self):
        m = QuadraticModel(np.zeros(4), np.ones(4), np.eye(4), 1.0)
        with pytest.raises(ValueError):
            grid_minimize_quadratic(m, {"lo": -1.0, "hi": 1.0})

    def test_model_lipschitz_covers_slope(self):
        m = self.model()
        L = model_lipschitz(m, {"lo": -2.0, "hi": 2.0})
        assert L >= 3.0


class TestFiniteDiff:
    def test_quadratic(self):
        rep = finite_diff_check(QuadraticObjective(np.diag([1.0, 3.0])), np.array([1.0, 2.0]), 1e-3)
        assert rep.grad_err < 1e-8 and rep.hess_err < 1e-8

    def test_detects_wrong_gradient(self):
        class Broken(QuadraticObjective):
            def gradient(self, x):
                return 1.1 * super().gradient(x)
        rep = finite_diff_check(Broken(np.eye(2)), np.array([1.0, 1.0]), 1e-4)
        assert rep.grad_err > 1e-3

    def test_probe_leaving_domain(self):
        p = make_problem("entropy_box")
        with pytest.raises(DomainError):
            finite_diff_check(p.smooth, np.array([4.0]), 1e-3)


class TestFitRate:
    def test_synthetic_geometric(self):
        fit = fit_rate(0.5 ** np.arange(30.0))
        assert_allclose(fit.per_step_factors, 0.5)
        assert fit.geometric_factor == pytest.approx(0.5)
        assert fit.r_squared == pytest.approx(1.0)

    def test_quartic_newton(self):
        p = make_problem("power_even", k=2)
        tr = exact_newton(p.objective, p.x0, SolverConfig(sigma=1.0, max_iter=40, decrement_tol=0))
        fit = fit_rate(tr, 0.0)
        assert abs(fit.geometric_factor - 16 / 81) <= 1e-9

    def test_gradient_descent_matches_condition_number(self):
        obj = CompositeObjective(QuadraticObjective(np.diag([1.0, 10.0])))
        tr = gradient_descent_baseline(obj, [1.0, 1.0], step=0.1, max_iter=400, gap_tol=1e-14)
        fit = fit_rate(tr)
        assert fit.geometric_factor == pytest.approx((1 - 1 / 10) ** 2, rel=1e-6)

    def test_stops_at_noise_floor(self):
        gaps = np.concatenate([0.1 ** np.arange(6.0), [1e-17, 1e-3]])
        assert fit_rate(gaps).n_points == 6

    def test_too_few_points(self):
        with pytest.raises(RateFitError):
            fit_rate([1.0, 0.5, 0.25])
        with pytest.raises(RateFitError):
            fit_rate([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])

    def test_noise_floor_scales(self):
        assert noise_floor(1e6) == pytest.approx(1e6 * noise_floor(0.0))


@pytest.mark.parametrize("link,a,b,expected", [
    (ScalarLink("entropy"), 1, 4, 4.0),
    (ScalarLink("robust_q", q=1.5), 1, 4, 2.0),
    (ScalarLink("exp_shift"), -1, 1, math.e ** 2),
    (ScalarLink("power_even", k=2), 1, 3, 9.0),
])
def test_scalar_stability_closed_forms(link, a, b, expected):
    assert scalar_stability_exact(link, a, b) == pytest.approx(expected, rel=1e-12)


def test_scalar_stability_logistic_peak_inside():
    link = ScalarLink("logistic")
    expected = 0.25 / link.d2(np.array([3.0]))[0]
    assert scalar_stability_exact(link, -1, 3) == pytest.approx(expected)


def test_scalar_stability_errors():
    with pytest.raises(ValueError):
        scalar_stability_exact(ScalarLink("power_even", k=2), -1, 1)
    with pytest.raises(DomainError):
        scalar_stability_exact(ScalarLink("entropy"), 0, 1)
    with pytest.raises(ValueError):
        scalar_stability_exact(ScalarLink("entropy"), 2, 1)


def test_scalar_oracle_matches_objective_hessian():
    # the oracle's own second derivative against the objective's Hessian on a fine grid
    link = ScalarLink("logistic")
    obj = GlmObjective([[1.0]], link)
    hs = np.array([obj.hessian([v])[0, 0] for v in np.linspace(-2, 2, 401)])
    assert scalar_stability_exact(link, -2, 2) == pytest.approx(hs.max() / hs.min(), rel=1e-12)
