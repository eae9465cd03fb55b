import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stablenewton.core import ApproxScheme, CompositeObjective, LevelSetDomain, ProxTerm
from stablenewton.errors import InsufficientSamples, UnboundedEta
from stablenewton.objectives import (GlmObjective, LinearTransformObjective, QuadraticObjective,
                                     ScalarLink, make_problem)
from stablenewton.oracle import scalar_stability_exact
from stablenewton.stability import (StabilityBound, analytic_bound, check_taylor_bounds, estimate_eta,
                                    estimate_global_c, estimate_local_d, estimate_path_c,
                                    estimate_trajectory_c, local_d_curve, path_c_curve, required_taylor_constant,
                                    sample_pairs)


def _dom(name, **kw):
    p = make_problem(name, **kw)
    return p, LevelSetDomain(p.objective, p.x0)


class TestAnalyticBound:
    def test_smooth_strongly_convex(self):
        assert analytic_bound("lipschitz_grad_strongly_convex", L=10, mu=2) == 5.0

    def test_quasi_self_concordant(self):
        assert analytic_bound("quasi_self_concordant", D=3, k=1) == pytest.approx(20.0855, rel=1e-5)

    def test_self_concordant(self):
        assert analytic_bound("self_concordant_lipschitz_grad", D=2, k=1, L=1) == 9.0

    def test_lipschitz_hessian(self):
        assert analytic_bound("lipschitz_hess_strongly_convex", D=3, M=1, mu=0.25) == 13.0

    def test_errors(self):
        with pytest.raises(ValueError):
            analytic_bound("quasi_self_concordant", D=1)
        with pytest.raises(ValueError):
            analytic_bound("unknown", D=1, k=1)
        with pytest.raises(ValueError):
            analytic_bound("quasi_self_concordant", D=-1, k=1)


class TestGlobalC:
    def test_quadratic_is_exactly_one(self):
        obj = CompositeObjective(QuadraticObjective(np.diag([1.0, 10.0])))
        dom = LevelSetDomain(obj, [3.0, 4.0])
        rep = estimate_global_c(obj, dom, n_pairs=2000)
        assert rep.estimate == 1.0

    def test_entropy_on_interval(self):
        p, dom = _dom("entropy_box")
        rep = estimate_global_c(p.objective, dom)
        assert 3.99 <= rep.estimate <= 4.0 + 1e-12
        assert rep.mode == "grid"

    def test_logistic_below_exp_bound(self):
        p, dom = _dom("logistic_1d")
        rep = estimate_global_c(p.objective, dom)
        assert rep.estimate <= math.exp(4)
        assert rep.within_bound
        assert rep.estimate == pytest.approx(p.c_exact, rel=1e-4)

    def test_sampled_is_monotone_in_sample_count(self):
        p, dom = _dom("logistic_fixture", regularizer="box")
        ests = [estimate_global_c(p.objective, dom, n_pairs=n).estimate for n in (50, 500, 5000)]
        assert ests == sorted(ests)

    def test_samples_are_prefix_consistent(self):
        p, dom = _dom("logistic_fixture", regularizer="box")
        U1, V1 = sample_pairs(p.objective, dom, 100, seed=3)
        U2, V2 = sample_pairs(p.objective, dom, 300, seed=3)
        assert_allclose(U2[:100], U1)
        assert_allclose(V2[:100], V1)

    def test_too_few_pairs(self):
        obj = QuadraticObjective(np.eye(2))
        with pytest.raises(InsufficientSamples):
            estimate_global_c(obj, pairs=(np.zeros((3, 2)), np.ones((3, 2))))

    def test_degenerate_pairs_are_counted(self):
        # zero curvature along the second axis
        obj = GlmObjective([[1.0, 0.0]], "logistic")
        U = np.zeros((20, 2))
        V = np.tile([[0.0, 1.0]], (20, 1))
        V[:12, 0] = 0.5
        rep = estimate_global_c(obj, pairs=(U, V))
        assert rep.degenerate_pairs == 8

    def test_report_is_json(self):
        p, dom = _dom("exp_shift")
        d = json.loads(estimate_global_c(p.objective, dom).to_json())
        assert d["constant_kind"] == "global_c"
        assert len(d["witness_pair"]) == 2


class TestLocalD:
    def test_quadratic(self):
        obj = CompositeObjective(QuadraticObjective(np.eye(2)))
        dom = LevelSetDomain(obj, [1.0, 1.0])
        assert estimate_local_d(obj, dom, "l2", 0.3, n_pairs=1000).estimate == 1.0

    def test_exp_shift_matches_exp_r(self):
        p, dom = _dom("exp_shift")
        assert estimate_local_d(p.objective, dom, "l2", 0.5).estimate == pytest.approx(math.exp(0.5), rel=1e-3)

    def test_large_radius_equals_global_on_same_pairs(self):
        p, dom = _dom("logistic_fixture", regularizer="box")
        pairs = sample_pairs(p.objective, dom, 2000)
        c = estimate_global_c(p.objective, pairs=pairs).estimate
        d = estimate_local_d(p.objective, None, "l2", 1e3, pairs=pairs).estimate
        assert d == c

    def test_monotone_and_sandwiched(self):
        p, dom = _dom("logistic_fixture", regularizer="box")
        pairs = sample_pairs(p.objective, dom, 3000)
        c = estimate_global_c(p.objective, pairs=pairs).estimate
        ds = [estimate_local_d(p.objective, None, "l2", r, pairs=pairs).estimate for r in (0.5, 1, 2, 4, 8)]
        assert ds == sorted(ds)
        assert all(1 <= d <= c for d in ds)

    def test_curve_is_monotone(self):
        p, dom = _dom("logistic_fixture", regularizer="box")
        reps = local_d_curve(p.objective, dom, "l2", [0.2, 0.5, 1.0], n_pairs=500)
        ests = [r.estimate for r in reps]
        assert ests == sorted(ests)

    def test_bad_radius(self):
        p, dom = _dom("exp_shift")
        with pytest.raises(ValueError):
            estimate_local_d(p.objective, dom, "l2", 0.0)


class TestPathC:
    def test_gamma_one_equals_global(self):
        p, dom = _dom("logistic_fixture", regularizer="box")
        pairs = sample_pairs(p.objective, dom, 2000)
        assert estimate_path_c(p.objective, None, 1.0, pairs=pairs).estimate == \
            estimate_global_c(p.objective, pairs=pairs).estimate

    @pytest.mark.parametrize("name", ["exp_shift", "logistic_1d", "entropy", "robust_q"])
    def test_tiny_gamma_is_close_to_one(self, name):
        p, dom = _dom(name)
        assert estimate_path_c(p.objective, dom, 1e-6).estimate <= 1 + 1e-3

    def test_exp_shift_grid(self):
        p, dom = _dom("exp_shift")
        # ratio e^{gamma (v - u)} is largest for the endpoints of [-2, 2]
        assert estimate_path_c(p.objective, dom, 0.25).estimate == pytest.approx(math.e, rel=1e-3)

    def test_monotone_in_gamma(self):
        p, dom = _dom("exp_shift")
        ests = [r.estimate for r in path_c_curve(p.objective, dom, [0.1, 0.25, 0.5, 1.0])]
        assert ests == sorted(ests)
        assert ests[-1] == pytest.approx(math.exp(4), rel=1e-9)


class TestEta:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.obj = GlmObjective(rng.standard_normal((10, 4)), "logistic", normalize="l2")
        xs = rng.standard_normal((6, 4))
        self.traj = list(zip(xs[:-1], xs[1:]))

    def test_exact_hessian(self):
        rep = estimate_eta(self.obj, ApproxScheme("exact_hessian"), self.traj)
        assert rep.estimate == pytest.approx(1.0)

    def test_scaled_hessian(self):
        rep = estimate_eta(self.obj, lambda x: 2 * self.obj.hessian(x), self.traj)
        assert rep.estimate == pytest.approx(math.sqrt(2))

    def test_block_diagonal_is_finite(self):
        rep = estimate_eta(self.obj, ApproxScheme("block_diag", blocks=2), self.traj)
        assert 1.0 <= rep.estimate < np.inf
        assert rep.witness_pair is not None

    def test_unbounded(self):
        x, z = np.zeros(4), np.ones(4)
        with pytest.raises(UnboundedEta):
            estimate_eta(self.obj, [np.zeros((4, 4))], [(x, z)])

    def test_empty(self):
        with pytest.raises(ValueError):
            estimate_eta(self.obj, ApproxScheme(), [])


class TestTaylorBounds:
    def test_quadratic_is_tight(self):
        obj = QuadraticObjective(np.diag([1.0, 3.0]))
        rng = np.random.default_rng(0)
        rep = check_taylor_bounds(obj, 1.0, (rng.standard_normal((50, 2)), rng.standard_normal((50, 2))))
        assert rep.ok

    def test_entropy_with_correct_constant(self):
        p, dom = _dom("entropy_box")
        pairs = sample_pairs(p.objective, dom, 10000, seed=1)
        assert check_taylor_bounds(p.smooth, 4.0, pairs).ok

    def test_entropy_with_small_constant(self):
        p = make_problem("entropy_box")
        rep = check_taylor_bounds(p.smooth, 1.5, (np.array([[1.0]]), np.array([[4.0]])))
        assert not rep.ok
        assert rep.violations[0][2] == "lower"


def test_affine_invariance_on_transported_samples():
    p, dom = _dom("logistic_fixture", regularizer="box")
    U, V = sample_pairs(p.objective, dom, 2000)
    c = estimate_global_c(p.smooth, pairs=(U, V)).estimate
    rng = np.random.default_rng(9)
    A = rng.standard_normal((2, 2)) + 3 * np.eye(2)
    Ai = np.linalg.inv(A)
    h = LinearTransformObjective(p.smooth, A)
    ct = estimate_global_c(h, pairs=(U @ Ai.T, V @ Ai.T)).estimate
    assert ct == pytest.approx(c, rel=1e-8)


def test_trajectory_c_is_at_most_global():
    p, dom = _dom("exp_shift")
    xs = [np.array([2.0]), np.array([1.5]), np.array([1.0])]
    rep = estimate_trajectory_c(p.objective, xs, x_star=[0.0])
    assert 1.0 <= rep.estimate <= math.exp(2.0) + 1e-9


@pytest.mark.parametrize("link,a,b", [("entropy", 1, 4), ("robust_q", 1, 4), ("exp_shift", -1, 1),
                                      ("logistic", -2, 2)])
def test_grid_reaches_exact_scalar_constant(link, a, b):
    obj = GlmObjective([[1.0]], ScalarLink(link))
    exact = scalar_stability_exact(ScalarLink(link), a, b)
    est = estimate_global_c(obj, box=([a], [b])).estimate
    assert 0.99 * exact <= est <= exact * (1 + 1e-12)


def test_declared_bounds_are_respected():
    for name in ("entropy", "logistic_1d", "robust_q", "exp_shift"):
        p, dom = _dom(name)
        rep = estimate_global_c(p.objective, dom)
        assert isinstance(p.smooth.analytic_stability, StabilityBound)
        assert rep.within_bound, name


def test_required_constant_is_the_threshold():
    p, dom = _dom("entropy_box")
    pairs = sample_pairs(p.objective, dom, 2000, seed=2)
    c_req = required_taylor_constant(p.smooth, pairs)
    assert 1.0 < c_req <= 4.0
    assert check_taylor_bounds(p.smooth, c_req * (1 + 1e-9), pairs).ok
    assert not check_taylor_bounds(p.smooth, 0.99 * c_req, pairs).ok
