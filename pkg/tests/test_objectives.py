import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from stablenewton.errors import DomainError, EmptyDataError, ParseError
from stablenewton.objectives import (ZOO, GlmObjective, LinearTransformObjective, QuadraticObjective,
                                     ScalarLink, load_libsvm, make_counterexample, make_problem,
                                     newton_ratio_power_even, parse_libsvm)
from stablenewton.oracle import finite_diff_check

LINKS = [ScalarLink("logistic"), ScalarLink("exp_shift"), ScalarLink("entropy"),
         ScalarLink("robust_q", q=1.5), ScalarLink("power_even", k=3), ScalarLink("neg_exp_linear")]


@pytest.mark.parametrize("link", LINKS, ids=lambda l: l.kind)
def test_link_derivatives_match_differences(link):
    u = np.linspace(0.5, 3.0, 7)
    h = 1e-5
    assert_allclose((link.value(u + h) - link.value(u - h)) / (2 * h), link.d1(u), rtol=1e-6, atol=1e-8)
    assert_allclose((link.d1(u + h) - link.d1(u - h)) / (2 * h), link.d2(u), rtol=1e-6, atol=1e-8)
    assert_allclose((link.d2(u + h) - link.d2(u - h)) / (2 * h), link.d3(u), rtol=1e-5, atol=1e-7)


def test_logistic_is_stable_for_large_arguments():
    link = ScalarLink("logistic")
    assert link.value(np.array([-800.0]))[0] == pytest.approx(800.0)
    assert link.value(np.array([800.0]))[0] == 0.0
    assert np.isfinite(link.d2(np.array([-800.0, 800.0]))).all()


def test_positive_links_reject_nonpositive_arguments():
    with pytest.raises(DomainError):
        ScalarLink("entropy").value(np.array([0.0]))
    with pytest.raises(ValueError):
        ScalarLink("robust_q", q=2.5)
    with pytest.raises(ValueError):
        ScalarLink("power_even", k=0)


class TestGlm:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.obj = GlmObjective(rng.standard_normal((8, 3)), "logistic", linear=[0.1, 0, -0.2],
                                normalize="l2")
        self.X = rng.standard_normal((5, 3))

    def test_rows_are_normalized(self):
        assert_allclose(np.linalg.norm(self.obj.A, axis=1), 1.0)

    def test_vectorized_matches_loops(self):
        assert_allclose(self.obj.values(self.X), [self.obj.value(x) for x in self.X])
        D = self.X[::-1]
        assert_allclose(self.obj.hess_quads(self.X, D),
                        [d @ self.obj.hessian(x) @ d for x, d in zip(self.X, D)])

    def test_value_by_terms(self):
        assert self.obj.value_by_terms(self.X[0]) == pytest.approx(self.obj.value(self.X[0]))

    def test_batched_gradients(self):
        assert_allclose(self.obj.gradients(self.X), [self.obj.gradient(x) for x in self.X])
        T = np.array([[2.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]])
        h = LinearTransformObjective(self.obj, T)
        assert_allclose(h.gradients(self.X), [h.gradient(x) for x in self.X])
        q = QuadraticObjective(np.diag([1.0, 2.0, 3.0]), b=[1.0, 0.0, 0.0])
        assert_allclose(q.gradients(self.X), [q.gradient(x) for x in self.X])

    def test_hvp(self):
        v = np.array([1.0, -1.0, 2.0])
        assert_allclose(self.obj.hvp(self.X[0], v), self.obj.hessian(self.X[0]) @ v)

    def test_finite_differences(self):
        rep = finite_diff_check(self.obj, np.zeros(3))
        assert rep.grad_err <= 1e-5 and rep.hess_err <= 1e-5

    def test_zero_rows_dropped_with_warning(self):
        with pytest.warns(UserWarning):
            obj = GlmObjective([[1.0, 0.0], [0.0, 0.0]], "logistic", normalize="l2")
        assert obj.A.shape == (1, 2)

    def test_entropy_values_outside_domain_are_inf(self):
        obj = GlmObjective([[1.0]], "entropy")
        assert obj.values(np.array([[-1.0], [2.0]]))[0] == math.inf


class TestLibsvm:
    def test_fixture_loads(self, tmp_path):
        path = tmp_path / "a.svm"
        path.write_text("# header\n+1 1:3 3:4\n-1 2:1 # trailing\n\n0 1:1\n")
        obj = load_libsvm(path)
        assert obj.A.shape == (3, 3)
        # labels folded: <= 0 counts as negative
        assert_allclose(obj.A[0], [0.6, 0.0, 0.8])
        assert_allclose(obj.A[1], [0.0, -1.0, 0.0])
        assert_allclose(obj.A[2], [-1.0, 0.0, 0.0])

    def test_linf_normalization_uses_l1_row_norm(self, tmp_path):
        path = tmp_path / "a.svm"
        path.write_text("1 1:3 2:1\n")
        obj = load_libsvm(path, dual_norm="linf")
        assert_allclose(obj.A[0], [0.75, 0.25])

    def test_n_features_pads(self, tmp_path):
        path = tmp_path / "a.svm"
        path.write_text("1 1:1\n")
        X, y = parse_libsvm(path, n_features=4)
        assert X.shape == (1, 4)

    @pytest.mark.parametrize("text,line", [("1 1:1\n1 0:2\n", 2), ("1 a:b\n", 1), ("x 1:1\n", 1),
                                           ("1 1:1\n1 2\n", 2), ("1 1:nan\n", 1)])
    def test_parse_errors_carry_line_number(self, tmp_path, text, line):
        path = tmp_path / "bad.svm"
        path.write_text(text)
        with pytest.raises(ParseError, match=f"line {line}"):
            parse_libsvm(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.svm"
        path.write_text("# nothing\n\n")
        with pytest.raises(EmptyDataError):
            load_libsvm(path)

    def test_zero_rows_dropped(self, tmp_path):
        path = tmp_path / "z.svm"
        path.write_text("1 1:1\n1\n-1 2:2\n")
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            obj = load_libsvm(path)
        assert obj.A.shape[0] == 2
        assert any("zero rows" in str(x.message) for x in w)


class TestCounterexamples:
    @pytest.mark.parametrize("k,expected", [(1, 0.0), (2, 16 / 81)])
    def test_newton_ratio(self, k, expected):
        assert newton_ratio_power_even(k) == pytest.approx(expected)

    def test_functions_vanish_at_origin(self):
        for kind in ("power_even", "exp_2d", "neg_exp_linear"):
            obj = make_counterexample(kind)
            assert obj.value(np.zeros(obj.dim)) == 0.0
            assert_allclose(obj.gradient(np.zeros(obj.dim)), 0.0, atol=1e-15)

    def test_exp_2d_value(self):
        obj = make_counterexample("exp_2d")
        assert obj.value([1.0, 2.0]) == pytest.approx(math.exp(-1) + 1 + math.exp(-2) + 2 - 2)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_counterexample("nope")


@pytest.mark.parametrize("name", ZOO)
def test_zoo_problems_are_consistent(name):
    p = make_problem(name)
    F0 = p.objective.value(p.x0)
    assert np.isfinite(F0)
    if p.F_star is not None:
        assert p.F_star <= F0
        if p.x_star is not None:
            assert p.objective.value(p.x_star) == pytest.approx(p.F_star)


def test_zoo_rejects_unknown_parameters():
    with pytest.raises(TypeError):
        make_problem("entropy", bogus=1)
    with pytest.raises(ValueError):
        make_problem("nope")


def test_zoo_finite_differences_pass():
    for name in ZOO:
        p = make_problem(name)
        x = p.x0 if p.x_star is None else 0.5 * (p.x0 + p.x_star)
        if name == "exp_2d":
            x = np.array([1.0, -1.0])
        h = 1e-6 if name != "quadratic" else 1e-3
        rep = finite_diff_check(p.smooth, x, h)
        assert rep.grad_err <= 1e-5, name
        assert rep.hess_err <= 1e-5, name


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_linear_transform_transports_hessian(seed):
    rng = np.random.default_rng(seed)
    base = GlmObjective(rng.standard_normal((6, 2)), "logistic", normalize="l2")
    T = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    h = LinearTransformObjective(base, T)
    u, d = rng.standard_normal(2), rng.standard_normal(2)
    assert h.value(u) == pytest.approx(base.value(T @ u))
    assert h.hess_quad(u, d) == pytest.approx(base.hess_quad(T @ u, T @ d), rel=1e-10)


def test_quadratic_objective_optimum():
    q = QuadraticObjective(np.diag([1.0, 10.0]), b=[1.0, 10.0])
    assert_allclose(q.x_star, [1.0, 1.0])
    assert q.f_star == pytest.approx(-5.5)
