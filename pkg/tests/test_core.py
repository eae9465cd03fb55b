import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from stablenewton.core import (CSV_COLUMNS, ApproxScheme, CompositeObjective, LevelSetDomain, NormSpec,
                               ProxTerm, QuadraticModel, SolveTrace, TraceRecord, as_vector,
                               level_set_contains, weighted_norm_sq)
from stablenewton.errors import DimensionError, DomainError
from stablenewton.objectives import GlmObjective, QuadraticObjective, make_problem


def test_as_vector_rejects_bad_input():
    with pytest.raises(DimensionError):
        as_vector([1.0, 2.0], dim=3)
    with pytest.raises(ValueError):
        as_vector([1.0, np.nan])


def test_weighted_norm_matches_direct_form():
    M = np.array([[2.0, 1.0], [1.0, 3.0]])
    v = np.array([1.0, -2.0])
    assert weighted_norm_sq(v, M) == pytest.approx(v @ M @ v)
    with pytest.raises(DimensionError):
        weighted_norm_sq(v, np.eye(3))


def test_norm_spec_kinds():
    v = np.array([3.0, -4.0])
    assert NormSpec.l2()(v) == pytest.approx(5.0)
    assert NormSpec.linf()(v) == pytest.approx(4.0)
    assert NormSpec.metric(np.diag([4.0, 1.0]))(v) == pytest.approx(math.sqrt(36 + 16))
    assert NormSpec.parse("linf").kind == "linf"
    with pytest.raises(ValueError):
        NormSpec.parse("l7")


class TestProxTerm:
    def test_l1_soft_threshold(self):
        g = ProxTerm.l1(0.5)
        assert_allclose(g.prox(np.array([2.0, -0.2, -1.0]), t=1.0), [1.5, 0.0, -0.5])
        assert g.value([1.0, -2.0]) == pytest.approx(1.5)

    def test_box_projection_and_membership(self):
        g = ProxTerm.box([-1.0, 0.0], [1.0, 2.0])
        assert_array_equal(g.prox(np.array([3.0, -1.0])), [1.0, 0.0])
        assert g.value([0.0, 1.0]) == 0.0
        assert g.value([2.0, 1.0]) == math.inf

    def test_ball_projection(self):
        g = ProxTerm.ball([0.0, 0.0], 1.0)
        assert_allclose(g.prox(np.array([3.0, 4.0])), [0.6, 0.8])
        assert g.diameter(2, NormSpec.l2()) == 2.0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.01, 3.0))
    def test_prox_is_a_minimizer(self, v, t):
        # the prox output beats nearby perturbations of itself
        v = np.array(v)
        for g in (ProxTerm.l1(0.7), ProxTerm.box(-1.0, 2.0), ProxTerm.ball(np.zeros(3), 1.5)):
            z = g.prox(v, t)
            obj = lambda p: t * g.value(p) + 0.5 * np.sum((p - v) ** 2)  # noqa: E731
            best = obj(z)
            rng = np.random.default_rng(0)
            for _ in range(20):
                w = z + 1e-3 * rng.standard_normal(3)
                if g.is_indicator:
                    w = g.prox(w, 1.0)
                assert obj(w) >= best - 1e-12


def test_composite_value_inherits_optimum():
    quad = QuadraticObjective(np.eye(2))
    comp = CompositeObjective(quad)
    assert comp.F_star == 0.0
    comp_l1 = CompositeObjective(quad, ProxTerm.l1(1.0))
    assert comp_l1.value([1.0, -1.0]) == pytest.approx(1.0 + 2.0)
    boxed = CompositeObjective(quad, ProxTerm.box(0.5, 1.0))
    assert boxed.value([0.0, 0.0]) == math.inf


def test_composite_value_is_inf_outside_link_domain():
    ent = GlmObjective([[1.0]], "entropy")
    comp = CompositeObjective(ent)
    assert comp.value([-1.0]) == math.inf
    assert_array_equal(comp.values(np.array([[-1.0], [1.0]])), [math.inf, 0.0])


class TestLevelSetDomain:
    def test_quadratic_level_set(self):
        dom = LevelSetDomain(CompositeObjective(QuadraticObjective(np.eye(2))), [3.0, 4.0])
        assert dom.level == pytest.approx(12.5)
        assert level_set_contains(dom, [5.0, 0.0])
        assert not level_set_contains(dom, [5.1, 0.0])
        assert dom.diameter == pytest.approx(10.0, rel=1e-3)

    def test_indicator_diameter_is_exact(self):
        p = make_problem("exp_shift")
        dom = LevelSetDomain(p.objective, p.x0)
        assert dom.diameter == pytest.approx(4.0)

    def test_unbounded_level_set_is_reported(self):
        lin = GlmObjective([[1.0]], "neg_exp_linear", linear=[-1.0])
        dom = LevelSetDomain(CompositeObjective(lin), [0.0])
        with pytest.raises(DomainError):
            dom.diameter

    def test_x0_outside_domain(self):
        with pytest.raises(DomainError):
            LevelSetDomain(CompositeObjective(GlmObjective([[1.0]], "entropy")), [-1.0])


class TestQuadraticModel:
    def test_zero_step_is_exactly_zero(self):
        m = QuadraticModel([1.0], [2.0], [[1.0]], 3.0, ProxTerm.l1(0.5))
        assert m.evaluate(np.zeros(1)) == 0.0

    def test_value_and_sigma(self):
        m = QuadraticModel([0.0, 0.0], [1.0, -1.0], np.diag([2.0, 4.0]), 0.5)
        d = np.array([1.0, 1.0])
        assert m.evaluate(d) == pytest.approx(0.0 + 0.25 * 6.0)
        assert m.with_sigma(2.0).evaluate(d) == pytest.approx(6.0)

    def test_indicator_outside_is_inf(self):
        m = QuadraticModel([0.0], [1.0], [[1.0]], 1.0, ProxTerm.box(-1.0, 1.0))
        assert m.evaluate([-2.0]) == math.inf

    def test_rejects_bad_input(self):
        with pytest.raises(DimensionError):
            QuadraticModel([0.0, 0.0], [1.0, 1.0], np.eye(3), 1.0)
        with pytest.raises(ValueError):
            QuadraticModel([0.0], [1.0], [[1.0]], 0.0)


class TestApproxScheme:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.obj = GlmObjective(rng.standard_normal((12, 4)), "logistic", normalize="l2")
        self.x = rng.standard_normal(4)

    def test_block_diag_keeps_blocks(self):
        H = self.obj.hessian(self.x)
        B = ApproxScheme("block_diag", blocks=2).build(self.obj, self.x)
        assert_array_equal(B[:2, :2], H[:2, :2])
        assert_array_equal(B[:2, 2:], 0.0)

    def test_full_sketch_is_exact(self):
        S = ApproxScheme("sketch", rows=12).build(self.obj, self.x, np.random.default_rng(0))
        assert_allclose(S, self.obj.hessian(self.x), rtol=1e-12)

    def test_sketch_is_seeded(self):
        a = ApproxScheme("sketch", rows=5).build(self.obj, self.x, np.random.default_rng(7))
        b = ApproxScheme("sketch", rows=5).build(self.obj, self.x, np.random.default_rng(7))
        assert_array_equal(a, b)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ApproxScheme("newton")


class TestSolveTrace:
    def _trace(self):
        tr = SolveTrace("demo")
        tr.append(TraceRecord(0, 2.0, 2.0, 1.0, 0.0, 1.0), np.zeros(1))
        tr.append(TraceRecord(1, 1.5, 1.5, 0.5, 0.1, 2.0, rho=0.3, accepted=True), np.ones(1))
        tr.append(TraceRecord(2, 1.5, 1.5, 0.5, 0.2, 4.0, rho=-1.0, accepted=False), np.ones(1))
        return tr

    def test_csv_columns_and_empty_rho(self):
        text = self._trace().to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert rows[1][6] == ""
        assert rows[3][7] == "0"

    def test_iterations_must_increase(self):
        tr = self._trace()
        with pytest.raises(ValueError):
            tr.append(TraceRecord(2, 1.0, 1.0, None, 0.0, 1.0))

    def test_step_factors_skip_rejected(self):
        assert_allclose(self._trace().step_factors(), [0.5])

    def test_json_roundtrip(self):
        d = json.loads(self._trace().to_json())
        assert d["solver"] == "demo"
        assert len(d["records"]) == 3
