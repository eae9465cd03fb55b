"""Newton-type solvers with stepsize ``1/sigma``, trust regions and backtracking."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (INF, ApproxScheme, CompositeObjective, NormSpec, QuadraticModel, SolveTrace,
                   TraceRecord, as_vector)
from .errors import (DescentViolation, DomainError, InnerSolverError, RangeError, SigmaWarning,
                     UnboundedEta)
from .linalg import cg_solve, psd_solve, solve_prox_subproblem, solve_tr_subproblem, steihaug_cg
from .stability import estimate_eta

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class BacktrackingParams:
    """Acceptance thresholds and sigma multipliers for the adaptive scheme."""

    sigma0: float = 1.0
    zeta1: float = 0.9
    zeta2: float = 0.1
    eta1: float = 2.0
    eta2: float = 2.0
    ceiling_factor: float = 1e6

    def __post_init__(self):
        if not (0 <= self.zeta2 < self.zeta1 < 1):
            raise ValueError("need 0 <= zeta2 < zeta1 < 1")
        if not (self.eta2 >= self.eta1 > 1):
            raise ValueError("need eta2 >= eta1 > 1")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")


@dataclass
class SolverConfig:
    """Settings shared by all solvers.

    ``decrement_tol`` stops a run once ``||dx||_H`` falls below it; set it
    to 0 to rely on ``gap_tol`` and ``max_iter`` alone.
    """

    sigma: float = 1.0
    radius: float = INF
    norm: NormSpec = field(default_factory=NormSpec.l2)
    theta: float = 1.0
    max_iter: int = 100
    gap_tol: float = 1e-12
    decrement_tol: float = 1e-9
    approx_scheme: ApproxScheme = field(default_factory=ApproxScheme)
    backtracking: Optional[BacktrackingParams] = None
    gamma: float = 1.0
    seed: int = 0
    f_star: Optional[float] = None
    declared_c: Optional[float] = None
    monitor_eta: bool = False
    keep_hessians: bool = False

    def __post_init__(self):
        self.norm = NormSpec.parse(self.norm)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")

    def describe(self) -> dict:
        d = {
            "sigma": self.sigma, "radius": self.radius, "norm": repr(self.norm), "theta": self.theta,
            "max_iter": self.max_iter, "gap_tol": self.gap_tol, "decrement_tol": self.decrement_tol,
            "approx_scheme": self.approx_scheme.describe(), "gamma": self.gamma, "seed": self.seed,
        }
        if self.backtracking is not None:
            d["backtracking"] = dict(self.backtracking.__dict__)
        return d


class _Recorder:
    """Builds the trace and applies the shared stopping rules."""

    def __init__(self, name, comp: CompositeObjective, cfg: SolverConfig):
        self.comp = comp
        self.cfg = cfg
        self.f_star = cfg.f_star if cfg.f_star is not None else comp.F_star
        self.trace = SolveTrace(solver=name, meta={"config": cfg.describe(), "f_star": self.f_star})
        self.t0 = time.perf_counter()

    def values(self, x):
        try:
            f = self.comp.smooth.value(x)
        except DomainError:
            f = INF
        return f, self.comp.value(x)

    def gap(self, F):
        if self.f_star is None or not math.isfinite(F):
            return None
        return F - self.f_star

    def record(self, it, x, sigma, step_norm=0.0, rho=None, accepted=True, theta=None,
               decrement=None, H=None, values=None):
        f, F = self.values(x) if values is None else values
        rec = TraceRecord(it, f, F, self.gap(F), float(step_norm), float(sigma), rho, bool(accepted),
                          time.perf_counter() - self.t0, theta, decrement)
        self.trace.append(rec, x, H if self.cfg.keep_hessians else None)
        return rec

    def converged(self, rec, decrement=None):
        if rec.gap is not None and rec.gap <= self.cfg.gap_tol:
            self.trace.message = "gap below tolerance"
            return True
        if decrement is not None and decrement <= self.cfg.decrement_tol:
            self.trace.message = "Newton decrement below tolerance"
            return True
        return False

    def finish(self, status=None):
        if status is not None:
            self.trace.status = status
        elif self.trace.status == "running":
            self.trace.status = "max_iter"
        return self.trace


def _check_sigma(cfg, required, what):
    if required is not None and cfg.sigma < required:
        warnings.warn(f"sigma={cfg.sigma:g} is below {what}={required:g}; the rate guarantee "
                      "does not apply", SigmaWarning, stacklevel=3)


def _decrement(H, step):
    return math.sqrt(max(float(step @ H @ step), 0.0))


def _smooth_only(comp, name):
    if not comp.nonsmooth.is_zero:
        raise ValueError(f"{name} handles smooth objectives only")


def exact_newton(obj, x0, cfg: SolverConfig = None) -> SolveTrace:
    """Damped Newton iteration ``x <- x - (1/sigma) H^+ grad``.

    A step that increases the objective raises ``DescentViolation`` only if
    ``cfg.declared_c`` is set and ``sigma >= declared_c``; otherwise the run
    continues, since small sigma is allowed to misbehave.
    """
    cfg = SolverConfig() if cfg is None else cfg
    comp = CompositeObjective.wrap(obj)
    _smooth_only(comp, "exact_newton")
    _check_sigma(cfg, cfg.declared_c, "the declared stability constant")
    rec = _Recorder("exact_newton", comp, cfg)
    smooth = comp.smooth
    x = as_vector(x0, comp.dim)
    last = rec.record(0, x, cfg.sigma)
    if rec.converged(last):
        return rec.finish("converged")
    for t in range(1, cfg.max_iter + 1):
        g, H = smooth.gradient(x), smooth.hessian(x)
        try:
            step = -psd_solve(H, g) / cfg.sigma
        except RangeError as exc:
            rec.trace.message = str(exc)
            return rec.finish("numerical_failure")
        dec = _decrement(H, step)
        x_new = x + step
        with np.errstate(over="ignore", invalid="ignore"):
            vals = rec.values(x_new)
        if not math.isfinite(vals[1]):
            rec.record(t, x_new, cfg.sigma, np.linalg.norm(step), accepted=False, decrement=dec,
                       values=vals)
            rec.trace.message = "iterate left the domain"
            return rec.finish("domain_violation")
        if (vals[1] > last.F + 1e-12 * max(1.0, abs(last.F)) and cfg.declared_c is not None
                and cfg.sigma >= cfg.declared_c):
            raise DescentViolation(f"objective increased at iteration {t} with sigma >= c; "
                                   "the declared constant is too small")
        x = x_new
        last = rec.record(t, x, cfg.sigma, np.linalg.norm(step), decrement=dec, H=H, values=vals)
        if rec.converged(last, dec):
            return rec.finish("converged")
    return rec.finish()


def trust_region_newton(obj, x0, cfg: SolverConfig = None) -> SolveTrace:
    """Newton steps restricted to ``||dx|| <= radius`` in ``cfg.norm``.

    The objective may carry a box or ball indicator, which the subproblem
    respects.
    """
    cfg = SolverConfig(radius=1.0) if cfg is None else cfg
    comp = CompositeObjective.wrap(obj)
    if not (comp.nonsmooth.is_zero or comp.nonsmooth.is_indicator):
        raise ValueError("trust_region_newton needs a zero or indicator nonsmooth term")
    if not math.isfinite(cfg.radius):
        warnings.warn("infinite trust radius: this is plain damped Newton", SigmaWarning, stacklevel=2)
    _check_sigma(cfg, cfg.declared_c, "d(r)")
    rec = _Recorder("trust_region_newton", comp, cfg)
    smooth = comp.smooth
    x = as_vector(x0, comp.dim)
    if not comp.nonsmooth.contains(x):
        raise DomainError("x0 is outside the constraint set")
    last = rec.record(0, x, cfg.sigma)
    if rec.converged(last):
        return rec.finish("converged")
    for t in range(1, cfg.max_iter + 1):
        g, H = smooth.gradient(x), smooth.hessian(x)
        model = QuadraticModel(x, g, H, cfg.sigma, comp.nonsmooth)
        try:
            sol = solve_tr_subproblem(model, cfg.norm, cfg.radius, {"theta": cfg.theta})
        except InnerSolverError as exc:
            exc.trace = rec.finish("numerical_failure")
            raise
        except RangeError as exc:
            rec.trace.message = str(exc)
            return rec.finish("numerical_failure")
        step = sol.step
        dec = _decrement(H, step)
        x = x + step
        last = rec.record(t, x, cfg.sigma, cfg.norm(step), theta=sol.certificate.theta_achieved,
                          decrement=dec, H=H)
        if not math.isfinite(last.F):
            rec.trace.message = "iterate left the domain"
            return rec.finish("domain_violation")
        if rec.converged(last, dec):
            return rec.finish("converged")
    return rec.finish()


def _hessian_free_step(smooth, x, g, cfg):
    hvp = lambda v: cfg.sigma * smooth.hvp(x, v)  # noqa: E731
    if math.isfinite(cfg.radius):
        if cfg.norm.kind != "l2":
            raise ValueError("hessian_free trust regions support the l2 norm only")
        step, _ = steihaug_cg(hvp, g, cfg.radius, rel_tol=cfg.approx_scheme.cg_tol)
        return step
    return cg_solve(hvp, -g, rel_tol=cfg.approx_scheme.cg_tol)


def approx_prox_newton(comp, x0, cfg: SolverConfig = None) -> SolveTrace:
    """Proximal Newton with an approximate metric and inexact subproblem solves.

    Each iteration builds ``H_t`` from ``cfg.approx_scheme``, minimizes
    ``<g, dx> + sigma/2 ||dx||^2_{H_t} + g(x + dx)`` over ``||dx|| <= radius``
    to accuracy ``theta`` and takes the full step. With ``cfg.monitor_eta``
    the metric quality along the realized steps is stored in
    ``trace.meta["eta"]``.
    """
    cfg = SolverConfig() if cfg is None else cfg
    comp = CompositeObjective.wrap(comp)
    rec = _Recorder("approx_prox_newton", comp, cfg)
    smooth = comp.smooth
    scheme = cfg.approx_scheme
    rng = np.random.default_rng(cfg.seed)
    if scheme.kind == "hessian_free" and not comp.nonsmooth.is_zero:
        raise ValueError("hessian_free needs a smooth objective")
    x = as_vector(x0, comp.dim)
    if not math.isfinite(comp.value(x)):
        raise DomainError("x0 is outside the domain")
    last = rec.record(0, x, cfg.sigma)
    steps, metrics = [], []
    status = None
    if rec.converged(last):
        status = "converged"
    for t in range(1, cfg.max_iter + 1):
        if status is not None:
            break
        g = smooth.gradient(x)
        theta = None
        if scheme.kind == "hessian_free":
            step = _hessian_free_step(smooth, x, g, cfg)
            Ht = None
            dec = math.sqrt(max(float(step @ smooth.hvp(x, step)), 0.0))
        else:
            Ht = scheme.build(smooth, x, rng)
            model = QuadraticModel(x, g, Ht, cfg.sigma, comp.nonsmooth)
            try:
                sol = solve_prox_subproblem(model, cfg.norm, cfg.radius, cfg.theta)
            except InnerSolverError as exc:
                exc.trace = rec.finish("numerical_failure")
                raise
            except RangeError as exc:
                rec.trace.message = str(exc)
                status = "numerical_failure"
                break
            step, theta = sol.step, sol.certificate.theta_achieved
            dec = _decrement(Ht, step)
        steps.append((x.copy(), x + step))
        metrics.append(Ht)
        x = x + step
        last = rec.record(t, x, cfg.sigma, cfg.norm(step), theta=theta, decrement=dec, H=Ht)
        if not math.isfinite(last.F):
            rec.trace.message = "iterate left the domain"
            status = "domain_violation"
            break
        if rec.converged(last, dec):
            status = "converged"
    trace = rec.finish(status)
    if cfg.monitor_eta and steps:
        moving = [(s, H) for s, H in zip(steps, metrics) if np.any(s[1] != s[0])]
        if moving and scheme.kind != "hessian_free":
            try:
                rep = estimate_eta(smooth, [H for _, H in moving], [s for s, _ in moving])
                trace.meta["eta"] = rep.estimate
                trace.meta["eta_report"] = rep.to_dict()
            except UnboundedEta as exc:
                trace.meta["eta"] = None
                trace.meta["eta_warning"] = str(exc)
        elif scheme.kind == "hessian_free":
            trace.meta["eta"] = 1.0
    return trace


def backtracking_newton(comp, x0, cfg: SolverConfig = None) -> SolveTrace:
    """Adaptive-sigma Newton: accept or reject each step by actual/predicted decrease.

    ``rho < zeta2`` rejects the step and multiplies sigma by ``eta2``;
    ``zeta2 <= rho <= zeta1`` accepts with sigma unchanged; ``rho > zeta1``
    accepts and divides sigma by ``eta1``. Rejected iterations keep ``x``.
    """
    cfg = SolverConfig(backtracking=BacktrackingParams()) if cfg is None else cfg
    bt = cfg.backtracking or BacktrackingParams()
    comp = CompositeObjective.wrap(comp)
    rec = _Recorder("backtracking_newton", comp, cfg)
    smooth = comp.smooth
    x = as_vector(x0, comp.dim)
    F = comp.value(x)
    if not math.isfinite(F):
        raise DomainError("x0 is outside the domain")
    sigma = bt.sigma0
    ceiling = bt.ceiling_factor * bt.sigma0
    last = rec.record(0, x, sigma)
    if rec.converged(last):
        return rec.finish("converged")
    g = H = None
    n_rejected = 0
    for t in range(1, cfg.max_iter + 1):
        if g is None:
            g, H = smooth.gradient(x), cfg.approx_scheme.build(smooth, x, np.random.default_rng([cfg.seed, t]))
        model = QuadraticModel(x, g, H, sigma, comp.nonsmooth)
        try:
            sol = solve_prox_subproblem(model, cfg.norm, cfg.radius, cfg.theta)
        except RangeError as exc:
            rec.trace.message = str(exc)
            return rec.finish("numerical_failure")
        step = sol.step
        predicted = sol.model_value
        dec = _decrement(H, step)
        if not np.any(step):
            last = rec.record(t, x, sigma, 0.0, rho=None, accepted=True, decrement=0.0, values=(last.f, F))
            rec.trace.message = "stationary point: zero step"
            return rec.finish("converged")
        x_new = x + step
        with np.errstate(over="ignore", invalid="ignore"):
            vals = rec.values(x_new)
        if predicted >= 0:
            rho = None
            rec.trace.meta.setdefault("diagnostics", []).append(
                f"iteration {t}: model predicts no decrease; treated as unsuccessful")
        else:
            actual = vals[1] - F
            rho = actual / predicted if math.isfinite(actual) else -INF
        sigma_used = sigma
        if rho is None or rho < bt.zeta2:
            accepted = False
            sigma = sigma * bt.eta2
        else:
            accepted = True
            if rho > bt.zeta1:
                sigma = sigma / bt.eta1
        if accepted:
            x, F = x_new, vals[1]
            g = None
            last = rec.record(t, x, sigma_used, cfg.norm(step), rho=rho, accepted=True,
                              theta=sol.certificate.theta_achieved, decrement=dec, H=H, values=vals)
            if rec.converged(last, dec):
                return rec.finish("converged")
        else:
            n_rejected += 1
            rec.record(t, x, sigma_used, cfg.norm(step), rho=rho, accepted=False,
                       theta=sol.certificate.theta_achieved, decrement=dec, values=(last.f, F))
            if sigma > ceiling:
                rec.trace.message = f"sigma exceeded the ceiling {ceiling:g}"
                return rec.finish("numerical_failure")
        rec.trace.meta["n_rejected"] = n_rejected
    rec.trace.meta["n_rejected"] = n_rejected
    return rec.finish()


def affine_invariant_tr(comp, x0, gamma=None, cfg: SolverConfig = None) -> SolveTrace:
    """Minimize ``<g, y-x> + (gamma sigma/2)||y-x||_H^2`` over the whole domain, then
    move a fraction ``gamma`` of the way to the minimizer ``s``.

    Iterates are convex combinations of domain points, so they stay feasible.
    """
    cfg = SolverConfig() if cfg is None else cfg
    gamma = cfg.gamma if gamma is None else float(gamma)
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    comp = CompositeObjective.wrap(comp)
    if not comp.nonsmooth.is_indicator:
        raise ValueError("affine_invariant_tr needs a box or ball indicator domain")
    rec = _Recorder("affine_invariant_tr", comp, cfg)
    rec.trace.meta["gamma"] = gamma
    smooth = comp.smooth
    x = as_vector(x0, comp.dim)
    if not comp.nonsmooth.contains(x):
        raise DomainError("x0 is outside the domain")
    last = rec.record(0, x, cfg.sigma)
    if rec.converged(last):
        return rec.finish("converged")
    for t in range(1, cfg.max_iter + 1):
        g, H = smooth.gradient(x), smooth.hessian(x)
        model = QuadraticModel(x, g, H, gamma * cfg.sigma, comp.nonsmooth)
        try:
            sol = solve_prox_subproblem(model, cfg.norm, INF, cfg.theta)
        except InnerSolverError as exc:
            exc.trace = rec.finish("numerical_failure")
            raise
        except RangeError as exc:
            rec.trace.message = str(exc)
            return rec.finish("numerical_failure")
        step = sol.step if gamma == 1 else gamma * sol.step
        dec = _decrement(H, step)
        x = x + step
        last = rec.record(t, x, cfg.sigma, cfg.norm(step), theta=sol.certificate.theta_achieved,
                          decrement=dec, H=H)
        if rec.converged(last, dec):
            return rec.finish("converged")
    return rec.finish()


def optimal_radius(d_curve, r_grid) -> float:
    """Grid minimizer of ``d(r)^2 / r``.

    ``d_curve`` is a callable or an array of values aligned with ``r_grid``.
    Ties go to the larger radius.
    """
    r = np.asarray(r_grid, dtype=float)
    if r.ndim != 1 or r.size == 0 or np.any(r <= 0):
        raise ValueError("r_grid must be a non-empty vector of positive radii")
    d = np.array([d_curve(ri) for ri in r], float) if callable(d_curve) else np.asarray(d_curve, float)
    if d.shape != r.shape:
        raise ValueError("d_curve values must align with r_grid")
    score = d ** 2 / r
    best = np.flatnonzero(score <= score.min() * (1 + 1e-12))
    return float(r[best[-1]])


def gradient_descent_baseline(comp, x0, step, max_iter=1000, gap_tol=1e-12, f_star=None) -> SolveTrace:
    """Proximal gradient with a fixed step, for comparison runs."""
    if not step > 0:
        raise ValueError("step must be positive")
    comp = CompositeObjective.wrap(comp)
    cfg = SolverConfig(sigma=1.0 / step, max_iter=max_iter, gap_tol=gap_tol, f_star=f_star,
                       decrement_tol=0.0)
    rec = _Recorder("gradient_descent", comp, cfg)
    x = as_vector(x0, comp.dim)
    last = rec.record(0, x, cfg.sigma)
    if rec.converged(last):
        return rec.finish("converged")
    for t in range(1, max_iter + 1):
        x_new = comp.nonsmooth.prox(x - step * comp.smooth.gradient(x), step)
        dx = x_new - x
        x = x_new
        last = rec.record(t, x, cfg.sigma, float(np.linalg.norm(dx)))
        if rec.converged(last) or not np.any(dx):
            return rec.finish("converged")
    return rec.finish()


def golden_section(phi, a, b, tol=1e-12, max_iter=500):
    """Minimize a unimodal ``phi`` on ``[a, b]``; ties keep the left point."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = phi(d)
    return (c, fc) if fc <= fd else (d, fd)


def exact_line_search_newton(obj, x0, cfg: SolverConfig = None, alpha_max=1.0) -> SolveTrace:
    """Newton direction with the step length minimized over ``[0, alpha_max]``."""
    cfg = SolverConfig() if cfg is None else cfg
    comp = CompositeObjective.wrap(obj)
    _smooth_only(comp, "exact_line_search_newton")
    rec = _Recorder("exact_line_search_newton", comp, cfg)
    smooth = comp.smooth
    x = as_vector(x0, comp.dim)
    last = rec.record(0, x, 1.0)
    if rec.converged(last):
        return rec.finish("converged")
    alphas = []

    def phi_of(x, d):
        def phi(a):
            with np.errstate(over="ignore", invalid="ignore"):
                v = comp.value(x + a * d)
            return v if math.isfinite(v) else INF
        return phi

    for t in range(1, cfg.max_iter + 1):
        g, H = smooth.gradient(x), smooth.hessian(x)
        try:
            d = -psd_solve(H, g)
        except RangeError as exc:
            rec.trace.message = str(exc)
            return rec.finish("numerical_failure")
        phi = phi_of(x, d)
        alpha, val = golden_section(phi, 0.0, alpha_max)
        if phi(alpha_max) <= val:
            alpha = alpha_max
        alphas.append(alpha)
        step = alpha * d
        x = x + step
        dec = _decrement(H, step)
        last = rec.record(t, x, 1.0 / alpha if alpha > 0 else INF, np.linalg.norm(step), decrement=dec)
        if rec.converged(last, dec):
            rec.trace.meta["alphas"] = alphas
            return rec.finish("converged")
    rec.trace.meta["alphas"] = alphas
    return rec.finish()


def full_step_newton(obj, x0, alpha=1.0, max_iter=1) -> SolveTrace:
    """Undamped Newton with fixed step ``alpha``; no safeguards at all."""
    cfg = SolverConfig(sigma=1.0 / alpha, max_iter=max_iter, decrement_tol=0.0)
    return exact_newton(obj, x0, cfg)


def bootstrap_optimum(comp, x0, max_iter=500):
    """Reference optimum from a long backtracking run; returns ``(F_star, x_star)``.

    The run ignores any recorded optimum and stops on a tiny Newton decrement.
    """
    comp = CompositeObjective.wrap(comp)
    cfg = SolverConfig(max_iter=max_iter, gap_tol=-INF, decrement_tol=1e-15,
                       backtracking=BacktrackingParams(), f_star=0.0)
    saved = comp.F_star
    comp.F_star = None
    try:
        trace = backtracking_newton(comp, x0, cfg)
    finally:
        comp.F_star = saved
    x = trace.x_final
    # polish with full proximal Newton steps while they keep decreasing F
    F = comp.value(x)
    for _ in range(20):
        model = QuadraticModel(x, comp.smooth.gradient(x), comp.smooth.hessian(x), 1.0, comp.nonsmooth)
        step = solve_prox_subproblem(model).step
        F_new = comp.value(x + step)
        if not F_new < F:
            break
        x, F = x + step, F_new
    return float(F), x


def with_updates(cfg: SolverConfig, **changes) -> SolverConfig:
    """Copy of ``cfg`` with fields replaced."""
    return replace(cfg, **changes)
