"""Linear solves and constrained quadratic subproblems."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .core import INF, NormSpec, QuadraticModel, as_vector, sym_matrix
from .errors import InnerSolverError, NotPSDError, RangeError

RCOND = 1e-12


def psd_solve(H, b, rcond=RCOND, check=True) -> np.ndarray:
    """Minimum-norm solution ``H^+ b`` of a symmetric PSD system.

    Positive definite systems are solved by Cholesky, which stays accurate
    for badly scaled diagonals. Otherwise eigenvalues below
    ``rcond * max_eig`` are treated as zero. With ``check``
    the residual must satisfy ``||H x - b|| <= 1e-8 ||b||``, otherwise ``b``
    is taken to be outside ``range(H)`` and :class:`RangeError` is raised.
    """
    H = sym_matrix(H)
    b = as_vector(b, H.shape[0])
    if np.all(np.diag(H) > 0):
        try:
            return cho_solve(cho_factor(H), b)
        except LinAlgError:
            pass
    w, V = np.linalg.eigh(H)
    top = max(float(w[-1]), 0.0)
    keep = w > rcond * top if top > 0 else np.zeros_like(w, dtype=bool)
    coef = V[:, keep].T @ b
    x = V[:, keep] @ (coef / w[keep])
    if check:
        bn = float(np.linalg.norm(b))
        res = float(np.linalg.norm(H @ x - b))
        if res > 1e-8 * bn:
            raise RangeError(f"right-hand side outside range(H): residual {res:.3e}, |b| {bn:.3e}")
    return x


@dataclass
class CGInfo:
    iterations: int
    residual_norm: float
    converged: bool


def cg_solve(hvp, b, rel_tol=1e-10, max_iter=None, full_output=False):
    """Conjugate gradients on ``H x = b`` with ``H`` given by products.

    Raises :class:`NotPSDError` if ``p^T H p`` is not positive beyond roundoff.
    """
    b = as_vector(b)
    n = b.shape[0]
    max_iter = 10 * n if max_iter is None else int(max_iter)
    x = np.zeros(n)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    bnorm = math.sqrt(rr)
    target = rel_tol * bnorm
    k = 0
    if bnorm == 0.0:
        return (x, CGInfo(0, 0.0, True)) if full_output else x
    while k < max_iter and math.sqrt(rr) > target:
        Hp = np.asarray(hvp(p), dtype=float)
        curv = float(p @ Hp)
        if curv <= 1e-14 * float(p @ p) * max(1.0, bnorm):
            raise NotPSDError(f"non-positive curvature {curv:.3e} at CG iteration {k}")
        alpha = rr / curv
        x += alpha * p
        r -= alpha * Hp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
    info = CGInfo(k, math.sqrt(rr), math.sqrt(rr) <= target)
    return (x, info) if full_output else x


def steihaug_cg(hvp, g, radius, rel_tol=1e-10, max_iter=None):
    """Truncated CG for ``min g.d + 0.5 d.B d`` over ``||d||_2 <= radius``."""
    g = as_vector(g)
    n = g.shape[0]
    max_iter = 10 * n if max_iter is None else int(max_iter)
    z = np.zeros(n)
    r = g.copy()
    d = -r
    target = rel_tol * float(np.linalg.norm(g))
    if np.linalg.norm(r) <= target:
        return z, 0

    def to_boundary(z, d):
        a, b, c = d @ d, 2 * z @ d, z @ z - radius ** 2
        tau = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
        return z + tau * d

    for k in range(max_iter):
        Bd = np.asarray(hvp(d), dtype=float)
        curv = float(d @ Bd)
        if curv <= 0:
            return to_boundary(z, d), k + 1
        alpha = float(r @ r) / curv
        z_next = z + alpha * d
        if np.linalg.norm(z_next) >= radius:
            return to_boundary(z, d), k + 1
        r_next = r + alpha * Bd
        if np.linalg.norm(r_next) <= target:
            return z_next, k + 1
        beta = float(r_next @ r_next) / float(r @ r)
        d = -r_next + beta * d
        z, r = z_next, r_next
    return z, max_iter


@dataclass
class Certificate:
    theta_achieved: float
    method: str
    inner_iters: int = 0
    multiplier: Optional[float] = None
    reference_value: Optional[float] = None


@dataclass
class SubproblemSolution:
    step: np.ndarray
    model_value: float
    certificate: Certificate = field(default_factory=lambda: Certificate(1.0, "none"))


# -- prox of  t*g(anchor + d) + indicator(||d|| <= r)  ------------------------

def _bisect_multiplier(size_of, target, tol=1e-15):
    """Smallest mu >= 0 with size_of(mu) <= target, for nonincreasing size_of."""
    if size_of(0.0) <= target:
        return 0.0
    hi = 1.0
    while size_of(hi) > target:
        hi *= 4.0
        if hi > 1e300:
            raise RangeError("multiplier bracket failed")
    lo = 0.0
    try:
        mu = brentq(lambda m: size_of(m) - target, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                    maxiter=500)
    except ValueError:
        mu = hi
    if size_of(mu) > target:
        # step to the feasible side of the root
        step = max(abs(mu) * 1e-15, 1e-300)
        while size_of(mu) > target and mu < hi:
            mu = min(mu + step, hi)
            step *= 2.0
    return mu


def constraint_prox(prox, anchor, norm: NormSpec, radius):
    """Return ``p(v, t) = argmin_d t*g(anchor+d) + 0.5||d-v||^2`` s.t. ``||d|| <= radius``."""
    anchor = np.asarray(anchor, dtype=float)
    finite = math.isfinite(radius)
    if finite and norm.kind == "metric" and not prox.is_zero:
        raise NotImplementedError("metric trust regions are supported only without a prox term")

    def unconstrained(v, t):
        return prox.prox(anchor + v, t) - anchor

    if not finite:
        return unconstrained

    if norm.kind == "linf":
        if prox.separable:
            return lambda v, t: np.clip(unconstrained(v, t), -radius, radius)
        c, R = prox.center, prox.radius

        def ball_in_box(v, t):
            def d_of(mu):
                return np.clip((v + mu * (c - anchor)) / (1.0 + mu), -radius, radius)

            mu = _bisect_multiplier(lambda m: float(np.linalg.norm(anchor + d_of(m) - c)), R)
            return d_of(mu)

        return ball_in_box

    if norm.kind == "l2":
        def in_ball(v, t):
            def d_of(mu):
                return prox.prox(anchor + v / (1.0 + mu), t / (1.0 + mu)) - anchor

            mu = _bisect_multiplier(lambda m: float(np.linalg.norm(d_of(m))), radius)
            d = d_of(mu)
            nd = float(np.linalg.norm(d))
            if nd > radius:
                d *= radius / nd
            return d

        return in_ball

    # metric norm, zero prox: projection onto an ellipsoid via its multiplier
    M = norm.M

    def in_ellipsoid(v, t):
        if norm(v) <= radius:
            return v.copy()
        w, V = np.linalg.eigh(M)
        vh = V.T @ v

        def d_of(mu):
            return V @ (vh / (1.0 + mu * w))

        mu = _bisect_multiplier(lambda m: norm(d_of(m)), radius)
        return d_of(mu)

    return in_ellipsoid


# -- reference (certification) solvers ---------------------------------------

def _is_diagonal(H) -> bool:
    return not np.any(H - np.diag(np.diag(H)))


def _tr_l2_secular(g, H, sigma, radius):
    """Exact l2 trust-region step for PSD ``sigma*H``; returns (step, multiplier)."""
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return np.zeros_like(g), 0.0
    w, V = np.linalg.eigh(H)
    w = np.maximum(w, 0.0) * sigma
    top = float(w[-1])
    gh = V.T @ g
    keep = w > RCOND * top if top > 0 else np.zeros_like(w, dtype=bool)
    null_part = float(np.linalg.norm(gh[~keep]))
    in_range = null_part <= 1e-10 * gnorm
    if in_range and top > 0:
        interior = -psd_solve(H, g, check=False) / sigma
        if np.linalg.norm(interior) <= radius:
            return interior, 0.0

    def step_of(lam):
        den = w + lam
        out = np.zeros_like(gh)
        ok = (den > 0) if lam > 0 else keep
        out[ok] = -gh[ok] / den[ok]
        return V @ out

    def excess(lam):
        return float(np.linalg.norm(step_of(lam))) - radius

    hi = gnorm / radius
    if in_range and top > 0:
        lo = 0.0
    else:
        lo = hi * 1e-3
        while excess(lo) <= 0 and lo > 1e-300:
            lo *= 1e-3
    if excess(hi) > 0:
        hi *= 2.0
    lam = brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    step = step_of(lam)
    step *= radius / float(np.linalg.norm(step))
    return step, lam


def _separable_exact(model: QuadraticModel, radius):
    """Coordinate-wise exact minimizer for diagonal metrics and separable terms."""
    g, x = model.grad, model.anchor
    b = model.sigma * np.diag(model.metric)
    n = g.shape[0]
    lo = np.full(n, -radius)
    hi = np.full(n, radius)
    prox = model.prox
    box = prox.as_box(n)
    if box is not None:
        lo = np.maximum(lo, box[0] - x)
        hi = np.minimum(hi, box[1] - x)
    step = np.zeros(n)
    pos = b > 0
    if np.any(pos):
        t = 1.0 / b[pos]
        v = -g[pos] * t
        z = x[pos] + v
        if prox.kind == "l1":
            z = np.sign(z) * np.maximum(np.abs(z) - t * prox.lam, 0.0)
        step[pos] = np.clip(z - x[pos], lo[pos], hi[pos])
    lam = prox.lam if prox.kind == "l1" else 0.0
    for i in np.flatnonzero(~pos):
        # linear (+ |.|) in one coordinate: check slopes, then candidate points
        cands = [c for c in (lo[i], hi[i]) if math.isfinite(c)]
        if prox.kind == "l1" and lo[i] <= -x[i] <= hi[i]:
            cands.append(-x[i])
        right_slope = g[i] + lam
        left_slope = g[i] - lam
        if (not math.isfinite(hi[i]) and right_slope < 0) or (not math.isfinite(lo[i]) and left_slope > 0):
            raise RangeError("subproblem is unbounded below along a zero-curvature coordinate")
        if not cands:
            step[i] = 0.0
            continue
        vals = [g[i] * c + lam * abs(x[i] + c) for c in cands]
        step[i] = cands[int(np.argmin(vals))]
    return step


def _prox_gradient(model, prox_h, L, start, accelerate, tol, max_iter, stop=None):
    """(Accelerated) proximal gradient on the model; returns (best_step, iters)."""
    g, H, s = model.grad, model.metric, model.sigma

    def grad_q(d):
        return g + s * (H @ d)

    d = start.copy()
    fd = model.evaluate(d)
    y, t = d.copy(), 1.0
    best, fbest = d.copy(), fd
    it = 0
    for it in range(1, max_iter + 1):
        d_new = prox_h(y - grad_q(y) / L, 1.0 / L)
        f_new = model.evaluate(d_new)
        if not math.isfinite(f_new) or float(np.linalg.norm(d_new)) > 1e12:
            raise RangeError("subproblem appears unbounded below")
        if accelerate and f_new > fd:
            # function-value restart
            y, t = d.copy(), 1.0
            d_new = prox_h(y - grad_q(y) / L, 1.0 / L)
            f_new = model.evaluate(d_new)
        mapping = L * float(np.linalg.norm(d_new - y))
        if accelerate:
            t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            y = d_new + ((t - 1) / t_new) * (d_new - d)
            t = t_new
        else:
            y = d_new
        d, fd = d_new, f_new
        if fd < fbest:
            best, fbest = d.copy(), fd
        if stop is not None and stop(fbest):
            break
        if mapping <= tol:
            break
    return best, it


def _lipschitz(model):
    top = float(np.linalg.eigvalsh(model.metric)[-1]) * model.sigma
    return max(top, 1e-300)


def reference_solve(model: QuadraticModel, norm: NormSpec = None, radius=INF, max_iter=50000):
    """High-accuracy minimizer of the model over ``||d|| <= radius``.

    Returns ``(step, method, iterations, multiplier)``.
    """
    norm = NormSpec.l2() if norm is None else norm
    g, H, sigma = model.grad, model.metric, model.sigma
    finite = math.isfinite(radius)
    if model.prox.is_zero:
        if not finite:
            return -psd_solve(H, g) / sigma, "pinv", 0, 0.0
        if norm.kind == "l2":
            step, lam = _tr_l2_secular(g, H, sigma, radius)
            return step, "secular", 0, lam
        if norm.kind == "metric":
            Lc = np.linalg.cholesky(norm.M)
            Li = np.linalg.inv(Lc)
            y, lam = _tr_l2_secular(Li @ g, sym_matrix(Li @ H @ Li.T), sigma, radius)
            return Li.T @ y, "secular_metric", 0, lam
    one_d = model.dim == 1 and norm.kind != "metric"
    if _is_diagonal(H) and model.prox.separable and (not finite or norm.kind == "linf" or one_d):
        return _separable_exact(model, radius), "separable", 0, None
    prox_h = constraint_prox(model.prox, model.anchor, norm, radius)
    tol = 1e-13 * max(1.0, float(np.linalg.norm(g)))
    step, it = _prox_gradient(model, prox_h, _lipschitz(model), np.zeros_like(g), True, tol, max_iter)
    return step, "fista", it, None


def _theta(q0_minus_q, q0_minus_qstar):
    if q0_minus_qstar <= 0:
        return 1.0
    return float(min(1.0, max(q0_minus_q / q0_minus_qstar, 0.0)))


def solve_prox_subproblem(model: QuadraticModel, norm: NormSpec = None, radius=INF, theta=1.0,
                          max_inner=100000) -> SubproblemSolution:
    """Minimize the model over ``||d|| <= radius`` to multiplicative accuracy ``theta``.

    The achieved accuracy is certified against a high-accuracy reference
    minimum. With ``theta == 1`` the reference minimizer itself is returned;
    otherwise plain proximal gradient runs from ``d = 0`` and stops at the
    first iterate meeting the certificate.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    norm = NormSpec.l2() if norm is None else NormSpec.parse(norm)
    if not radius > 0:
        raise ValueError("radius must be positive")
    ref, method, iters, mult = reference_solve(model, norm, radius)
    q_star = model.evaluate(ref)
    if q_star > 0:
        ref, q_star = np.zeros_like(ref), 0.0
    if theta >= 1.0 or q_star == 0.0:
        return SubproblemSolution(ref, q_star, Certificate(1.0, method, iters, mult, q_star))
    target = theta * q_star
    prox_h = constraint_prox(model.prox, model.anchor, norm, radius)
    step, it = _prox_gradient(model, prox_h, _lipschitz(model), np.zeros_like(ref), False, 0.0,
                              max_inner, stop=lambda f: f <= target)
    q = model.evaluate(step)
    achieved = _theta(-q, -q_star)
    if q > target:
        raise InnerSolverError(f"theta={theta} not reached in {max_inner} inner iterations",
                               best_step=step, theta_achieved=achieved)
    return SubproblemSolution(step, q, Certificate(achieved, "prox_gradient", it, None, q_star))


def solve_tr_subproblem(model: QuadraticModel, norm: NormSpec = None, radius=1.0,
                        inner_cfg=None) -> SubproblemSolution:
    """Trust-region step: the model may carry a zero or indicator prox term only."""
    if not (model.prox.is_zero or model.prox.is_indicator):
        raise ValueError("trust-region subproblem needs a zero or indicator prox term")
    cfg = dict(inner_cfg or {})
    return solve_prox_subproblem(model, norm, radius, theta=cfg.get("theta", 1.0),
                                 max_inner=cfg.get("max_inner", 100000))


def check_sigma_scaling_inequality(model: QuadraticModel, domain, alpha, beta,
                                   tol=1e-8, return_details=False):
    """Check ``min Q^alpha <= (1/(alpha*beta)) min Q^(1/beta)`` over a convex domain.

    ``domain`` is a ``(norm, radius)`` pair bounding the step; the model's own
    prox term (e.g. a box indicator) further restricts it.
    """
    if alpha * beta < 1 - 1e-15:
        raise ValueError("need alpha * beta >= 1")
    norm, radius = domain
    norm = NormSpec.parse(norm)
    lhs = solve_prox_subproblem(model.with_sigma(alpha), norm, radius).model_value
    rhs_min = solve_prox_subproblem(model.with_sigma(1.0 / beta), norm, radius).model_value
    rhs = rhs_min / (alpha * beta)
    ok = lhs <= rhs + tol * max(1.0, abs(rhs))
    if return_details:
        return ok, {"lhs": lhs, "rhs": rhs, "alpha": alpha, "beta": beta}
    return ok
