"""Brute-force and closed-form reference values.

Nothing here calls into ``linalg`` or ``solvers``: models are evaluated from
their raw fields and second derivatives of scalar links are re-derived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SolveTrace
from .errors import DomainError, RateFitError

EPS = np.finfo(float).eps


def _indicator_mask(prox, P):
    """Feasibility of the rows of ``P`` for a box/ball prox term (True if none)."""
    if prox is None or prox.kind in ("zero", "l1"):
        return np.ones(P.shape[0], dtype=bool)
    if prox.kind == "box":
        lo = np.broadcast_to(prox.lo, P.shape[1:])
        hi = np.broadcast_to(prox.hi, P.shape[1:])
        return np.all((P >= lo - 1e-12) & (P <= hi + 1e-12), axis=1)
    diff = P - prox.center
    if prox.norm.kind == "linf":
        size = np.max(np.abs(diff), axis=1)
    else:
        size = np.sqrt(np.sum(diff * diff, axis=1))
    return size <= prox.radius * (1 + 1e-12)


def _model_values(model, D):
    """Model values at each row of ``D`` from the raw model fields."""
    g = np.asarray(model.grad, float)
    H = np.asarray(model.metric, float)
    quad = np.einsum("ij,jk,ik->i", D, H, D)
    vals = D @ g + 0.5 * model.sigma * quad
    prox = model.prox
    if prox is not None and prox.kind == "l1" and prox.lam > 0:
        x0 = np.asarray(model.anchor, float)
        vals = vals + prox.lam * (np.sum(np.abs(x0 + D), axis=1) - np.sum(np.abs(x0)))
    feasible = _indicator_mask(prox, np.asarray(model.anchor, float) + D)
    return np.where(feasible, vals, np.inf)


def grid_minimize_quadratic(model, domain_spec, resolution=1e-3):
    """Exhaustive grid minimum of a quadratic model over a bounded step set.

    Parameters
    ----------
    model : QuadraticModel
    domain_spec : dict
        ``lo``/``hi`` bound the step coordinatewise (required); optional
        ``norm`` (``"l2"`` or ``"linf"``) and ``radius`` add a norm ball.
        The model's box/ball indicator restricts the grid further.
    resolution : float
        Grid spacing (the grid always contains both box endpoints).

    Returns
    -------
    (point, value)
    """
    n = len(model.grad)
    if n > 3:
        raise ValueError("grid oracle supports dim <= 3")
    lo = np.broadcast_to(np.asarray(domain_spec["lo"], float), (n,))
    hi = np.broadcast_to(np.asarray(domain_spec["hi"], float), (n,))
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("grid oracle needs a bounded box")
    axes = [np.linspace(lo[i], hi[i], max(int(math.ceil((hi[i] - lo[i]) / resolution)), 1) + 1)
            for i in range(n)]
    D = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    vals = _model_values(model, D)
    radius = domain_spec.get("radius", math.inf)
    if math.isfinite(radius):
        kind = domain_spec.get("norm", "l2")
        size = np.max(np.abs(D), axis=1) if kind == "linf" else np.sqrt(np.sum(D * D, axis=1))
        vals = np.where(size <= radius * (1 + 1e-12), vals, np.inf)
    i = int(np.argmin(vals))
    if not np.isfinite(vals[i]):
        raise ValueError("no feasible grid point")
    return D[i].copy(), float(vals[i])


def model_lipschitz(model, domain_spec) -> float:
    """Lipschitz constant of the model's smooth part plus l1 term on the box."""
    n = len(model.grad)
    lo = np.broadcast_to(np.asarray(domain_spec["lo"], float), (n,))
    hi = np.broadcast_to(np.asarray(domain_spec["hi"], float), (n,))
    r = float(np.sqrt(np.sum(np.maximum(np.abs(lo), np.abs(hi)) ** 2)))
    top = float(np.max(np.abs(np.linalg.eigvalsh(np.asarray(model.metric, float)))))
    L = float(np.linalg.norm(model.grad)) + model.sigma * top * r
    if model.prox is not None and model.prox.kind == "l1":
        L += model.prox.lam * math.sqrt(n)
    return L


@dataclass
class FiniteDiffReport:
    grad_err: float
    hess_err: float


def finite_diff_check(obj, x, h=1e-6) -> FiniteDiffReport:
    """Relative errors of central-difference gradient and Hessian against the analytic ones.

    Raises ``DomainError`` when a probe point would leave the objective's
    declared ``domain_box`` or its natural domain.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    box = getattr(obj, "domain_box", None)
    if box is not None:
        lo, hi = box
        if np.any(x - h < lo) or np.any(x + h > hi):
            raise DomainError("finite-difference probe leaves the declared domain")
    E = np.eye(n) * h
    g = np.asarray(obj.gradient(x), float)
    H = np.asarray(obj.hessian(x), float)
    g_fd = np.array([(obj.value(x + E[i]) - obj.value(x - E[i])) / (2 * h) for i in range(n)])
    H_fd = np.array([(obj.gradient(x + E[i]) - obj.gradient(x - E[i])) / (2 * h) for i in range(n)])
    H_fd = 0.5 * (H_fd + H_fd.T)
    grad_err = float(np.linalg.norm(g_fd - g) / max(1.0, np.linalg.norm(g)))
    hess_err = float(np.linalg.norm(H_fd - H) / max(1.0, np.linalg.norm(H)))
    return FiniteDiffReport(grad_err, hess_err)


@dataclass
class RateFit:
    """Per-step contraction factors of the optimality gap."""

    per_step_factors: np.ndarray
    geometric_factor: float
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return {"per_step_factors": [float(v) for v in self.per_step_factors],
                "geometric_factor": float(self.geometric_factor),
                "r_squared": float(self.r_squared), "n_points": int(self.n_points)}


def noise_floor(f_star) -> float:
    return 1e2 * EPS * max(1.0, abs(float(f_star)))


def fit_rate(trace, f_star=None, tail_fraction=0.5, min_points=5) -> RateFit:
    """Gap contraction factors of a trace (or of a raw gap sequence).

    Gaps at or below ``1e2 * eps * max(1, |f_star|)`` are noise and end the
    usable prefix. ``geometric_factor`` is the largest factor over the last
    ``tail_fraction`` of the steps.
    """
    if isinstance(trace, SolveTrace):
        if f_star is None:
            f_star = trace.meta.get("f_star")
        if f_star is None:
            raise RateFitError("f_star unknown")
        gaps = trace.column("F", accepted_only=True) - float(f_star)
    else:
        gaps = np.asarray(trace, dtype=float)
        f_star = 0.0 if f_star is None else f_star
    floor = noise_floor(f_star)
    usable = []
    for gval in gaps:
        if not (np.isfinite(gval) and gval > floor):
            break
        usable.append(gval)
    gaps = np.array(usable)
    if gaps.size < min_points:
        raise RateFitError(f"only {gaps.size} gaps above the noise floor {floor:.2e}; need {min_points}")
    factors = gaps[1:] / gaps[:-1]
    start = min(int(math.floor(len(factors) * (1 - tail_fraction))), len(factors) - 1)
    geometric = float(np.max(factors[start:]))
    t = np.arange(gaps.size, dtype=float)
    y = np.log(gaps)
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(factors, geometric, r2, int(gaps.size))


def _second_derivative(kind, u, k=2, q=1.5):
    if kind == "logistic":
        e = np.exp(-np.abs(u))
        return e / (1.0 + e) ** 2
    if kind == "exp_shift":
        return np.exp(u)
    if kind == "neg_exp_linear":
        return np.exp(-u)
    if kind == "entropy":
        return 1.0 / u
    if kind == "robust_q":
        return q * (q - 1) * u ** (q - 2)
    if kind == "power_even":
        return 2 * k * (2 * k - 1) * u ** (2 * k - 2)
    raise ValueError(f"unknown link {kind!r}")


def scalar_stability_exact(link, a, b) -> float:
    """``max phi'' / min phi''`` on ``[a, b]`` for a scalar link.

    Uses the shape of ``phi''``: monotone links are read at the endpoints,
    the logistic peak sits at 0, and even powers are monotone in ``|u|``.
    """
    if not a < b:
        raise ValueError("need a < b")
    kind = link.kind if hasattr(link, "kind") else str(link)
    k = getattr(link, "k", 2)
    q = getattr(link, "q", 1.5)
    if kind in ("entropy", "robust_q") and a <= 0:
        raise DomainError(f"{kind} needs a > 0")
    if kind == "power_even":
        if k == 1:
            return 1.0
        if a <= 0 <= b:
            raise ValueError("second derivative vanishes at 0: stability undefined")
    if kind in ("logistic", "power_even"):
        near = 0.0 if a <= 0 <= b else (a if abs(a) < abs(b) else b)
        far = a if abs(a) > abs(b) else b
        hi_u, lo_u = (near, far) if kind == "logistic" else (far, near)
    else:
        ends = np.array([a, b], float)
        vals = _second_derivative(kind, ends, k, q)
        hi_u, lo_u = ends[int(np.argmax(vals))], ends[int(np.argmin(vals))]
    top = float(_second_derivative(kind, np.array(hi_u, float), k, q))
    bottom = float(_second_derivative(kind, np.array(lo_u, float), k, q))
    if not bottom > 0:
        raise ValueError("second derivative vanishes on the interval")
    return top / bottom
