"""Estimators and closed-form bounds for Hessian stability constants.

Every estimator maximizes the ratio ``||d||^2_{H(v)} / ||d||^2_{H(u)}`` over a
finite set of point pairs, so the result is a lower bound on the true
constant. One-dimensional problems default to an exhaustive grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import maximum_filter1d

from .core import CompositeObjective, LevelSetDomain, NormSpec, as_vector
from .errors import InsufficientSamples, UnboundedEta

MIN_PAIRS = 10
CONDITIONS = (
    "lipschitz_grad_strongly_convex",
    "lipschitz_hess_strongly_convex",
    "self_concordant_lipschitz_grad",
    "quasi_self_concordant",
)


def analytic_bound(condition, D=0.0, **constants) -> float:
    """Stability constant implied by a smoothness/convexity condition.

    Parameters
    ----------
    condition : str
        One of ``CONDITIONS``.
    D : float
        Diameter of the region.
    **constants
        ``L``, ``mu``, ``M`` or ``k`` as needed by the condition.

    Examples
    --------
    >>> analytic_bound("lipschitz_grad_strongly_convex", L=10, mu=2)
    5.0
    """
    if D < 0:
        raise ValueError("D must be non-negative")
    for name, val in constants.items():
        if not val > 0:
            raise ValueError(f"constant {name} must be positive")

    def need(*names):
        missing = [n for n in names if n not in constants]
        if missing:
            raise ValueError(f"{condition} needs {', '.join(missing)}")
        return [float(constants[n]) for n in names]

    if condition == "lipschitz_grad_strongly_convex":
        L, mu = need("L", "mu")
        return L / mu
    if condition == "lipschitz_hess_strongly_convex":
        M, mu = need("M", "mu")
        return 1.0 + M * D / mu
    if condition == "self_concordant_lipschitz_grad":
        k, L = need("k", "L")
        return (1.0 + k * D * L) ** 2
    if condition == "quasi_self_concordant":
        (k,) = need("k")
        return math.exp(k * D)
    raise ValueError(f"unknown condition {condition!r}")


@dataclass
class StabilityBound:
    """A declared stability bound attached to an objective."""

    condition: str
    D: float = 0.0
    constants: dict = field(default_factory=dict)
    value: Optional[float] = None

    def bound(self) -> float:
        if self.condition == "closed_form":
            return float(self.value)
        return analytic_bound(self.condition, self.D, **self.constants)

    def describe(self) -> dict:
        return {"condition": self.condition, "D": self.D, "constants": dict(self.constants),
                "bound": self.bound()}


@dataclass
class StabilityReport:
    """Result of one stability estimate."""

    constant_kind: str
    estimate: float
    witness_pair: Optional[tuple]
    samples_used: int
    analytic_bound: Optional[float] = None
    parameter: Optional[float] = None
    degenerate_pairs: int = 0
    mode: str = "sample"
    extra: dict = field(default_factory=dict)

    @property
    def within_bound(self) -> Optional[bool]:
        if self.analytic_bound is None:
            return None
        return self.estimate <= self.analytic_bound * (1 + 1e-6)

    def to_dict(self) -> dict:
        w = None
        if self.witness_pair is not None:
            w = [np.asarray(p, dtype=float).tolist() for p in self.witness_pair]
        d = {
            "constant_kind": self.constant_kind,
            "estimate": float(self.estimate),
            "witness_pair": w,
            "samples_used": int(self.samples_used),
            "analytic_bound": self.analytic_bound,
            "parameter": self.parameter,
            "degenerate_pairs": int(self.degenerate_pairs),
            "mode": self.mode,
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# -- regions and pair generation ---------------------------------------------

class _Region:
    """Where pairs live: a level set, or a plain box checked for finiteness."""

    def __init__(self, obj, dom: Optional[LevelSetDomain], box):
        self.comp = CompositeObjective.wrap(obj) if dom is None else dom.objective
        self.smooth = self.comp.smooth
        self.dom = dom
        if box is not None:
            lo, hi = box
            n = self.smooth.dim
            self.lo = np.broadcast_to(np.asarray(lo, float), (n,)).copy()
            self.hi = np.broadcast_to(np.asarray(hi, float), (n,)).copy()
        elif dom is not None and dom.dim == 1 and dom.box is None and not dom.objective.nonsmooth.is_indicator:
            # exact interval from the ray extents, no padding
            P = dom.boundary_points()
            self.lo, self.hi = P.min(axis=0), P.max(axis=0)
        elif dom is not None:
            self.lo, self.hi = (np.asarray(b, float) for b in dom.bounding_box())
        else:
            db = getattr(self.smooth, "domain_box", None)
            if db is None:
                raise ValueError("need a LevelSetDomain or an explicit box")
            self.lo, self.hi = (np.asarray(b, float) for b in db)
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("sampling box must be finite")

    @property
    def dim(self):
        return self.smooth.dim

    def contains_many(self, X):
        if self.dom is not None:
            ok = self.dom.contains_many(X)
            return ok & np.all((X >= self.lo) & (X <= self.hi), axis=1)
        with np.errstate(all="ignore"):
            return np.isfinite(self.smooth.values(X))

    def grid(self, resolution):
        lo, hi = float(self.lo[0]), float(self.hi[0])
        n = max(int(math.ceil((hi - lo) / resolution)), 1) + 1
        x = np.linspace(lo, hi, n)[:, None]
        return x[self.contains_many(x)]

    def point_stream(self, n_points, seed, batch=4096, max_draw_factor=200):
        """First ``n_points`` points of a seeded stream of uniform in-region draws."""
        rng = np.random.default_rng(seed)
        out, have, drawn = [], 0, 0
        limit = max_draw_factor * max(n_points, batch)
        while have < n_points and drawn < limit:
            X = self.lo + (self.hi - self.lo) * rng.random((batch, self.dim))
            drawn += batch
            X = X[self.contains_many(X)]
            out.append(X)
            have += X.shape[0]
        P = np.vstack(out) if out else np.empty((0, self.dim))
        return P[:n_points]


def _resolve_mode(region, mode, pairs):
    if pairs is not None:
        return "pairs"
    if mode == "auto":
        return "grid" if region.dim == 1 else "sample"
    if mode not in ("grid", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "grid" and region.dim != 1:
        raise ValueError("grid mode is only available in one dimension")
    return mode


def _as_pairs(pairs, dim):
    U, V = pairs
    U = np.atleast_2d(np.asarray(U, dtype=float)).reshape(-1, dim)
    V = np.atleast_2d(np.asarray(V, dtype=float)).reshape(-1, dim)
    if U.shape != V.shape:
        raise ValueError("pair arrays must have the same shape")
    return U, V


def sample_pairs(obj, dom=None, n_pairs=10000, seed=0, box=None):
    """Uniform in-region pairs; a prefix of the stream for any smaller ``n_pairs``."""
    region = _Region(obj, dom, box)
    P = region.point_stream(2 * n_pairs, seed)
    m = P.shape[0] // 2
    return P[0:2 * m:2], P[1:2 * m:2]


def _pair_ratios(smooth, U, V, W=None):
    """Ratios ``||W-U||^2_{H(W)} / ||W-U||^2_{H(U)}`` (``W`` defaults to ``V``).

    Returns ``(ratios, valid_mask)``; pairs with zero denominator are invalid.
    """
    W = V if W is None else W
    Dl = W - U
    with np.errstate(all="ignore"):
        num = np.asarray(smooth.hess_quads(W, Dl), dtype=float)
        den = np.asarray(smooth.hess_quads(U, Dl), dtype=float)
        scale = np.maximum(np.abs(num), 1e-300)
        valid = (den > 1e-14 * scale) & np.isfinite(num) & np.isfinite(den)
        same = ~np.any(Dl, axis=1)
        ratios = np.where(valid, num / np.where(valid, den, 1.0), -np.inf)
    # u == v contributes the limit value 1
    ratios = np.where(same, 1.0, ratios)
    valid = valid | same
    return ratios, valid


def _finish(kind, ratios, valid, U, V, bound, parameter, mode, samples=None, extra=None):
    n_valid = int(np.sum(valid))
    if n_valid < MIN_PAIRS:
        raise InsufficientSamples(f"only {n_valid} valid pairs for {kind} (need {MIN_PAIRS})")
    i = int(np.argmax(np.where(valid, ratios, -np.inf)))
    est = max(float(ratios[i]), 1.0)
    return StabilityReport(kind, est, (U[i].copy(), V[i].copy()),
                           n_valid if samples is None else samples, bound, parameter,
                           int(np.sum(~valid)), mode, dict(extra or {}))


def _declared(obj, analytic):
    if analytic is not None:
        return float(analytic)
    smooth = obj.smooth if isinstance(obj, CompositeObjective) else obj
    ab = getattr(smooth, "analytic_stability", None)
    return None if ab is None else ab.bound()


def _grid_curvature(region, resolution):
    X = region.grid(resolution)
    if X.shape[0] < 2:
        raise InsufficientSamples("grid has fewer than two in-region points")
    h = np.asarray(region.smooth.hess_quads(X, np.ones_like(X)), dtype=float)
    if np.any(h <= 0):
        raise InsufficientSamples("zero curvature on the grid: ratio undefined")
    return X, h


def _default_resolution(region, resolution):
    return 1e-3 * float(region.hi[0] - region.lo[0]) if resolution is None else float(resolution)


def estimate_global_c(obj, dom: Optional[LevelSetDomain] = None, *, pairs=None, n_pairs=10000,
                      seed=0, mode="auto", resolution=None, box=None, analytic=None) -> StabilityReport:
    """Largest sampled ratio of Hessian quadratic forms between pair endpoints.

    Parameters
    ----------
    obj : Objective or CompositeObjective
    dom : LevelSetDomain, optional
        Region to sample; alternatively pass ``box``.
    pairs : (U, V), optional
        Explicit pairs; no region filtering is applied to them.
    mode : {"auto", "grid", "sample"}
        ``auto`` uses an exhaustive grid in one dimension.
    """
    region = _Region(obj, dom, box) if pairs is None else None
    smooth = (region.smooth if region is not None
              else (obj.smooth if isinstance(obj, CompositeObjective) else obj))
    bound = _declared(obj, analytic)
    mode = _resolve_mode(region, mode, pairs) if region is not None else "pairs"
    if mode == "grid":
        X, h = _grid_curvature(region, _default_resolution(region, resolution))
        i, j = int(np.argmin(h)), int(np.argmax(h))
        n = X.shape[0]
        return StabilityReport("global_c", max(float(h[j] / h[i]), 1.0), (X[i], X[j]), n * n,
                               bound, None, 0, "grid")
    if mode == "pairs":
        U, V = _as_pairs(pairs, smooth.dim)
    else:
        U, V = sample_pairs(obj, dom, n_pairs, seed, box)
    ratios, valid = _pair_ratios(smooth, U, V)
    return _finish("global_c", ratios, valid, U, V, bound, None, mode)


def estimate_local_d(obj, dom: Optional[LevelSetDomain] = None, norm=None, r=1.0, *, pairs=None,
                     n_pairs=10000, seed=0, mode="auto", resolution=None, box=None,
                     analytic=None) -> StabilityReport:
    """Stability ratio restricted to pairs with ``||u - v|| <= r``.

    In sample mode the pairs are the global sample (filtered by distance)
    together with local pairs ``v = u + s*dir`` with ``||s*dir|| <= r``.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    norm = NormSpec.l2() if norm is None else NormSpec.parse(norm)
    region = _Region(obj, dom, box) if pairs is None else None
    smooth = (region.smooth if region is not None
              else (obj.smooth if isinstance(obj, CompositeObjective) else obj))
    mode = _resolve_mode(region, mode, pairs) if region is not None else "pairs"
    bound = None if analytic is None else float(analytic)
    if mode == "grid":
        res = _default_resolution(region, resolution)
        X, h = _grid_curvature(region, res)
        step = float(X[1, 0] - X[0, 0])
        w = int(math.floor(r / step * (1 + 1e-12)))
        win = maximum_filter1d(h, size=2 * w + 1, mode="constant", cval=-np.inf)
        ratio = win / h
        i = int(np.argmax(ratio))
        lo_i, hi_i = max(0, i - w), min(len(h), i + w + 1)
        j = lo_i + int(np.argmax(h[lo_i:hi_i]))
        counts = np.minimum(np.arange(len(h)) + w, len(h) - 1) - np.maximum(np.arange(len(h)) - w, 0) + 1
        return StabilityReport("local_d", max(float(ratio[i]), 1.0), (X[i], X[j]), int(counts.sum()),
                               bound, float(r), 0, "grid")
    if mode == "pairs":
        U, V = _as_pairs(pairs, smooth.dim)
    else:
        Ug, Vg = sample_pairs(obj, dom, n_pairs, seed, box)
        P = region.point_stream(n_pairs, seed)
        rng = np.random.default_rng([seed, 1])
        dirs = rng.standard_normal(P.shape)
        dirs /= norm.rows(dirs)[:, None]
        scale = r * rng.random(P.shape[0]) ** (1.0 / smooth.dim)
        Vl = P + scale[:, None] * dirs
        keep = region.contains_many(Vl)
        U = np.vstack([Ug, P[keep]])
        V = np.vstack([Vg, Vl[keep]])
    close = norm.rows(V - U) <= r * (1 + 1e-12)
    U, V = U[close], V[close]
    ratios, valid = _pair_ratios(smooth, U, V)
    return _finish("local_d", ratios, valid, U, V, bound, float(r), mode)


def estimate_path_c(obj, dom: Optional[LevelSetDomain] = None, gamma=1.0, *, pairs=None,
                    n_pairs=10000, seed=0, mode="auto", resolution=None, box=None,
                    analytic=None) -> StabilityReport:
    """Ratio between ``u`` and ``w = u + gamma (v - u)`` along ``w - u``."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    region = _Region(obj, dom, box) if pairs is None else None
    smooth = (region.smooth if region is not None
              else (obj.smooth if isinstance(obj, CompositeObjective) else obj))
    mode = _resolve_mode(region, mode, pairs) if region is not None else "pairs"
    bound = None if analytic is None else float(analytic)
    if mode == "grid":
        X, h = _grid_curvature(region, _default_resolution(region, resolution))
        x = X[:, 0]
        best, arg, n = -np.inf, (0, 0), x.shape[0]
        for start in range(0, n, 512):
            u = x[start:start + 512, None]
            w = u + gamma * (x[None, :] - u) if gamma < 1 else np.broadcast_to(x[None, :], (u.shape[0], n))
            hw = np.asarray(smooth.hess_quads(w.reshape(-1, 1), np.ones((w.size, 1))), float)
            R = hw.reshape(w.shape) / h[start:start + 512, None]
            k = int(np.argmax(R))
            if R.flat[k] > best:
                best, arg = float(R.flat[k]), (start + k // n, k % n)
        return StabilityReport("path_c", max(best, 1.0), (X[arg[0]], X[arg[1]]), n * n, bound,
                               float(gamma), 0, "grid")
    if mode == "pairs":
        U, V = _as_pairs(pairs, smooth.dim)
    else:
        U, V = sample_pairs(obj, dom, n_pairs, seed, box)
    W = V if gamma == 1 else U + gamma * (V - U)
    ratios, valid = _pair_ratios(smooth, U, V, W)
    return _finish("path_c", ratios, valid, U, V, bound, float(gamma), mode)


def _cummax_reports(reports):
    best = None
    for rep in reports:
        if best is not None and best.estimate > rep.estimate:
            rep.extra["raw_estimate"] = rep.estimate
            rep.estimate = best.estimate
            rep.witness_pair = best.witness_pair
        best = rep if best is None or rep.estimate >= best.estimate else best
    return reports


def local_d_curve(obj, dom=None, norm=None, r_grid=(0.25, 0.5, 1.0), **kw):
    """``d(r)`` over an increasing radius grid (running max keeps it monotone).

    A pair within distance ``r1`` is also within any ``r2 >= r1``, so the
    running max is still a valid lower bound at every radius.
    """
    r_grid = sorted(float(r) for r in r_grid)
    return _cummax_reports([estimate_local_d(obj, dom, norm, r, **kw) for r in r_grid])


def path_c_curve(obj, dom=None, gammas=(0.25, 0.5, 1.0), **kw):
    """``c(gamma)`` over an increasing grid (running max keeps it monotone)."""
    gammas = sorted(float(g) for g in gammas)
    return _cummax_reports([estimate_path_c(obj, dom, g, **kw) for g in gammas])


def estimate_trajectory_c(obj, iterates, x_star=None, alphas=None) -> StabilityReport:
    """Stability measured only from iterates ``x_t`` toward ``x_{t+1}`` and ``x_star``.

    Each segment is probed at the fractions ``alphas`` (default 0.1, ..., 1.0).
    """
    smooth = obj.smooth if isinstance(obj, CompositeObjective) else obj
    alphas = np.round(np.arange(1, 11) / 10, 12) if alphas is None else np.asarray(alphas, float)
    X = [as_vector(x, smooth.dim) for x in iterates]
    U, V = [], []
    for t, x in enumerate(X):
        targets = []
        if t + 1 < len(X):
            targets.append(X[t + 1])
        if x_star is not None:
            targets.append(as_vector(x_star, smooth.dim))
        for z in targets:
            for a in alphas:
                U.append(x)
                V.append(z if a == 1 else x + a * (z - x))
    if not U:
        raise InsufficientSamples("trajectory has no segments")
    U, V = np.array(U), np.array(V)
    ratios, valid = _pair_ratios(smooth, U, V)
    n_valid = int(np.sum(valid))
    if n_valid == 0:
        raise InsufficientSamples("no valid trajectory segments")
    i = int(np.argmax(np.where(valid, ratios, -np.inf)))
    return StabilityReport("trajectory_c", max(float(ratios[i]), 1.0), (U[i], V[i]), n_valid,
                           None, None, int(np.sum(~valid)), "trajectory")


def estimate_eta(obj, hessian_approx, trajectory, rng=None) -> StabilityReport:
    """Smallest ``eta >= 1`` making ``H_t`` and the true Hessian norm-equivalent on steps.

    Parameters
    ----------
    obj : Objective or CompositeObjective
    hessian_approx : ApproxScheme, callable ``x -> H`` or list of matrices
        One matrix per trajectory entry when a list is given.
    trajectory : list of (x_t, z_t)
    """
    smooth = obj.smooth if isinstance(obj, CompositeObjective) else obj
    traj = list(trajectory)
    if not traj:
        raise ValueError("trajectory is empty")
    if isinstance(hessian_approx, (list, tuple)):
        if len(hessian_approx) != len(traj):
            raise ValueError("need one approximate Hessian per trajectory entry")
        Hs = [np.asarray(H, float) for H in hessian_approx]
    elif hasattr(hessian_approx, "build"):
        rng = rng if rng is not None else np.random.default_rng(0)
        Hs = [hessian_approx.build(smooth, x, rng) for x, _ in traj]
    else:
        Hs = [np.asarray(hessian_approx(x), float) for x, _ in traj]
    best, witness, lo_ratio, hi_ratio, used = 1.0, None, 1.0, 1.0, 0
    for (x, z), H in zip(traj, Hs):
        x, z = as_vector(x, smooth.dim), as_vector(z, smooth.dim)
        d = z - x
        true_q = smooth.hess_quad(x, d)
        approx_q = float(d @ H @ d)
        if true_q <= 0 and approx_q <= 0:
            continue
        if approx_q <= 0 or true_q <= 0:
            raise UnboundedEta("one of the two norms vanishes on a nonzero step")
        ratio = true_q / approx_q
        used += 1
        lo_ratio, hi_ratio = min(lo_ratio, ratio), max(hi_ratio, ratio)
        eta = math.sqrt(max(ratio, 1.0 / ratio))
        if eta > best or witness is None:
            best, witness = max(best, eta), (x, z)
    return StabilityReport("eta", best, witness, used, None, None, 0, "trajectory",
                           {"min_ratio": lo_ratio, "max_ratio": hi_ratio})


@dataclass
class TaylorReport:
    c: float
    n_checked: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def required_taylor_constant(obj, pairs) -> float:
    """Smallest ``c`` for which every pair satisfies both quadratic bounds."""
    smooth = obj.smooth if isinstance(obj, CompositeObjective) else obj
    U, V = _as_pairs(pairs, smooth.dim)
    D = V - U
    rem = smooth.values(V) - smooth.values(U) - np.einsum("ij,ij->i", smooth.gradients(U), D)
    half_q = 0.5 * smooth.hess_quads(U, D)
    ok = (half_q > 0) & (rem > 0) & np.isfinite(rem)
    if not np.any(ok):
        raise InsufficientSamples("no pair with positive curvature")
    ratio = rem[ok] / half_q[ok]
    return float(np.max(np.maximum(ratio, 1.0 / ratio)))


def check_taylor_bounds(obj, c, pairs, rtol=1e-9) -> TaylorReport:
    """Check the quadratic upper/lower bounds with curvature ``c`` and ``1/c``.

    Returns every violating pair as ``(x, y, side, excess)`` with side
    ``"upper"`` or ``"lower"``.
    """
    smooth = obj.smooth if isinstance(obj, CompositeObjective) else obj
    U, V = _as_pairs(pairs, smooth.dim)
    fu = smooth.values(U)
    fv = smooth.values(V)
    D = V - U
    lin = fu + np.einsum("ij,ij->i", smooth.gradients(U), D)
    q = smooth.hess_quads(U, D)
    tol = rtol * np.maximum(1.0, np.maximum(np.abs(fu), np.abs(fv)))
    with np.errstate(invalid="ignore"):
        upper_excess = fv - (lin + 0.5 * c * q)
        lower_excess = (lin + 0.5 * q / c) - fv
    violations = []
    for k in np.flatnonzero((upper_excess > tol) | (lower_excess > tol)):
        if upper_excess[k] > tol[k]:
            violations.append((U[k], V[k], "upper", float(upper_excess[k])))
        if lower_excess[k] > tol[k]:
            violations.append((U[k], V[k], "lower", float(lower_excess[k])))
    return TaylorReport(float(c), U.shape[0], violations)
