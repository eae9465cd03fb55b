"""Shared domain types: vectors, norms, prox terms, objectives, models, traces."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, DomainError

INF = float("inf")


def as_vector(x, dim: Optional[int] = None) -> np.ndarray:
    """Return ``x`` as a 1-D float array, rejecting NaN/Inf entries."""
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def sym_matrix(M) -> np.ndarray:
    """Return a square float matrix mirrored from its upper triangle."""
    A = np.atleast_2d(np.asarray(M, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    upper = np.triu(A)
    return upper + np.triu(A, 1).T


def weighted_norm_sq(v, M) -> float:
    """Squared semi-norm ``v^T M v``."""
    v = np.asarray(v, dtype=float)
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape != (v.shape[0], v.shape[0]):
        raise DimensionError(f"vector of dim {v.shape[0]} vs matrix {M.shape}")
    return float(max(v @ M @ v, 0.0))


@dataclass(frozen=True)
class NormSpec:
    """A norm used for trust regions and diameters: l2, linf or a metric."""

    kind: str = "l2"
    M: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("l2", "linf", "metric"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == "metric":
            if self.M is None:
                raise ValueError("metric norm needs a matrix")
            object.__setattr__(self, "M", sym_matrix(self.M))

    @classmethod
    def l2(cls):
        return cls("l2")

    @classmethod
    def linf(cls):
        return cls("linf")

    @classmethod
    def metric(cls, M):
        return cls("metric", M)

    @classmethod
    def parse(cls, name):
        if isinstance(name, NormSpec):
            return name
        return cls(str(name).strip().lower())

    def __call__(self, v) -> float:
        v = np.asarray(v, dtype=float)
        if self.kind == "l2":
            return float(np.linalg.norm(v))
        if self.kind == "linf":
            return float(np.max(np.abs(v))) if v.size else 0.0
        return math.sqrt(weighted_norm_sq(v, self.M))

    def rows(self, V) -> np.ndarray:
        """Norm of every row of ``V``."""
        V = np.atleast_2d(V)
        if self.kind == "l2":
            return np.linalg.norm(V, axis=1)
        if self.kind == "linf":
            return np.max(np.abs(V), axis=1)
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", V, self.M, V), 0.0))

    def __repr__(self):
        return f"NormSpec({self.kind!r})"


class ProxTerm:
    """Proximable convex term ``g``: zero, l1, box indicator or ball indicator.

    Indicators are 0 inside their set and +inf outside. Membership uses a
    relative slack of 1e-12 so that projected points count as inside.
    """

    KINDS = ("zero", "l1", "box", "ball")

    def __init__(self, kind="zero", lam=0.0, lo=None, hi=None, center=None,
                 radius=None, norm="l2"):
        if kind not in self.KINDS:
            raise ValueError(f"unknown prox kind {kind!r}")
        self.kind = kind
        self.lam = float(lam)
        if kind == "l1" and self.lam < 0:
            raise ValueError("l1 weight must be nonnegative")
        self.lo = self.hi = self.center = None
        self.radius = None
        self.norm = NormSpec.parse(norm)
        if kind == "box":
            self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
            self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
            if np.any(self.lo > self.hi):
                raise ValueError("box needs lo <= hi")
        elif kind == "ball":
            self.center = np.atleast_1d(np.asarray(center, dtype=float))
            self.radius = float(radius)
            if self.radius < 0:
                raise ValueError("ball radius must be nonnegative")
            if self.norm.kind == "metric":
                raise ValueError("ball indicator supports l2 or linf norms")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def l1(cls, lam):
        return cls("l1", lam=lam)

    @classmethod
    def box(cls, lo, hi):
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def ball(cls, center, radius, norm="l2"):
        return cls("ball", center=center, radius=radius, norm=norm)

    @property
    def is_indicator(self) -> bool:
        return self.kind in ("box", "ball")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "l1" and self.lam == 0.0)

    @property
    def separable(self) -> bool:
        return self.kind in ("zero", "l1", "box") or (
            self.kind == "ball" and self.norm.kind == "linf")

    def as_box(self, dim):
        """Box ``(lo, hi)`` equivalent to this term, or None."""
        if self.kind == "box":
            return np.broadcast_to(self.lo, (dim,)).copy(), np.broadcast_to(self.hi, (dim,)).copy()
        if self.kind == "ball" and self.norm.kind == "linf":
            c = np.broadcast_to(self.center, (dim,))
            return c - self.radius, c + self.radius
        return None

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if self.kind in ("zero", "l1"):
            return True
        if self.kind == "box":
            lo, hi = self.as_box(x.shape[0])
            slack = 1e-12 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
            return bool(np.all(x >= lo - slack) and np.all(x <= hi + slack))
        dist = self.norm(x - self.center)
        return dist <= self.radius * (1 + 1e-12) + 1e-15

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return 0.0
        if self.kind == "l1":
            return self.lam * float(np.sum(np.abs(x)))
        return 0.0 if self.contains(x) else INF

    def prox(self, v, t=1.0) -> np.ndarray:
        """``argmin_z  t*g(z) + 0.5*||z - v||^2``."""
        v = np.asarray(v, dtype=float)
        if self.kind == "zero":
            return v.copy()
        if self.kind == "l1":
            return np.sign(v) * np.maximum(np.abs(v) - t * self.lam, 0.0)
        if self.kind == "box" or self.norm.kind == "linf":
            lo, hi = self.as_box(v.shape[0])
            return np.clip(v, lo, hi)
        d = v - self.center
        nd = float(np.linalg.norm(d))
        if nd <= self.radius:
            return v.copy()
        return self.center + d * (self.radius / nd)

    def diameter(self, dim, norm: NormSpec) -> float:
        """Diameter of the indicator set measured in ``norm`` (inf otherwise)."""
        box = self.as_box(dim)
        if box is not None:
            return norm(box[1] - box[0])
        if self.kind == "ball":
            # l2 ball: farthest pair is an antipodal pair along the worst axis
            if norm.kind == "l2":
                return 2.0 * self.radius
            if norm.kind == "linf":
                return 2.0 * self.radius
            w = np.linalg.eigvalsh(norm.M)
            return 2.0 * self.radius * math.sqrt(max(w[-1], 0.0))
        return INF

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "l1":
            d["lam"] = self.lam
        elif self.kind == "box":
            d["lo"] = self.lo.tolist()
            d["hi"] = self.hi.tolist()
        elif self.kind == "ball":
            d.update(center=self.center.tolist(), radius=self.radius, norm=self.norm.kind)
        return d

    def __repr__(self):
        return f"ProxTerm({self.describe()})"


class Objective:
    """Twice differentiable convex function with analytic derivatives.

    Subclasses implement ``value``, ``gradient`` and ``hessian``; the batch
    helpers have loop fallbacks and are overridden where vectorization pays.

    Attributes
    ----------
    dim : int
    f_star, x_star : known optimum, if any.
    analytic_stability : optional bound descriptor (see ``stability.StabilityBound``).
    domain_box : optional ``(lo, hi)`` outside which evaluation is invalid.
    """

    dim: int = 0
    f_star: Optional[float] = None
    x_star: Optional[np.ndarray] = None
    analytic_stability = None
    domain_box = None

    def value(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x) -> np.ndarray:
        raise NotImplementedError

    def hvp(self, x, v) -> np.ndarray:
        return self.hessian(x) @ np.asarray(v, dtype=float)

    def hess_quad(self, x, d) -> float:
        d = np.asarray(d, dtype=float)
        return float(d @ self.hvp(x, d))

    def values(self, X) -> np.ndarray:
        out = np.empty(len(X))
        for i, x in enumerate(X):
            try:
                out[i] = self.value(x)
            except DomainError:
                out[i] = INF
        return out

    def gradients(self, X) -> np.ndarray:
        """Gradient at every row of ``X``."""
        return np.array([self.gradient(x) for x in X]).reshape(len(X), -1)

    def hess_quads(self, X, D) -> np.ndarray:
        """``d_i^T H(x_i) d_i`` for paired rows of ``X`` and ``D``."""
        return np.array([self.hess_quad(x, d) for x, d in zip(X, D)])

    def in_domain(self, x) -> bool:
        if self.domain_box is None:
            return True
        lo, hi = self.domain_box
        return bool(np.all(x >= lo) and np.all(x <= hi))


class CompositeObjective:
    """``F = f + g`` with ``f`` smooth and ``g`` a :class:`ProxTerm`."""

    def __init__(self, smooth: Objective, nonsmooth: Optional[ProxTerm] = None,
                 F_star=None, x_star=None):
        self.smooth = smooth
        self.nonsmooth = nonsmooth if nonsmooth is not None else ProxTerm.zero()
        self.F_star = F_star
        self.x_star = None if x_star is None else as_vector(x_star)
        if F_star is None and self.nonsmooth.is_zero and smooth.f_star is not None:
            self.F_star = smooth.f_star
            self.x_star = smooth.x_star

    @classmethod
    def wrap(cls, obj):
        return obj if isinstance(obj, CompositeObjective) else cls(obj)

    @property
    def dim(self):
        return self.smooth.dim

    def value(self, x) -> float:
        g = self.nonsmooth.value(x)
        if g == INF:
            return INF
        try:
            return self.smooth.value(x) + g
        except DomainError:
            return INF

    def values(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        out = self.smooth.values(X)
        if not self.nonsmooth.is_zero:
            out = out + np.array([self.nonsmooth.value(x) for x in X])
        return out


@dataclass
class LevelSetDomain:
    """Sublevel set ``{x : F(x) <= F(x0)}`` plus a diameter estimate.

    ``box`` optionally bounds the set (used by samplers); when omitted it is
    derived by :meth:`bounding_box`.
    """

    objective: CompositeObjective
    x0: np.ndarray
    diameter_estimate: Optional[float] = None
    norm: NormSpec = field(default_factory=NormSpec.l2)
    box: Optional[tuple] = None
    tol_abs: float = 1e-12

    def __post_init__(self):
        self.objective = CompositeObjective.wrap(self.objective)
        self.x0 = as_vector(self.x0, self.objective.dim)
        self.level = self.objective.value(self.x0)
        if not np.isfinite(self.level):
            raise DomainError("x0 is outside the domain of the objective")
        if self.box is not None:
            lo, hi = self.box
            self.box = (np.broadcast_to(np.asarray(lo, float), (self.dim,)).copy(),
                        np.broadcast_to(np.asarray(hi, float), (self.dim,)).copy())
        self._boundary = None

    @property
    def dim(self):
        return self.objective.dim

    def contains(self, x) -> bool:
        return bool(self.objective.value(x) <= self.level + self.tol_abs)

    def contains_many(self, X) -> np.ndarray:
        return self.objective.values(X) <= self.level + self.tol_abs

    def _ray_extent(self, direction, t_max=1e6):
        """Largest t with x0 + t*direction in the set (convex along the ray)."""
        lo, hi = 0.0, 1.0
        while self.contains(self.x0 + hi * direction):
            lo, hi = hi, 2.0 * hi
            if hi > t_max:
                raise DomainError("level set appears unbounded")
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.contains(self.x0 + mid * direction):
                lo = mid
            else:
                hi = mid
        return lo

    def boundary_points(self, n_random=64, seed=0) -> np.ndarray:
        """Points on the set boundary found by bisection along rays from x0."""
        if self._boundary is None:
            rng = np.random.default_rng(seed)
            dirs = [np.eye(self.dim)[i] * s for i in range(self.dim) for s in (1.0, -1.0)]
            if self.dim > 1:
                R = rng.standard_normal((n_random, self.dim))
                dirs.extend(R / np.linalg.norm(R, axis=1, keepdims=True))
            self._boundary = np.array([self.x0 + self._ray_extent(d) * d for d in dirs])
        return self._boundary

    def bounding_box(self):
        if self.box is not None:
            return self.box
        g = self.objective.nonsmooth
        pbox = g.as_box(self.dim)
        if pbox is not None:
            return pbox
        if g.kind == "ball":
            return g.center - g.radius, g.center + g.radius
        P = self.boundary_points()
        lo, hi = P.min(axis=0), P.max(axis=0)
        pad = 0.05 * (hi - lo) + 1e-12
        return lo - pad, hi + pad

    @property
    def diameter(self) -> float:
        if self.diameter_estimate is not None:
            return float(self.diameter_estimate)
        g = self.objective.nonsmooth
        if g.is_indicator:
            return g.diameter(self.dim, self.norm)
        P = self.boundary_points()
        diffs = P[:, None, :] - P[None, :, :]
        return float(np.max(self.norm.rows(diffs.reshape(-1, self.dim))))


def level_set_contains(dom: LevelSetDomain, x) -> bool:
    """True iff ``F(x) <= F(x0) + tol_abs``."""
    x = as_vector(x, dom.dim)
    return dom.contains(x)


class QuadraticModel:
    """``Q(dx) = <grad, dx> + sigma/2 ||dx||_metric^2 + g(anchor+dx) - g(anchor)``."""

    def __init__(self, anchor, grad, metric, sigma, prox: Optional[ProxTerm] = None):
        self.anchor = as_vector(anchor)
        n = self.anchor.shape[0]
        self.grad = as_vector(grad, n)
        self.metric = sym_matrix(metric)
        if self.metric.shape != (n, n):
            raise DimensionError("metric does not match anchor dimension")
        self.sigma = float(sigma)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.prox = prox if prox is not None else ProxTerm.zero()
        self._g_anchor = self.prox.value(self.anchor)

    @property
    def dim(self):
        return self.anchor.shape[0]

    def with_sigma(self, sigma):
        return QuadraticModel(self.anchor, self.grad, self.metric, sigma, self.prox)

    def smooth_part(self, step) -> float:
        step = np.asarray(step, dtype=float)
        return float(self.grad @ step + 0.5 * self.sigma * (step @ self.metric @ step))

    def evaluate(self, step) -> float:
        step = np.asarray(step, dtype=float)
        if not np.any(step):
            return 0.0
        g_new = self.prox.value(self.anchor + step)
        if g_new == INF:
            return INF
        return self.smooth_part(step) + (g_new - self._g_anchor)


@dataclass
class ApproxScheme:
    """How the metric ``H_t`` is formed from the objective at ``x_t``.

    kinds: ``exact_hessian``, ``sketch`` (row subsampling, ``rows`` rows),
    ``block_diag`` (``blocks`` contiguous blocks) and ``hessian_free``
    (products only, CG tolerance ``cg_tol``).
    """

    kind: str = "exact_hessian"
    rows: Optional[int] = None
    blocks: int = 2
    cg_tol: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("exact_hessian", "sketch", "block_diag", "hessian_free"):
            raise ValueError(f"unknown approximation scheme {self.kind!r}")

    def build(self, obj: Objective, x, rng=None) -> np.ndarray:
        if self.kind in ("exact_hessian", "hessian_free"):
            return obj.hessian(x)
        if self.kind == "block_diag":
            H = obj.hessian(x)
            mask = np.zeros_like(H, dtype=bool)
            for idx in np.array_split(np.arange(obj.dim), self.blocks):
                mask[np.ix_(idx, idx)] = True
            return np.where(mask, H, 0.0)
        if not hasattr(obj, "sketched_hessian"):
            raise TypeError("sketching needs a data-matrix objective")
        rng = rng if rng is not None else np.random.default_rng(0)
        m = obj.A.shape[0]
        rows = m if self.rows is None else min(int(self.rows), m)
        idx = np.sort(rng.choice(m, size=rows, replace=False))
        return obj.sketched_hessian(x, idx)

    def describe(self) -> dict:
        return {"kind": self.kind, "rows": self.rows, "blocks": self.blocks, "cg_tol": self.cg_tol}


STATUSES = ("running", "converged", "max_iter", "domain_violation", "numerical_failure")
CSV_COLUMNS = ("iter", "f", "F", "gap", "step_norm", "sigma", "rho", "accepted")


@dataclass
class TraceRecord:
    iter: int
    f: float
    F: float
    gap: Optional[float]
    step_norm: float
    sigma: float
    rho: Optional[float] = None
    accepted: bool = True
    wall_time: float = 0.0
    theta: Optional[float] = None
    decrement: Optional[float] = None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class SolveTrace:
    """Per-iteration record of a solver run."""

    solver: str = ""
    records: list = field(default_factory=list)
    status: str = "running"
    iterates: list = field(default_factory=list)
    hessians: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    message: str = ""

    def append(self, record: TraceRecord, x=None, H=None):
        if self.records and record.iter <= self.records[-1].iter:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(record)
        if x is not None:
            self.iterates.append(np.array(x, dtype=float))
        if H is not None:
            self.hessians.append(np.array(H, dtype=float))

    def __len__(self):
        return len(self.records)

    @property
    def x_final(self):
        return self.iterates[-1] if self.iterates else None

    def column(self, name, accepted_only=False) -> np.ndarray:
        recs = [r for r in self.records if r.accepted or not accepted_only]
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in recs],
                        dtype=float)

    @property
    def n_iterations(self) -> int:
        return self.records[-1].iter if self.records else 0

    def step_factors(self, floor=0.0) -> np.ndarray:
        """``gap_{t+1}/gap_t`` over consecutive accepted records with gap_t > floor."""
        gaps = self.column("gap", accepted_only=True)
        out = []
        for a, b in zip(gaps[:-1], gaps[1:]):
            if np.isfinite(a) and a > floor:
                out.append(b / a)
        return np.array(out)

    def iterations_to_gap(self, threshold):
        for r in self.records:
            if r.gap is not None and r.gap <= threshold:
                return r.iter
        return None

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
            return v

        return {
            "solver": self.solver,
            "status": self.status,
            "message": self.message,
            "meta": self.meta,
            "records": [{k: clean(v) for k, v in r.__dict__.items()} for r in self.records],
            "x_final": None if self.x_final is None else self.x_final.tolist(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "describe"):
        return o.describe()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
