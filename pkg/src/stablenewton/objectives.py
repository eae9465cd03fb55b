"""Test problems: scalar links, GLM objectives, counterexamples and data loading."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .core import CompositeObjective, Objective, ProxTerm, as_vector, sym_matrix
from .errors import DomainError, EmptyDataError, ParseError
from .stability import StabilityBound

LINK_KINDS = ("logistic", "exp_shift", "entropy", "robust_q", "power_even", "neg_exp_linear")


class ScalarLink:
    """Convex scalar loss ``phi`` with its first three derivatives (vectorized).

    kinds: ``logistic`` log(1+e^-u), ``exp_shift`` e^u - u, ``entropy`` u ln u,
    ``robust_q`` u^q, ``power_even`` u^(2k), ``neg_exp_linear`` e^-u + u - 1.
    """

    def __init__(self, kind, k=2, q=1.5):
        if kind not in LINK_KINDS:
            raise ValueError(f"unknown link {kind!r}")
        self.kind = kind
        self.k = int(k)
        self.q = float(q)
        if kind == "power_even" and (self.k < 1 or self.k != k):
            raise ValueError("power_even needs an integer k >= 1")
        if kind == "robust_q" and not 1 < self.q <= 2:
            raise ValueError("robust_q needs q in (1, 2]")

    @property
    def positive_domain(self) -> bool:
        return self.kind in ("entropy", "robust_q")

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if self.positive_domain and np.any(u <= 0):
            raise DomainError(f"{self.kind} link evaluated at u <= 0")
        return u

    def value(self, u):
        u = self._check(u)
        if self.kind == "logistic":
            return np.log1p(np.exp(-np.abs(u))) + np.maximum(-u, 0.0)
        if self.kind == "exp_shift":
            return np.expm1(u) - u + 1.0
        if self.kind == "entropy":
            return u * np.log(u)
        if self.kind == "robust_q":
            return u ** self.q
        if self.kind == "power_even":
            return u ** (2 * self.k)
        return np.expm1(-u) + u

    def d1(self, u):
        u = self._check(u)
        if self.kind == "logistic":
            return -expit(-u)
        if self.kind == "exp_shift":
            return np.expm1(u)
        if self.kind == "entropy":
            return np.log(u) + 1.0
        if self.kind == "robust_q":
            return self.q * u ** (self.q - 1)
        if self.kind == "power_even":
            return 2 * self.k * u ** (2 * self.k - 1)
        return -np.expm1(-u)

    def d2(self, u):
        u = self._check(u)
        if self.kind == "logistic":
            return expit(u) * expit(-u)
        if self.kind == "exp_shift":
            return np.exp(u)
        if self.kind == "entropy":
            return 1.0 / u
        if self.kind == "robust_q":
            return self.q * (self.q - 1) * u ** (self.q - 2)
        if self.kind == "power_even":
            k2 = 2 * self.k
            return k2 * (k2 - 1) * u ** (k2 - 2) if self.k > 1 else np.full_like(u, 2.0)
        return np.exp(-u)

    def d3(self, u):
        u = self._check(u)
        if self.kind == "logistic":
            s = expit(u)
            return s * (1 - s) * (1 - 2 * s)
        if self.kind == "exp_shift":
            return np.exp(u)
        if self.kind == "entropy":
            return -1.0 / u ** 2
        if self.kind == "robust_q":
            return self.q * (self.q - 1) * (self.q - 2) * u ** (self.q - 3)
        if self.kind == "power_even":
            k2 = 2 * self.k
            return k2 * (k2 - 1) * (k2 - 2) * u ** (k2 - 3) if self.k > 1 else np.zeros_like(u)
        return -np.exp(-u)

    def describe(self):
        d = {"kind": self.kind}
        if self.kind == "power_even":
            d["k"] = self.k
        if self.kind == "robust_q":
            d["q"] = self.q
        return d

    def __repr__(self):
        return f"ScalarLink({self.describe()})"


def normalize_rows(A, dual_norm="l2"):
    """Scale rows to unit dual norm; returns ``(A_normalized, kept_mask)``."""
    A = np.asarray(A, dtype=float)
    if dual_norm == "l2":
        norms = np.linalg.norm(A, axis=1)
    elif dual_norm == "l1":
        # dual of linf
        norms = np.sum(np.abs(A), axis=1)
    else:
        raise ValueError(f"unsupported dual norm {dual_norm!r}")
    keep = norms > 0
    return A[keep] / norms[keep, None], keep


class GlmObjective(Objective):
    """``f(x) = sum_i phi(A_i . x) + linear . x``; labels are folded into rows.

    Parameters
    ----------
    A : (m, n) array
    link : ScalarLink or str
    linear : optional (n,) tilt, used to place minimizers inside an interval
    normalize : None, ``"l2"`` or ``"linf"`` -- the primal norm whose dual is
        made unit on every row.
    """

    def __init__(self, A, link, linear=None, normalize=None, domain_box=None,
                 f_star=None, x_star=None, analytic_stability=None, name="glm"):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if normalize is not None:
            A, keep = normalize_rows(A, {"l2": "l2", "linf": "l1"}[normalize])
            if not np.all(keep):
                warnings.warn(f"dropped {int(np.sum(~keep))} zero rows", stacklevel=2)
        self.A = A
        self.dim = A.shape[1]
        self.link = link if isinstance(link, ScalarLink) else ScalarLink(link)
        self.linear = np.zeros(self.dim) if linear is None else as_vector(linear, self.dim)
        self.domain_box = None
        if domain_box is not None:
            lo, hi = domain_box
            self.domain_box = (np.broadcast_to(np.asarray(lo, float), (self.dim,)).copy(),
                               np.broadcast_to(np.asarray(hi, float), (self.dim,)).copy())
        self.f_star = f_star
        self.x_star = None if x_star is None else as_vector(x_star, self.dim)
        self.analytic_stability = analytic_stability
        self.name = name

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(self.link.value(self.A @ x)) + self.linear @ x)

    def value_by_terms(self, x):
        """Sum of per-row terms evaluated one row at a time."""
        x = np.asarray(x, dtype=float)
        return sum(float(self.link.value(float(row @ x))) for row in self.A) + float(self.linear @ x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return self.A.T @ self.link.d1(self.A @ x) + self.linear

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        w = self.link.d2(self.A @ x)
        return sym_matrix((self.A * w[:, None]).T @ self.A)

    def hvp(self, x, v):
        x = np.asarray(x, dtype=float)
        return self.A.T @ (self.link.d2(self.A @ x) * (self.A @ np.asarray(v, dtype=float)))

    def sketched_hessian(self, x, rows):
        """Hessian built from the rows ``rows`` only, rescaled by m/len(rows)."""
        As = self.A[rows]
        w = self.link.d2(As @ np.asarray(x, dtype=float))
        return sym_matrix((As * w[:, None]).T @ As * (self.A.shape[0] / len(rows)))

    def values(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = X @ self.A.T
        out = np.full(X.shape[0], math.inf)
        ok = np.all(U > 0, axis=1) if self.link.positive_domain else np.ones(X.shape[0], bool)
        with np.errstate(over="ignore", invalid="ignore"):
            out[ok] = np.sum(self.link.value(U[ok]), axis=1) + X[ok] @ self.linear
        return out

    def gradients(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.link.d1(X @ self.A.T) @ self.A + self.linear

    def hess_quads(self, X, D):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        D = np.atleast_2d(np.asarray(D, dtype=float))
        return np.sum(self.link.d2(X @ self.A.T) * (D @ self.A.T) ** 2, axis=1)

    def third_directional(self, x, d):
        """``d^3/dt^3 f(x + t d)`` at t = 0."""
        return float(np.sum(self.link.d3(self.A @ x) * (self.A @ d) ** 3))


class QuadraticObjective(Objective):
    """``f(x) = 0.5 x^T H x - b^T x + c`` with PSD ``H``."""

    def __init__(self, H, b=None, c=0.0, name="quadratic"):
        self.H = sym_matrix(H)
        self.dim = self.H.shape[0]
        self.b = np.zeros(self.dim) if b is None else as_vector(b, self.dim)
        self.c = float(c)
        self.name = name
        try:
            from .linalg import psd_solve

            self.x_star = psd_solve(self.H, self.b)
            self.f_star = self.value(self.x_star)
        except Exception:
            self.x_star, self.f_star = None, None
        self.analytic_stability = StabilityBound("closed_form", value=1.0)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x - self.b @ x + self.c)

    def gradient(self, x):
        return self.H @ np.asarray(x, dtype=float) - self.b

    def hessian(self, x):
        return self.H.copy()

    def values(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return 0.5 * np.einsum("ij,jk,ik->i", X, self.H, X) - X @ self.b + self.c

    def gradients(self, X):
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.H.T - self.b

    def hess_quads(self, X, D):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        return np.einsum("ij,jk,ik->i", D, self.H, D)


class LinearTransformObjective(Objective):
    """``h(u) = f(T u)`` for an invertible matrix ``T``."""

    def __init__(self, base: Objective, T):
        self.base = base
        self.T = np.atleast_2d(np.asarray(T, dtype=float))
        self.dim = self.T.shape[1]
        if base.x_star is not None:
            self.x_star = np.linalg.solve(self.T, base.x_star)
        self.f_star = base.f_star

    def value(self, u):
        return self.base.value(self.T @ np.asarray(u, dtype=float))

    def gradient(self, u):
        return self.T.T @ self.base.gradient(self.T @ np.asarray(u, dtype=float))

    def hessian(self, u):
        return sym_matrix(self.T.T @ self.base.hessian(self.T @ np.asarray(u, dtype=float)) @ self.T)

    def values(self, U):
        return self.base.values(np.atleast_2d(U) @ self.T.T)

    def gradients(self, U):
        return self.base.gradients(np.atleast_2d(U) @ self.T.T) @ self.T

    def hess_quads(self, U, D):
        return self.base.hess_quads(np.atleast_2d(U) @ self.T.T, np.atleast_2d(D) @ self.T.T)


# -- LIBSVM ------------------------------------------------------------------

def parse_libsvm(path, n_features=None):
    """Read ``label idx:val ...`` lines; returns ``(X, y)`` as dense arrays."""
    labels, rows = [], []
    max_idx = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
            entries = {}
            for tok in tokens[1:]:
                idx_s, sep, val_s = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise ParseError(f"malformed feature token {tok!r}", lineno) from None
                if idx < 1:
                    raise ParseError(f"feature index must be >= 1, got {idx}", lineno)
                if not math.isfinite(val):
                    raise ParseError(f"non-finite value in {tok!r}", lineno)
                entries[idx] = val
                max_idx = max(max_idx, idx)
            labels.append(label)
            rows.append(entries)
    if not rows:
        raise EmptyDataError(f"no data rows in {os.fspath(path)!r}")
    n = max_idx if n_features is None else int(n_features)
    if max_idx > n:
        raise ParseError(f"feature index {max_idx} exceeds n_features={n}")
    X = np.zeros((len(rows), n))
    for i, entries in enumerate(rows):
        for idx, val in entries.items():
            X[i, idx - 1] = val
    return X, np.array(labels)


def load_libsvm(path, normalize=True, n_features=None, link="logistic", dual_norm="l2"):
    """Load a LIBSVM file as a GLM objective with labels folded into the rows.

    Rows are multiplied by their label sign (labels <= 0 count as -1) and, if
    ``normalize``, scaled to unit dual norm of ``dual_norm``'s primal. Zero
    rows are dropped with a warning.
    """
    X, y = parse_libsvm(path, n_features)
    signs = np.where(y > 0, 1.0, -1.0)
    A = X * signs[:, None]
    keep = np.any(A != 0, axis=1)
    if not np.all(keep):
        warnings.warn(f"dropped {int(np.sum(~keep))} zero rows from {os.fspath(path)!r}", stacklevel=2)
        A = A[keep]
    if A.shape[0] == 0:
        raise EmptyDataError("all rows are zero")
    obj = GlmObjective(A, link, normalize=(dual_norm if normalize else None),
                       name=os.path.basename(os.fspath(path)))
    obj.labels = y[keep]
    return obj


# -- counterexamples ---------------------------------------------------------

COUNTEREXAMPLES = ("power_even", "exp_2d", "neg_exp_linear")


def make_counterexample(kind, k=2):
    """Closed-form counterexample objectives, all with minimum 0 at the origin.

    ``power_even``: x^(2k); ``exp_2d``: e^-x + x + e^-y + y - 2;
    ``neg_exp_linear``: e^-x + x - 1.
    """
    if kind == "power_even":
        if int(k) != k or k < 1:
            raise ValueError("power_even needs an integer k >= 1")
        return GlmObjective([[1.0]], ScalarLink("power_even", k=int(k)), f_star=0.0, x_star=[0.0],
                            name=f"power_even(k={int(k)})")
    if kind == "exp_2d":
        return GlmObjective(np.eye(2), "neg_exp_linear", f_star=0.0, x_star=[0.0, 0.0], name="exp_2d")
    if kind == "neg_exp_linear":
        return GlmObjective([[1.0]], "neg_exp_linear", f_star=0.0, x_star=[0.0], name="neg_exp_linear")
    raise ValueError(f"unknown counterexample {kind!r}")


def newton_ratio_power_even(k) -> float:
    """Per-step ratio f(x1)/f(x0) of a full Newton step on x^(2k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return (1.0 - 1.0 / (2 * k - 1)) ** (2 * k)


# -- problem zoo -------------------------------------------------------------

@dataclass
class Problem:
    """An objective together with a start point and known reference values."""

    name: str
    objective: CompositeObjective
    x0: np.ndarray
    params: dict = field(default_factory=dict)
    diameter: Optional[float] = None
    c_exact: Optional[float] = None

    @property
    def smooth(self):
        return self.objective.smooth

    @property
    def F_star(self):
        return self.objective.F_star

    @property
    def x_star(self):
        return self.objective.x_star


def _interval_bound(link_kind, a, b, q=1.5):
    D = b - a
    if link_kind in ("logistic", "exp_shift", "neg_exp_linear"):
        return StabilityBound("quasi_self_concordant", D=D, constants={"k": 1.0})
    if link_kind == "entropy":
        return StabilityBound("lipschitz_hess_strongly_convex", D=D,
                              constants={"M": 1.0 / a ** 2, "mu": 1.0 / b})
    if link_kind == "robust_q":
        return StabilityBound("closed_form", value=(b / a) ** (2 - q))
    return None


def _tilted_scalar(link, a, b, minimizer, x0, name, q=1.5):
    """phi(u) - phi'(m) u on [a, b]: same curvature, minimizer moved to m."""
    tilt = -float(link.d1(minimizer))
    obj = GlmObjective([[1.0]], link, linear=[tilt], domain_box=([a], [b]), x_star=[minimizer],
                       analytic_stability=_interval_bound(link.kind, a, b, q), name=name)
    obj.f_star = obj.value([minimizer])
    return obj


FIXTURE_PATH = os.path.join(os.path.dirname(__file__), "data", "three_rows.svm")


def logistic_fixture(regularizer="none", lam=0.1, lo=-3.0, hi=3.0):
    """The three-row logistic dataset bundled with the package."""
    obj = load_libsvm(FIXTURE_PATH, normalize=True)
    n = obj.dim
    obj.analytic_stability = None
    if regularizer == "l1":
        g = ProxTerm.l1(lam)
    elif regularizer == "box":
        g = ProxTerm.box(np.full(n, lo), np.full(n, hi))
    elif regularizer in ("none", None):
        g = ProxTerm.zero()
    else:
        raise ValueError(f"unknown regularizer {regularizer!r}")
    return CompositeObjective(obj, g)


ZOO = ("quadratic", "entropy", "entropy_box", "robust_q", "logistic_1d", "exp_shift",
       "power_even", "neg_exp_linear", "exp_2d", "logistic_fixture")


def make_problem(name, **params) -> Problem:
    """Build a named zoo problem. Unknown parameters raise ``TypeError``."""
    p = dict(params)

    def take(key, default):
        return p.pop(key, default)

    if name == "quadratic":
        diag = np.atleast_1d(np.asarray(take("diag", [1.0, 10.0]), dtype=float))
        x0 = take("x0", [3.0, 4.0] if diag.shape[0] == 2 else np.full(diag.shape[0], 3.0))
        obj = QuadraticObjective(np.diag(diag))
        prob = Problem(name, CompositeObjective(obj), as_vector(x0, obj.dim), c_exact=1.0)
    elif name in ("entropy", "robust_q"):
        a, b = float(take("a", 1.0)), float(take("b", 4.0))
        m, x0 = float(take("minimizer", 2.0)), float(take("x0", 3.0))
        q = float(take("q", 1.5))
        link = ScalarLink("entropy") if name == "entropy" else ScalarLink("robust_q", q=q)
        obj = _tilted_scalar(link, a, b, m, x0, name, q)
        c = b / a if name == "entropy" else (b / a) ** (2 - q)
        prob = Problem(name, CompositeObjective(obj), as_vector([x0]), diameter=b - a, c_exact=c)
    elif name in ("entropy_box", "exp_shift"):
        default = (1.0, 4.0) if name == "entropy_box" else (-2.0, 2.0)
        a, b = float(take("a", default[0])), float(take("b", default[1]))
        kind = "entropy" if name == "entropy_box" else "exp_shift"
        obj = GlmObjective([[1.0]], kind, domain_box=([a], [b]),
                           analytic_stability=_interval_bound(kind, a, b), name=name)
        comp = CompositeObjective(obj, ProxTerm.box([a], [b]))
        xs = min(max(0.0 if kind == "exp_shift" else math.exp(-1.0), a), b)
        comp.x_star = as_vector([xs])
        comp.F_star = obj.value([xs])
        x0 = float(take("x0", b))
        c = b / a if kind == "entropy" else math.exp(b - a)
        prob = Problem(name, comp, as_vector([x0]), diameter=b - a, c_exact=c)
    elif name == "logistic_1d":
        R = float(take("bound", 2.0))
        obj = GlmObjective([[1.0], [-1.0]], "logistic", domain_box=([-R], [R]), x_star=[0.0],
                           analytic_stability=_interval_bound("logistic", -R, R), name=name)
        obj.f_star = obj.value([0.0])
        c = float(0.25 / (expit(R) * expit(-R)))
        prob = Problem(name, CompositeObjective(obj), as_vector([float(take("x0", R))]),
                       diameter=2 * R, c_exact=c)
    elif name in COUNTEREXAMPLES:
        k = take("k", 2 if name == "power_even" else (20 if name == "exp_2d" else 5))
        obj = make_counterexample(name, k=k if name == "power_even" else 2)
        default_x0 = {"power_even": [3.0], "exp_2d": [float(k), -float(k)], "neg_exp_linear": [float(k)]}[name]
        prob = Problem(name, CompositeObjective(obj), as_vector(take("x0", default_x0), obj.dim),
                       params={"k": k})
    elif name == "logistic_fixture":
        reg = take("regularizer", "none")
        comp = logistic_fixture(reg, lam=float(take("lam", 0.1)), lo=float(take("lo", -3.0)),
                                hi=float(take("hi", 3.0)))
        x0 = take("x0", [2.0, -2.0])
        prob = Problem(name, comp, as_vector(x0, comp.dim))
    else:
        raise ValueError(f"unknown zoo problem {name!r}; known: {', '.join(ZOO)}")
    if p:
        raise TypeError(f"unexpected parameters for {name!r}: {sorted(p)}")
    prob.params.update(params)
    return prob
