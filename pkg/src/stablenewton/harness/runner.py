"""Run, compare and probe experiments described by an :class:`ExperimentConfig`."""

from __future__ import annotations

import json
import math
import os
import tempfile
import warnings

import numpy as np

from ..core import CompositeObjective, LevelSetDomain, ProxTerm, _json_default, as_vector
from ..errors import ConfigError, InsufficientSamples, RateFitError, StableNewtonError
from ..objectives import Problem, load_libsvm, make_problem, newton_ratio_power_even
from ..oracle import fit_rate
from ..solvers import (affine_invariant_tr, approx_prox_newton, backtracking_newton,
                       bootstrap_optimum, exact_line_search_newton, exact_newton,
                       full_step_newton, gradient_descent_baseline, optimal_radius,
                       trust_region_newton, with_updates)
from ..stability import estimate_global_c, estimate_local_d, estimate_path_c, local_d_curve, path_c_curve

SCHEMA_VERSION = 1
GAP_THRESHOLDS = (1e-3, 1e-6, 1e-9)
BOUND_SLACK = 0.01


def write_atomic(path, text):
    """Write via a temporary file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj):
    return json.dumps(obj, indent=2, default=_json_default, allow_nan=False) + "\n"


def _finite(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


# -- problems ----------------------------------------------------------------

def build_problem(spec) -> Problem:
    """Problem from a :class:`ProblemSpec`; an unknown optimum is bootstrapped."""
    if spec.libsvm is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            smooth = load_libsvm(spec.libsvm, normalize=spec.normalize, link=spec.link,
                                 dual_norm=spec.dual_norm)
        n = smooth.dim
        if spec.regularizer == "l1":
            g = ProxTerm.l1(spec.lam)
        elif spec.regularizer == "box":
            g = ProxTerm.box(np.full(n, spec.lo), np.full(n, spec.hi))
        elif spec.regularizer == "none":
            g = ProxTerm.zero()
        else:
            raise ConfigError(f"unknown regularizer {spec.regularizer!r}")
        x0 = np.zeros(n) if spec.x0 is None else spec.x0
        prob = Problem(os.path.basename(spec.libsvm), CompositeObjective(smooth, g), as_vector(x0, n))
    else:
        params = dict(spec.params)
        if spec.x0 is not None:
            params["x0"] = spec.x0
        try:
            prob = make_problem(spec.name, **params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"problem: {exc}") from None
    if spec.f_star is not None:
        prob.objective.F_star = spec.f_star
        prob.params["f_star_source"] = "config"
    elif prob.objective.F_star is None:
        F, x = bootstrap_optimum(prob.objective, prob.x0)
        prob.objective.F_star, prob.objective.x_star = F, x
        prob.params["f_star_source"] = "bootstrap"
    return prob


class _Constants:
    """Lazily estimated stability constants on the problem's level set."""

    def __init__(self, prob: Problem, seed, n_pairs=10000, resolution=None):
        self.prob = prob
        self.seed = seed
        self.n_pairs = n_pairs
        self.resolution = resolution
        self._cache = {}
        self._dom = None

    def dom(self, norm=None):
        key = ("dom", None if norm is None else repr(norm))
        if key not in self._cache:
            kw = {} if norm is None else {"norm": norm}
            self._cache[key] = LevelSetDomain(self.prob.objective, self.prob.x0, **kw)
        return self._cache[key]

    def _kw(self):
        return {"n_pairs": self.n_pairs, "seed": self.seed, "resolution": self.resolution}

    def diameter(self, norm=None):
        return self.dom(norm).diameter

    def c(self):
        if "c" not in self._cache:
            self._cache["c"] = estimate_global_c(self.prob.objective, self.dom(), **self._kw())
        return self._cache["c"]

    def d(self, r, norm):
        key = ("d", float(r), repr(norm))
        if key not in self._cache:
            self._cache[key] = estimate_local_d(self.prob.objective, self.dom(norm), norm, r, **self._kw())
        return self._cache[key]

    def path_c(self, gamma):
        key = ("path_c", float(gamma))
        if key not in self._cache:
            self._cache[key] = estimate_path_c(self.prob.objective, self.dom(), gamma, **self._kw())
        return self._cache[key]


# -- solver dispatch ---------------------------------------------------------

def _dispatch(prob, sspec, cfg):
    comp = prob.objective
    name = sspec.name
    if name == "exact_newton":
        return exact_newton(comp, prob.x0, cfg)
    if name == "trust_region_newton":
        return trust_region_newton(comp, prob.x0, cfg)
    if name == "approx_prox_newton":
        return approx_prox_newton(comp, prob.x0, cfg)
    if name == "backtracking_newton":
        if cfg.backtracking is None:
            from ..solvers import BacktrackingParams
            cfg = with_updates(cfg, backtracking=BacktrackingParams())
        return backtracking_newton(comp, prob.x0, cfg)
    if name == "affine_invariant_tr":
        return affine_invariant_tr(comp, prob.x0, cfg.gamma, cfg)
    if name == "gradient_descent":
        step = sspec.step if sspec.step is not None else 1.0 / cfg.sigma
        return gradient_descent_baseline(comp, prob.x0, step, cfg.max_iter, cfg.gap_tol)
    if name == "exact_line_search_newton":
        return exact_line_search_newton(comp, prob.x0, cfg)
    if name == "full_step_newton":
        return full_step_newton(comp, prob.x0, sspec.alpha, cfg.max_iter)
    raise ConfigError(f"unknown solver {name!r}")


def _predicted(prob, sspec, cfg, consts: _Constants, trace):
    """Guaranteed per-step factor for this solver, with the constants it used."""
    name = sspec.name
    info = {"sigma": cfg.sigma}
    if name == "exact_newton" and prob.name == "power_even":
        k = int(prob.params.get("k", 2))
        if cfg.sigma == 1:
            info.update(kind="closed_form", factor=newton_ratio_power_even(k), precondition_met=True)
            return info
    if name == "exact_newton":
        c = consts.c().estimate
        info.update(kind="global_stability", c=c, factor=1 - 1 / (c * cfg.sigma),
                    precondition_met=cfg.sigma >= c)
    elif name == "trust_region_newton":
        D = consts.diameter(cfg.norm)
        r = min(cfg.radius, D)
        d = consts.d(r, cfg.norm).estimate
        info.update(kind="local_stability", D=D, r=r, d_r=d, factor=1 - r / (D * cfg.sigma * d),
                    precondition_met=cfg.sigma >= d)
    elif name == "approx_prox_newton":
        D = consts.diameter(cfg.norm)
        r = min(cfg.radius, D)
        d = consts.d(r, cfg.norm).estimate
        eta = trace.meta.get("eta")
        if eta is None:
            eta = 1.0 if cfg.approx_scheme.kind in ("exact_hessian", "hessian_free") else None
        if eta is None:
            info.update(kind="approximate_local_stability", factor=None, precondition_met=None,
                        reason="eta not measured")
            return info
        info.update(kind="approximate_local_stability", D=D, r=r, d_r=d, eta=eta, theta=cfg.theta,
                    factor=1 - cfg.theta * r / (D * eta * cfg.sigma * d),
                    precondition_met=cfg.sigma >= eta * d * (1 - 1e-12))
    elif name == "affine_invariant_tr":
        cg = consts.path_c(cfg.gamma).estimate
        eta = 1.0
        info.update(kind="path_stability", gamma=cfg.gamma, c_gamma=cg, eta=eta, theta=cfg.theta,
                    factor=1 - cfg.theta * cfg.gamma / (cfg.sigma * eta * cg),
                    precondition_met=cfg.sigma >= eta * cg * (1 - 1e-12))
    else:
        return None
    return info


def _resolve_sigma(prob, sspec, cfg, consts):
    """Smallest sigma meeting the rate precondition for the solver."""
    name = sspec.name
    if name == "exact_newton":
        return consts.c().estimate
    if name == "trust_region_newton":
        return consts.d(min(cfg.radius, consts.diameter(cfg.norm)), cfg.norm).estimate
    if name == "approx_prox_newton":
        return consts.d(min(cfg.radius, consts.diameter(cfg.norm)), cfg.norm).estimate
    if name == "affine_invariant_tr":
        return consts.path_c(cfg.gamma).estimate
    raise ConfigError(f"sigma = auto is not supported for {name}")


def run_solver(prob, sspec, consts):
    """Run one solver; returns ``(trace, report_entry)``."""
    cfg = sspec.config
    if sspec.sigma_auto:
        cfg = with_updates(cfg, sigma=_resolve_sigma(prob, sspec, cfg, consts))
    if sspec.name == "approx_prox_newton":
        cfg = with_updates(cfg, monitor_eta=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trace = _dispatch(prob, sspec, cfg)
        if sspec.sigma_auto and sspec.name == "approx_prox_newton":
            # eta is only known after the run: raise sigma until sigma >= eta * d(r)
            base = _resolve_sigma(prob, sspec, cfg, consts)
            for _ in range(5):
                eta = trace.meta.get("eta") or 1.0
                if cfg.sigma >= eta * base * (1 - 1e-12):
                    break
                cfg = with_updates(cfg, sigma=eta * base * 1.01)
                trace = _dispatch(prob, sspec, cfg)
    entry = {"solver": sspec.name, "status": trace.status, "message": trace.message,
             "iterations": trace.n_iterations, "sigma": cfg.sigma,
             "final_F": _finite(trace.records[-1].F), "final_gap": _finite(trace.records[-1].gap),
             "x_final": None if trace.x_final is None else trace.x_final.tolist(),
             "iterations_to_gap": {f"{t:g}": trace.iterations_to_gap(t) for t in GAP_THRESHOLDS}}
    if "n_rejected" in trace.meta:
        entry["n_rejected"] = trace.meta["n_rejected"]
    if "eta" in trace.meta:
        entry["eta"] = trace.meta["eta"]
    if "alphas" in trace.meta:
        entry["alphas"] = trace.meta["alphas"]
    recs = trace.records
    if len(recs) >= 2 and math.isfinite(recs[0].F) and recs[0].F != 0:
        entry["first_step_ratio"] = _finite(recs[1].F / recs[0].F)
    try:
        fit = fit_rate(trace, prob.objective.F_star)
        entry["rate_fit"] = fit.to_dict()
        measured = float(np.max(fit.per_step_factors))
    except RateFitError as exc:
        entry["rate_fit"] = None
        entry["rate_fit_error"] = str(exc)
        measured = None
    try:
        pred = _predicted(prob, sspec, cfg, consts, trace)
    except (StableNewtonError, ValueError) as exc:
        pred = {"factor": None, "reason": str(exc)}
    if pred is not None:
        pred["measured_factor"] = measured
        pred["predicted_factor"] = pred.pop("factor", None)
        if measured is not None and pred["predicted_factor"] is not None:
            pred["within_bound"] = measured <= pred["predicted_factor"] + BOUND_SLACK
        entry["bound_comparison"] = pred
    return trace, entry


# -- probes ------------------------------------------------------------------

def probe_problem(prob, probe, seed):
    """Stability constants, curves, the best radius and the predicted factors."""
    consts = _Constants(prob, seed, probe.n_pairs, probe.resolution)
    dom = consts.dom()
    D = dom.diameter
    kw = {"n_pairs": probe.n_pairs, "seed": seed, "resolution": probe.resolution}
    out = {"schema_version": SCHEMA_VERSION, "problem": prob.name, "seed": seed, "D": D}
    c = None
    if "c" in probe.constants:
        rep = consts.c()
        c = rep.estimate
        out["c"] = rep.to_dict()
        out["predicted"] = {"exact_newton_factor_at_sigma_c": 1 - 1 / c ** 2}
    if "d" in probe.constants:
        reps = local_d_curve(prob.objective, dom, None, probe.r_grid, **kw)
        out["d_curve"] = [{"r": rep.parameter, "d": rep.estimate} for rep in reps]
        rs = [rep.parameter for rep in reps]
        ds = [rep.estimate for rep in reps]
        r_star = optimal_radius(ds, rs)
        d_star = ds[rs.index(r_star)]
        out["r_star"] = r_star
        out.setdefault("predicted", {})["trust_region_factor_at_r_star"] = 1 - r_star / (D * d_star ** 2)
    if "path_c" in probe.constants:
        reps = path_c_curve(prob.objective, dom, probe.gamma_grid, **kw)
        out["path_c_curve"] = [{"gamma": rep.parameter, "c_gamma": rep.estimate} for rep in reps]
    return out


# -- top-level commands ------------------------------------------------------

def _solver_dirs(cfg):
    if len(cfg.solvers) == 1:
        return [cfg.output]
    return [os.path.join(cfg.output, s.name) for s in cfg.solvers]


def run_experiment(cfg):
    """Run every solver of a config; writes outputs and returns ``(exit_code, report)``."""
    prob = build_problem(cfg.problem)
    consts = _Constants(prob, cfg.seed)
    report = {"schema_version": SCHEMA_VERSION, "problem": prob.name,
              "problem_params": {k: v for k, v in prob.params.items()},
              "f_star": prob.objective.F_star, "seed": cfg.seed, "runs": []}
    code = 0
    if cfg.probe is not None:
        try:
            stab = probe_problem(prob, cfg.probe, cfg.seed)
            write_atomic(os.path.join(cfg.output, "stability.json"), dump_json(stab))
        except InsufficientSamples as exc:
            report["probe_error"] = str(exc)
            code = 4
    for sspec, out_dir in zip(cfg.solvers, _solver_dirs(cfg)):
        trace, entry = run_solver(prob, sspec, consts)
        write_atomic(os.path.join(out_dir, "trace.csv"), trace.to_csv())
        write_atomic(os.path.join(out_dir, "trace.json"), trace.to_json() + "\n")
        entry["output_dir"] = os.path.relpath(out_dir, cfg.output)
        report["runs"].append(entry)
        if trace.status == "numerical_failure" and code == 0:
            code = 3
    write_atomic(os.path.join(cfg.output, "report.json"), dump_json(report))
    return code, report


def compare_experiments(cfgs, out_dir):
    """Iterations-to-gap table over several configs on the same problem."""
    if len(cfgs) < 2:
        raise ConfigError("compare needs at least two configs")
    keys = {c.problem.key() for c in cfgs}
    if len(keys) != 1:
        raise ConfigError("compared configs use different problems")
    prob = build_problem(cfgs[0].problem)
    rows = []
    for i, cfg in enumerate(cfgs):
        consts = _Constants(prob, cfg.seed)
        label = os.path.splitext(os.path.basename(cfg.source))[0] if cfg.source else f"config{i}"
        for sspec in cfg.solvers:
            trace, entry = run_solver(prob, sspec, consts)
            rows.append([f"{label}:{sspec.name}"] +
                        [trace.iterations_to_gap(t) for t in GAP_THRESHOLDS])
    header = ["run"] + [f"iters_to_{t:g}" for t in GAP_THRESHOLDS]
    csv_lines = [",".join(header)] + [",".join("" if v is None else str(v) for v in r) for r in rows]
    cells = [header] + [[str(r[0])] + ["-" if v is None else str(v) for v in r[1:]] for r in rows]
    widths = [max(len(row[j]) for row in cells) for j in range(len(header))]
    text_lines = ["  ".join(cell.ljust(widths[j]) if j == 0 else cell.rjust(widths[j])
                            for j, cell in enumerate(row)) for row in cells]
    csv_text = "\n".join(csv_lines) + "\n"
    table = "\n".join(text_lines) + "\n"
    if out_dir is not None:
        write_atomic(os.path.join(out_dir, "compare.csv"), csv_text)
        write_atomic(os.path.join(out_dir, "compare.txt"), table)
    return rows, table
