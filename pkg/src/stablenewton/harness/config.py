"""Experiment configuration: INI files with [problem], [solver], [probe], [output], [run]."""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from ..core import INF, ApproxScheme, NormSpec
from ..errors import ConfigError
from ..solvers import BacktrackingParams, SolverConfig

SOLVERS = ("exact_newton", "trust_region_newton", "approx_prox_newton", "backtracking_newton",
           "affine_invariant_tr", "gradient_descent", "exact_line_search_newton", "full_step_newton")
SECTIONS = ("problem", "solver", "probe", "output", "run")
FIXTURE_PREFIX = "fixture:"


def _float(text, key):
    t = str(text).strip().lower()
    if t in ("inf", "+inf", "infinity"):
        return INF
    if t in ("e", "exp(1)"):
        return math.e
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _int(text, key):
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _bool(text, key):
    t = str(text).strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _list(text):
    return [p.strip() for p in str(text).split(",") if p.strip()]


def _number_list(text, key):
    return [_float(p, key) for p in _list(text)]


def _scalar(text):
    """Best-effort typed value for free-form problem parameters."""
    t = str(text).strip()
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    if "," in t:
        return [_scalar(p) for p in _list(t)]
    return t


@dataclass
class ProblemSpec:
    name: Optional[str] = None
    params: dict = field(default_factory=dict)
    libsvm: Optional[str] = None
    link: str = "logistic"
    regularizer: str = "none"
    lam: float = 0.1
    lo: float = -3.0
    hi: float = 3.0
    normalize: bool = True
    dual_norm: str = "l2"
    x0: Optional[list] = None
    f_star: Optional[float] = None

    def key(self):
        """Identity used to check that compared runs share a problem."""
        return repr((self.name, sorted(self.params.items()), self.libsvm, self.link,
                     self.regularizer, self.lam, self.lo, self.hi, self.x0))


@dataclass
class SolverSpec:
    name: str
    config: SolverConfig
    sigma_auto: bool = False
    step: Optional[float] = None
    alpha: float = 1.0


@dataclass
class ProbeSpec:
    constants: list = field(default_factory=lambda: ["c", "d", "path_c"])
    n_pairs: int = 10000
    r_grid: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0, 2.0])
    gamma_grid: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    resolution: Optional[float] = None


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    solvers: list
    probe: Optional[ProbeSpec]
    output: str
    seed: int = 0
    source: Optional[str] = None

    @property
    def solver(self):
        return self.solvers[0]


def preset_dir():
    return resources.files("stablenewton.harness") / "presets"


def list_presets():
    return sorted(p.name[:-4] for p in preset_dir().iterdir() if p.name.endswith(".ini"))


def preset_path(name):
    path = preset_dir() / f"{name}.ini"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return str(path)


def resolve_data_path(text, base_dir):
    if text.startswith(FIXTURE_PREFIX):
        path = resources.files("stablenewton") / "data" / text[len(FIXTURE_PREFIX):]
        return str(path)
    return text if os.path.isabs(text) else os.path.normpath(os.path.join(base_dir, text))


def read_parser(path=None, text=None, overrides=()):
    """Parse INI text and apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        if path is not None:
            if not os.path.isfile(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path) as fh:
                cp.read_file(fh, source=path)
        elif text is not None:
            cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().rpartition(".")
        if not (sep and dot and section and option):
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    return cp


def _solver_config(sec, key_prefix, seed):
    def get(k, default=None):
        return sec.get(k, default)

    kw = {}
    sigma_auto = False
    if get("sigma") is not None:
        if str(get("sigma")).strip().lower() == "auto":
            sigma_auto = True
        else:
            kw["sigma"] = _float(get("sigma"), f"{key_prefix}.sigma")
    for name in ("radius", "theta", "gap_tol", "decrement_tol", "gamma", "f_star", "declared_c"):
        if get(name) is not None:
            kw[name] = _float(get(name), f"{key_prefix}.{name}")
    if get("max_iter") is not None:
        kw["max_iter"] = _int(get("max_iter"), f"{key_prefix}.max_iter")
    if get("norm") is not None:
        try:
            kw["norm"] = NormSpec.parse(get("norm").strip())
        except ValueError as exc:
            raise ConfigError(f"{key_prefix}.norm: {exc}") from None
    if get("monitor_eta") is not None:
        kw["monitor_eta"] = _bool(get("monitor_eta"), f"{key_prefix}.monitor_eta")
    approx = get("approx", "exact_hessian").strip()
    try:
        kw["approx_scheme"] = ApproxScheme(
            approx,
            rows=_int(get("rows"), f"{key_prefix}.rows") if get("rows") is not None else None,
            blocks=_int(get("blocks", "2"), f"{key_prefix}.blocks"),
            cg_tol=_float(get("cg_tol", "1e-10"), f"{key_prefix}.cg_tol"))
    except ValueError as exc:
        raise ConfigError(f"{key_prefix}.approx: {exc}") from None
    bt_keys = ("sigma0", "zeta1", "zeta2", "eta1", "eta2")
    if any(get(k) is not None for k in bt_keys) or _bool(get("backtracking", "no"), "backtracking"):
        try:
            kw["backtracking"] = BacktrackingParams(
                **{k: _float(get(k), f"{key_prefix}.{k}") for k in bt_keys if get(k) is not None})
        except ValueError as exc:
            raise ConfigError(f"{key_prefix}: {exc}") from None
    kw["seed"] = seed
    try:
        cfg = SolverConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"{key_prefix}: {exc}") from None
    return cfg, sigma_auto


def build_config(cp: configparser.ConfigParser, source=None, seed_override=None, out_override=None):
    """Validate a parsed config into an :class:`ExperimentConfig`."""
    unknown = [s for s in cp.sections() if s not in SECTIONS and not s.startswith("solver.")]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if not cp.has_section("problem"):
        raise ConfigError("missing [problem] section")
    if not cp.has_section("solver"):
        raise ConfigError("missing [solver] section")
    base_dir = os.path.dirname(os.path.abspath(source)) if source else os.getcwd()

    run = cp["run"] if cp.has_section("run") else {}
    seed = _int(run.get("seed", "0"), "run.seed")
    if seed_override is not None:
        seed = int(seed_override)
    if seed < 0:
        raise ConfigError("run.seed must be an unsigned integer")

    psec = dict(cp["problem"])
    spec = ProblemSpec()
    if "libsvm" in psec:
        spec.libsvm = resolve_data_path(psec.pop("libsvm").strip(), base_dir)
        if not os.path.isfile(spec.libsvm):
            raise ConfigError(f"problem.libsvm: file not found: {spec.libsvm}")
        spec.link = psec.pop("link", "logistic").strip()
        spec.normalize = _bool(psec.pop("normalize", "yes"), "problem.normalize")
        spec.dual_norm = psec.pop("dual_norm", "l2").strip()
    elif "name" in psec:
        spec.name = psec.pop("name").strip()
    else:
        raise ConfigError("problem needs either name or libsvm")
    spec.regularizer = psec.pop("regularizer", "none").strip()
    spec.lam = _float(psec.pop("lam", "0.1"), "problem.lam")
    spec.lo = _float(psec.pop("lo", "-3"), "problem.lo") if spec.libsvm else spec.lo
    spec.hi = _float(psec.pop("hi", "3"), "problem.hi") if spec.libsvm else spec.hi
    if "x0" in psec:
        spec.x0 = _number_list(psec.pop("x0"), "problem.x0")
    if "f_star" in psec:
        spec.f_star = _float(psec.pop("f_star"), "problem.f_star")
    if spec.regularizer != "none" and spec.name is not None:
        psec["regularizer"] = spec.regularizer
        if spec.regularizer == "l1":
            psec["lam"] = str(spec.lam)
    spec.params = {k: _scalar(v) for k, v in psec.items()}

    ssec = cp["solver"]
    names = _list(ssec.get("name", ""))
    if not names:
        raise ConfigError("solver.name is required")
    solvers = []
    for name in names:
        if name not in SOLVERS:
            raise ConfigError(f"unknown solver {name!r}; known: {', '.join(SOLVERS)}")
        merged = {k: v for k, v in ssec.items() if k != "name"}
        sub = f"solver.{name}"
        if cp.has_section(sub):
            merged.update(cp[sub])
        cfg, sigma_auto = _solver_config(merged, sub if cp.has_section(sub) else "solver", seed)
        step = _float(merged["step"], "solver.step") if "step" in merged else None
        alpha = _float(merged.get("alpha", "1"), "solver.alpha")
        solvers.append(SolverSpec(name, cfg, sigma_auto, step, alpha))

    probe = None
    if cp.has_section("probe"):
        q = cp["probe"]
        probe = ProbeSpec()
        if "constants" in q:
            probe.constants = _list(q["constants"])
            bad = [c for c in probe.constants if c not in ("c", "d", "path_c")]
            if bad:
                raise ConfigError(f"probe.constants: unknown {bad}")
        if "n_pairs" in q:
            probe.n_pairs = _int(q["n_pairs"], "probe.n_pairs")
        if "r_grid" in q:
            probe.r_grid = _number_list(q["r_grid"], "probe.r_grid")
        if "gamma_grid" in q:
            probe.gamma_grid = _number_list(q["gamma_grid"], "probe.gamma_grid")
        if "resolution" in q:
            probe.resolution = _float(q["resolution"], "probe.resolution")

    out = cp["output"].get("dir", "out") if cp.has_section("output") else "out"
    if out_override is not None:
        out = out_override
    elif not os.path.isabs(out) and source is not None and not source.startswith(str(preset_dir())):
        out = os.path.normpath(os.path.join(base_dir, out))
    return ExperimentConfig(spec, solvers, probe, out, seed, source)


def load_config(path=None, text=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    cp = read_parser(path, text, overrides)
    return build_config(cp, source=path, seed_override=seed, out_override=out)
