"""Newton-type methods analysed through the stability of the Hessian.

The package provides objectives and problem generators, estimators for
Hessian stability constants, damped / trust-region / proximal / adaptive
Newton solvers, brute-force oracles and an experiment harness.
"""

from .core import (ApproxScheme, CompositeObjective, LevelSetDomain, NormSpec, Objective, ProxTerm,
                   QuadraticModel, SolveTrace, TraceRecord, level_set_contains)
from .errors import (ConfigError, DescentViolation, DimensionError, DomainError, EmptyDataError,
                     InnerSolverError, InsufficientSamples, NotPSDError, ParseError, RangeError,
                     RateFitError, SigmaWarning, StableNewtonError, UnboundedEta)
from .linalg import (cg_solve, check_sigma_scaling_inequality, psd_solve, solve_prox_subproblem,
                     solve_tr_subproblem)
from .objectives import (GlmObjective, LinearTransformObjective, Problem, QuadraticObjective,
                         ScalarLink, load_libsvm, make_counterexample, make_problem,
                         newton_ratio_power_even)
from .oracle import finite_diff_check, fit_rate, grid_minimize_quadratic, scalar_stability_exact
from .solvers import (BacktrackingParams, SolverConfig, affine_invariant_tr, approx_prox_newton,
                      backtracking_newton, exact_line_search_newton, exact_newton,
                      gradient_descent_baseline, optimal_radius, trust_region_newton)
from .stability import (StabilityBound, StabilityReport, analytic_bound, check_taylor_bounds,
                        estimate_eta, estimate_global_c, estimate_local_d, estimate_path_c)

__version__ = "0.1.0"
