"""Numerical laboratory for collapsing scalar potential flows on periodic
product geometries: flow integration, elliptic limit solves, barrier
envelopes, and a verification harness.

Submodules are loaded lazily so the command line wrapper can pin BLAS
thread counts before numpy is imported.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # errors
    "KrfError": "errors",
    "ConfigError": "errors",
    "ModelError": "errors",
    "DependencyError": "errors",
    "SolverError": "errors",
    "StabilityError": "errors",
    "AdmissibilityError": "errors",
    "HypothesisError": "errors",
    # grid
    "TorusGrid": "grid",
    "ScalarField": "grid",
    "build_torus_grid": "grid",
    # geometry
    "FlowProblem": "geometry",
    "ReactionSpec": "geometry",
    "build_product_problem": "geometry",
    "mixed_kappa_density": "geometry",
    "semiflat_solve": "geometry",
    "check_regular_family": "geometry",
    # operators
    "CENTRAL": "operators",
    "WIDE": "operators",
    # static solve
    "StaticSolution": "static_solver",
    "solve_static": "static_solver",
    "lift_to_total": "static_solver",
    # flow
    "FlowState": "flow",
    "Trajectory": "flow",
    "run": "flow",
    "step": "flow",
    "stability_cap": "flow",
    "integral_diagnostic": "flow",
    "flow_value_bounds": "flow",
    "save_state": "flow",
    "load_state": "flow",
    # barriers
    "Barrier": "barriers",
    "BarrierParams": "barriers",
    "DivisorModel": "barriers",
    "OdeSolution": "barriers",
    "barrier_h": "barriers",
    "barrier_g": "barriers",
    "solve_linear_reaction": "barriers",
    "rk4_reference": "barriers",
    "build_divisor_model": "barriers",
    "make_subsolution": "barriers",
    "make_supersolution": "barriers",
    "make_approx_subsolution": "barriers",
    "make_approx_supersolution": "barriers",
    # verification
    "ComparisonReport": "verification",
    "RateFit": "verification",
    "StressReport": "verification",
    "sandwich_check": "verification",
    "classify_viscosity": "verification",
    "convergence_rate_fit": "verification",
    "rate_fit_points": "verification",
    "scheme_tolerance": "verification",
    "discrete_comparison_stress": "verification",
    # ready-made geometries
    "acceptance_problem": "presets",
    "acceptance_phi0": "presets",
    "acceptance_divisor_profile": "presets",
    "constant_problem": "presets",
    "manufactured_refinement_problem": "presets",
    "perturbed_fiber_problem": "presets",
    # configuration
    "Config": "config",
    "BuiltModel": "config",
    "parse_expression": "config",
    "read_config": "config",
    "load_config_file": "config",
    "build_model": "config",
    # io and reporting
    "write_field": "fieldio",
    "read_field": "fieldio",
    "write_trajectory_csv": "fieldio",
    "read_trajectory_csv": "fieldio",
    "artifact_dir": "fieldio",
    "config_hash": "fieldio",
    "render_report": "report",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    module_name = _EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module 'krflab' has no attribute {name!r}")
    module = importlib.import_module(f".{module_name}", __name__)
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
