"""Command line entry points.

Thread pinning has to happen before the numerical stack loads, so this
module imports only the standard library at top level and defers everything
else into the dispatch path. Exit codes: 0 success, 1 at least one
verification check failed, 2 configuration or missing-artifact problems,
3 solver or stability failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

__all__ = ["main"]

log = logging.getLogger("krflab")

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

_COMMANDS = {
    "run-flow": "integrate the scalar flow and write the diagnostics table",
    "solve-static": "solve the elliptic limit equation on the base torus",
    "semiflat": "solve the fiberwise volume normalization",
    "barriers": "construct barrier envelopes and record their constants",
    "verify": "run verification checks against existing run artifacts",
    "report": "render figures and a text summary from existing artifacts",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krflab",
        description="Numerical laboratory for collapsing scalar potential flows "
                    "on periodic product geometries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="INI file describing the model and run")
        p.add_argument("--out", default=None,
                       help="override the output root directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the comparison stress-test seed")
        p.add_argument("--threads", type=int, default=None,
                       help="pin the BLAS/OpenMP thread count")
        p.add_argument("--verbose", action="store_true",
                       help="chatty progress logging")
    return parser


def _pin_threads(count: int | None) -> None:
    if count is None:
        raw = os.environ.get("KRF_THREADS")
        if raw is None:
            return
        try:
            count = int(raw)
        except ValueError:
            return
    if count < 1:
        return
    if "numpy" in sys.modules:
        log.warning("numpy already imported; thread pinning may not apply")
    for var in _THREAD_VARS:
        os.environ[var] = str(count)


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _stencil(cfg):
    from .operators import CENTRAL, WIDE

    return WIDE if cfg.flow["stencil"] == "wide" else CENTRAL


def _snapshot_schedule(cfg) -> tuple:
    t_end = cfg.flow["t_end"]
    times = set(float(t) for t in cfg.flow["snapshot_times"] if 0.0 < t <= t_end)
    every = cfg.flow["snapshot_every"]
    if every > 0:
        k = 1
        while k * every < t_end - 1e-12:
            times.add(round(k * every, 12))
            k += 1
    return tuple(sorted(times))


def _solve_static(built, cfg):
    from .static_solver import solve_static

    return solve_static(
        built.problem,
        method=cfg.solver["method"],
        tol=cfg.solver["tol"],
        max_iter=cfg.solver["max_iter"],
    )


def _pick_rho(built, cfg):
    """Explicit rho wins; otherwise optionally the fiberwise solution."""
    if built.rho is not None:
        return built.rho
    if cfg.barriers["use_semiflat_rho"]:
        from .geometry import semiflat_solve

        return semiflat_solve(built.problem, tol=cfg.solver["tol"]).rho
    return None


def _barrier_entry(barrier) -> dict:
    params = barrier.params
    entry = {
        "kind": barrier.kind,
        "label": barrier.label,
        "C": params.C,
        "t_start": params.t_start,
    }
    for name in ("B", "epsilon", "amplification", "r"):
        value = getattr(params, name)
        if value is not None:
            entry[name] = value
    entry.update({k: float(v) for k, v in params.extras.items()})
    return entry


def _build_barrier_set(built, cfg, phi_inf, rho):
    """Plain pair always; approximating families when a divisor is given."""
    from .barriers import (
        build_divisor_model,
        make_approx_subsolution,
        make_approx_supersolution,
        make_subsolution,
        make_supersolution,
    )
    from .flow import flow_value_bounds

    problem, phi0 = built.problem, built.phi0
    plain = (
        make_subsolution(problem, phi_inf, phi0, rho=rho),
        make_supersolution(problem, phi_inf, phi0, rho=rho),
    )
    approx = []
    if built.divisor_profile is not None:
        divisor = build_divisor_model(problem, built.divisor_profile)
        bounds = flow_value_bounds(problem, phi0)
        amp = cfg.barriers["amplification"]
        for eps in cfg.barriers["epsilon"]:
            approx.append(make_approx_subsolution(
                problem, divisor, eps, phi_inf, phi0, rho=rho,
                value_bounds=bounds))
            approx.append(make_approx_supersolution(
                problem, divisor, eps, phi_inf, phi0, rho=rho,
                amplification=amp, value_bounds=bounds))
    return plain, tuple(approx)


def cmd_solve_static(built, cfg, art: Path) -> int:
    from .fieldio import write_field

    sol = _solve_static(built, cfg)
    final_res = sol.residual_history[-1][1]
    write_field(art / "psi_base.field", sol.psi, meta={"residual": final_res})
    write_field(art / "phi_inf.field", sol.lifted)
    _write_json(art / "static.json", {
        "iterations": len(sol.residual_history) - 1,
        "residual_history": [[int(i), float(r)] for i, r in sol.residual_history],
        "sup_psi": float(sol.psi.values.max()),
        "inf_psi": float(sol.psi.values.min()),
    })
    print(f"static solve: {len(sol.residual_history) - 1} iterations, "
          f"residual {final_res:.3e}")
    print(f"wrote {art / 'phi_inf.field'}")
    return 0


def cmd_run_flow(built, cfg, art: Path) -> int:
    from .fieldio import write_field, write_trajectory_csv
    from .flow import flow_value_bounds, run, trajectory_rows

    problem, phi0 = built.problem, built.phi0
    static = _solve_static(built, cfg)
    write_field(art / "phi_inf.field", static.lifted)

    flow_cfg = cfg.flow
    traj = run(
        problem,
        phi0,
        t_end=flow_cfg["t_end"],
        dt0=flow_cfg["dt0"] or None,
        dt_max=flow_cfg["dt_max"],
        snapshot_schedule=_snapshot_schedule(cfg),
        phi_inf=static.lifted,
        stencil=_stencil(cfg),
        dt_min=flow_cfg["dt_min"],
        stationary_tol=flow_cfg["stationary_tol"] or None,
    )
    csv_path = write_trajectory_csv(art / "trajectory.csv",
                                    trajectory_rows(problem, traj))
    if cfg.output["save_fields"]:
        for idx, (ts, phi) in enumerate(traj.snapshots):
            write_field(art / f"snap_{idx:03d}.field", phi, meta={"t": float(ts)})
        write_field(art / "phi_final.field", traj.final_state.phi,
                    meta={"t": float(traj.final_state.t)})
    lo, hi = flow_value_bounds(problem, phi0)
    meta = dict(traj.meta)
    meta.update({
        "rows": traj.row_count,
        "t_end": float(traj.final_state.t),
        "value_bounds": [lo, hi],
        "snapshots": len(traj.snapshots),
    })
    _write_json(art / "flow.json", meta)
    print(f"flow: {meta['steps']} steps to t = {meta['t_end']:.4g} "
          f"in {meta['wall_time']:.2f}s "
          f"(halvings {meta['step_halvings']}, "
          f"controller shrinks {meta['controller_shrinks']})")
    print(f"wrote {csv_path}")
    return 0


def cmd_semiflat(built, cfg, art: Path) -> int:
    from .fieldio import write_field
    from .geometry import semiflat_solve

    sf = semiflat_solve(built.problem, tol=cfg.solver["tol"])
    write_field(art / "rho.field", sf.rho)
    _write_json(art / "semiflat.json", {
        "residual_sup": sf.residual_sup,
        "fiber_mean_abs_max": sf.mean_abs_max,
        "constant_min": float(sf.fiber_constants.min()),
        "constant_max": float(sf.fiber_constants.max()),
    })
    print(f"semiflat: residual {sf.residual_sup:.3e}, "
          f"fiber means within {sf.mean_abs_max:.3e}")
    print(f"wrote {art / 'rho.field'}")
    return 0


def cmd_barriers(built, cfg, art: Path) -> int:
    static = _solve_static(built, cfg)
    rho = _pick_rho(built, cfg)
    plain, approx = _build_barrier_set(built, cfg, static.lifted, rho)
    entries = [_barrier_entry(b) for b in plain + approx]
    _write_json(art / "barriers.json", {"barriers": entries})
    for entry in entries:
        bits = [f"{entry['kind']}"]
        for key in ("epsilon", "C", "B", "r", "t_start"):
            if key in entry:
                bits.append(f"{key}={entry[key]:.6g}")
        print("  ".join(bits))
    print(f"wrote {art / 'barriers.json'}")
    return 0


def _require_artifact(path: Path) -> Path:
    from .errors import DependencyError

    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; run 'krflab run-flow' for this config first")
    return path


def _load_trajectory(art: Path, grid):
    """Rebuild an in-memory trajectory from the CSV and snapshot artifacts."""
    from .errors import DependencyError
    from .fieldio import read_field, read_trajectory_csv
    from .flow import FlowState, Trajectory

    data = read_trajectory_csv(_require_artifact(art / "trajectory.csv"))
    snap_paths = sorted(art.glob("snap_*.field"))
    if not snap_paths:
        raise DependencyError(
            f"missing snapshot artifacts {art / 'snap_*.field'}; "
            "run 'krflab run-flow' with save_fields enabled")
    snapshots = []
    for path in snap_paths:
        field, meta = read_field(path)
        if field.grid.shape != grid.shape:
            raise DependencyError(
                f"snapshot {path} was written for grid {field.grid.shape}, "
                f"config builds {grid.shape}")
        snapshots.append((float(meta["t"]), field))
    snapshots.sort(key=lambda pair: pair[0])
    final = FlowState(t=float(data["t"][-1]), phi=snapshots[-1][1],
                      last_phi_dot=None, step_index=int(data["t"].size))
    return Trajectory(times=data["t"], series=dict(data),
                      snapshots=tuple(snapshots), final_state=final, meta={})


def cmd_verify(built, cfg, art: Path, seed: int) -> int:
    import numpy as np

    from .geometry import check_regular_family
    from .verification import (
        classify_viscosity,
        convergence_rate_fit,
        discrete_comparison_stress,
        sandwich_check,
        scheme_tolerance,
    )

    problem = built.problem
    traj = _load_trajectory(art, problem.grid)
    static = _solve_static(built, cfg)
    rho = _pick_rho(built, cfg)
    plain, _ = _build_barrier_set(built, cfg, static.lifted, rho)
    lower, upper = plain
    t_end = float(traj.times[-1])
    checks: dict[str, dict] = {}
    extras: dict[str, object] = {}

    window = tuple(cfg.verify["rate_window"])
    try:
        fit = convergence_rate_fit(traj, window)
        checks["rate"] = {
            "passed": bool(-1.15 <= fit.slope <= -0.85),
            "detail": f"slope {fit.slope:.4f} over window {window}",
        }
        extras["rate"] = {"slope": fit.slope, "c_fit": fit.c_fit,
                          "window": list(fit.window),
                          "log_misfit_rms": fit.log_misfit_rms}
    except ValueError as exc:
        checks["rate"] = {"passed": False, "detail": str(exc)}

    tol = cfg.verify["sandwich_tol"]
    if tol <= 0:
        tol, _worst = scheme_tolerance(traj)
    sand = sandwich_check(traj, lower, upper, tol)
    checks["sandwich"] = {
        "passed": bool(sand.passed),
        "detail": f"worst gap {sand.worst:.3e} at t = {sand.worst_time:.3g} "
                  f"(tol {sand.tol:.3e})",
    }

    times = [float(t) for t in cfg.verify["classify_times"]]
    if not times:
        times = [t for t in (0.5, 2.0, 6.0, 12.0) if t <= t_end + 1e-9]
    for barrier, name in ((lower, "classify_sub"), (upper, "classify_super")):
        rep = classify_viscosity(problem, barrier, times, tol=1e-8)
        checks[name] = {
            "passed": bool(rep.passed),
            "detail": f"worst violation {rep.worst:.3e} at t = {rep.worst_time:.3g}",
        }

    excess = traj.series["excess_IplusIprime"]
    finite = excess[np.isfinite(excess)]
    worst_excess = float(finite.max()) if finite.size else 0.0
    checks["integral_excess"] = {
        "passed": bool(worst_excess <= 1e-3),
        "detail": f"max excess {worst_excess:.3e} (allowed 1e-03)",
    }

    pairs = cfg.verify["stress_pairs"]
    if pairs > 0:
        stress = discrete_comparison_stress(
            problem, pair_count=pairs, seed=seed,
            t_end=cfg.verify["stress_t_end"])
        checks["comparison_stress"] = {
            "passed": bool(stress.passed),
            "detail": f"{stress.pairs} pairs, {stress.crossings} crossings, "
                      f"worst gap {stress.worst_gap:.3e}",
        }
        extras["stress_seed"] = seed

    trend = []
    prev = None
    trend_ok = True
    for eps in sorted(cfg.barriers["epsilon"], reverse=True):
        cert = check_regular_family(problem, eps, t_max=min(t_end, 12.0))
        trend.append({"epsilon": eps, "E": cert.E_of_epsilon,
                      "floor_ok": bool(cert.floor_ok)})
        if not cert.floor_ok or cert.E_of_epsilon > np.expm1(eps) + 1e-12:
            trend_ok = False
        if prev is not None and cert.E_of_epsilon > prev + 1e-15:
            trend_ok = False
        prev = cert.E_of_epsilon
    checks["regularity_trend"] = {
        "passed": trend_ok,
        "detail": ", ".join(f"E({row['epsilon']:g}) = {row['E']:.3e}"
                            for row in trend),
    }
    extras["regularity_trend"] = trend

    payload = {"checks": checks}
    payload.update(extras)
    _write_json(art / "verify.json", payload)
    failed = 0
    for name, result in checks.items():
        status = "PASS" if result["passed"] else "FAIL"
        if not result["passed"]:
            failed += 1
        print(f"{status}  {name}: {result['detail']}")
    print(f"wrote {art / 'verify.json'}")
    return 1 if failed else 0


def cmd_report(built, cfg, art: Path) -> int:
    from .errors import KrfError
    from .fieldio import read_field
    from .report import render_report

    pair = None
    phi_inf_path = art / "phi_inf.field"
    if phi_inf_path.exists():
        try:
            phi_inf, _meta = read_field(phi_inf_path)
            rho = _pick_rho(built, cfg)
            pair, _ = _build_barrier_set(built, cfg, phi_inf, rho)
        except KrfError as exc:
            log.warning("skipping barrier envelope panel: %s", exc)
            pair = None
    written = render_report(art, built=built, barrier_pair=pair)
    for path in written:
        print(f"wrote {path}")
    return 0


def _dispatch(args) -> int:
    from .config import build_model, load_config_file
    from .fieldio import artifact_dir

    cfg = load_config_file(args.config, environ=os.environ)
    out_root = args.out if args.out is not None else cfg.output["out_dir"]
    seed = args.seed if args.seed is not None else cfg.verify["stress_seed"]
    built = build_model(cfg)
    art = artifact_dir(out_root, cfg.digest)
    _write_json(art / "params.json", {
        "command": args.command,
        "config": str(Path(args.config).resolve()),
        "digest": cfg.digest,
        "overrides": list(cfg.overrides),
    })
    log.info("artifacts under %s", art)
    if args.command == "run-flow":
        return cmd_run_flow(built, cfg, art)
    if args.command == "solve-static":
        return cmd_solve_static(built, cfg, art)
    if args.command == "semiflat":
        return cmd_semiflat(built, cfg, art)
    if args.command == "barriers":
        return cmd_barriers(built, cfg, art)
    if args.command == "verify":
        return cmd_verify(built, cfg, art, seed)
    if args.command == "report":
        return cmd_report(built, cfg, art)
    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _pin_threads(args.threads)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    from .errors import (
        AdmissibilityError,
        ConfigError,
        DependencyError,
        HypothesisError,
        ModelError,
        SolverError,
        StabilityError,
    )

    try:
        return _dispatch(args)
    except (ConfigError, ModelError, DependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, StabilityError, AdmissibilityError, HypothesisError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
