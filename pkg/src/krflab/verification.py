"""Checks tying flow trajectories to barriers and the static limit.

Three kinds of evidence: trajectory sandwiching between evaluated barriers,
pointwise classification of a barrier against the discrete operator, and
the exponential convergence rate toward the static profile. Pass/fail is
always derived from the reported worst number and the stated tolerance, so
a report can never claim success that its own figures contradict.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .barriers import Barrier
from .errors import StabilityError
from .flow import FlowState, Trajectory, stability_cap, step
from .geometry import FlowProblem
from .grid import ScalarField
from .linalg import lambda_min
from .operators import CENTRAL, WIDE, HessianStencil, hessian_values, residual

__all__ = [
    "ComparisonReport",
    "RateFit",
    "StressReport",
    "sandwich_check",
    "classify_viscosity",
    "convergence_rate_fit",
    "rate_fit_points",
    "scheme_tolerance",
    "discrete_comparison_stress",
]


@dataclass(frozen=True)
class ComparisonReport:
    """Worst violation of a one-sided inequality over a set of times."""

    kind: str
    times: tuple
    worst: float
    worst_time: float
    tol: float
    details: dict

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit dist(t) ~ C (1 + t) e^(slope t) over a window."""

    c_fit: float
    slope: float
    window: tuple
    times: np.ndarray
    log_misfit_rms: float


@dataclass(frozen=True)
class StressReport:
    """Outcome of randomized discrete comparison runs."""

    pairs: int
    crossings: int
    worst_gap: float
    steps_total: int
    seed: int

    @property
    def passed(self) -> bool:
        return self.crossings == 0


def _joint_mask(shape, *barriers) -> np.ndarray | None:
    mask = None
    for b in barriers:
        if b.mask is None:
            continue
        mask = b.mask if mask is None else (mask & b.mask)
    return mask


def sandwich_check(trajectory: Trajectory, lower: Barrier, upper: Barrier,
                   tol: float) -> ComparisonReport:
    """Verify lower <= phi <= upper at every stored snapshot.

    Only snapshots past both activation times participate; at least one must
    remain (ValueError otherwise). Violations are measured as positive
    excursions past either barrier, maximized over the joint region.
    """
    t_min = max(lower.t_start, upper.t_start)
    usable = [(t, phi) for t, phi in trajectory.snapshots if t >= t_min - 1e-12]
    if not usable:
        raise ValueError(
            f"no snapshots at or after the barrier activation time {t_min:g}"
        )
    mask = _joint_mask(usable[0][1].values.shape, lower, upper)
    worst, worst_time = -np.inf, usable[0][0]
    for t, phi in usable:
        below = lower.value(t).values - phi.values
        above = phi.values - upper.value(t).values
        gap = np.maximum(below, above)
        if mask is not None:
            gap = gap[mask]
        g = float(gap.max())
        if g > worst:
            worst, worst_time = g, t
    return ComparisonReport(
        kind="sandwich",
        times=tuple(t for t, _ in usable),
        worst=worst,
        worst_time=worst_time,
        tol=tol,
        details={"t_min": t_min, "snapshots": len(usable)},
    )


def classify_viscosity(problem: FlowProblem, barrier: Barrier, times,
                       tol: float, stencil: HessianStencil = CENTRAL,
                       tag_tol: float = 1e-9) -> ComparisonReport:
    """Classify a barrier against the discrete operator at given times.

    For a sub barrier the residual must be >= -tol on the barrier's region
    at every time (symmetrically for super). Exact time derivatives keep the
    check free of time-discretization error. Times before the activation
    time are dropped; dropping all of them is an error.
    """
    if barrier.kind not in ("sub", "super"):
        raise ValueError(f"barrier kind must be 'sub' or 'super', got {barrier.kind!r}")
    usable = [float(t) for t in times if t >= barrier.t_start - 1e-12]
    if not usable:
        raise ValueError(
            f"no classification times at or after activation time "
            f"{barrier.t_start:g}"
        )
    worst, worst_time = -np.inf, usable[0]
    counts_at_worst = None
    for t in usable:
        field = residual(
            problem, t, barrier.value(t), barrier.time_derivative(t),
            tol=tag_tol, stencil=stencil,
        )
        if barrier.kind == "sub":
            v = field.worst_sub_violation(barrier.mask)
        else:
            v = field.worst_super_violation(barrier.mask)
        if v > worst:
            worst, worst_time = v, t
            counts_at_worst = field.counts()
    return ComparisonReport(
        kind=f"classify-{barrier.kind}",
        times=tuple(usable),
        worst=worst,
        worst_time=worst_time,
        tol=tol,
        details={"counts_at_worst": counts_at_worst, "label": barrier.label},
    )


def rate_fit_points(times: np.ndarray, dists: np.ndarray, window: tuple) -> RateFit:
    """Fit log(dist / (1 + t)) = log C + slope * t over the window.

    Rows where dist has hit the rounding floor (1e-12 of the largest
    distance) are discarded with a warning, shortening the fit rather than
    letting log of noise corrupt the slope. An empty window is an error.
    """
    times = np.asarray(times, dtype=float)
    dists = np.asarray(dists, dtype=float)
    lo, hi = float(window[0]), float(window[1])
    sel = (times >= lo) & (times <= hi) & np.isfinite(dists)
    if not sel.any():
        raise ValueError(f"no trajectory rows inside the fit window [{lo:g}, {hi:g}]")
    floor = 1e-12 * max(float(np.nanmax(dists)), 1e-300)
    floored = sel & (dists <= floor)
    if floored.any():
        warnings.warn(
            f"{int(floored.sum())} rows in the fit window sit at the rounding "
            f"floor and were dropped", stacklevel=2)
        sel &= dists > floor
        if not sel.any():
            raise ValueError("every row in the fit window sits at the rounding floor")
    t_sel = times[sel]
    y = np.log(dists[sel]) - np.log1p(t_sel)
    slope, intercept = np.polyfit(t_sel, y, 1)
    rms = float(np.sqrt(np.mean((y - (slope * t_sel + intercept)) ** 2)))
    return RateFit(
        c_fit=float(np.exp(intercept)),
        slope=float(slope),
        window=(lo, hi),
        times=t_sel,
        log_misfit_rms=rms,
    )


def convergence_rate_fit(trajectory: Trajectory, window: tuple) -> RateFit:
    """Rate fit on the recorded sup-distance to the static profile."""
    dists = trajectory.series.get("dist_static")
    if dists is None or not np.isfinite(dists).any():
        raise ValueError(
            "trajectory has no dist_static series; rerun the flow with phi_inf"
        )
    return rate_fit_points(trajectory.times, dists, window)


def scheme_tolerance(trajectory: Trajectory, gap0: float | None = None) -> tuple:
    """Sandwich tolerance calibrated to the scheme's own relaxation error.

    The semi-implicit update contracts a constant offset by 1/(1 + dt) per
    step; running that scalar recursion on the realized dt sequence and
    comparing with e^-t measures the time-discretization error the sandwich
    inequality inherits. Returns (tolerance, scheme_error) with tolerance =
    10 * scheme_error * gap0 (gap0 defaults to the initial distance to the
    static profile).
    """
    times = trajectory.times
    dts = trajectory.series["dt"]
    if gap0 is None:
        d0 = trajectory.series["dist_static"][0]
        if not np.isfinite(d0):
            raise ValueError("gap0 not given and dist_static not recorded")
        gap0 = float(d0)
    c = 1.0
    worst = 0.0
    for i in range(1, times.size):
        c /= 1.0 + dts[i]
        worst = max(worst, abs(c - np.exp(-times[i])))
    return 10.0 * worst * gap0, worst


def _random_admissible(problem: FlowProblem, rng: np.random.Generator,
                       stencil: HessianStencil) -> ScalarField:
    """Low-frequency random field scaled well inside the admissible cone.

    For the wide scheme, admissible means every directional value keeps a
    margin of a few percent of the metric scale; without the margin the
    monotonicity step cap collapses and the lockstep runs stall.
    """
    from .operators import _wide_directional

    grid = problem.grid
    coords = grid.coordinate_fields()
    vals = np.zeros(grid.shape)
    for _ in range(4):
        amp = rng.uniform(-0.15, 0.15)
        freqs = rng.integers(-2, 3, size=grid.n_dims)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.zeros(grid.shape)
        for d in range(grid.n_dims):
            wave = wave + freqs[d] * coords[d]
        vals += amp * np.cos(wave + phase)
    theta0 = problem.theta_at(0.0).matrices
    scale = float(np.einsum("...ii->...", theta0).max())
    for _ in range(60):
        if stencil.scheme == "wide_stencil":
            _, dir_min = _wide_directional(problem, 0.0, vals, stencil, clamped=True)
            if float(dir_min.min()) > 0.05 * scale:
                return ScalarField(grid, vals)
        else:
            m = theta0 + hessian_values(vals, grid)
            if float(lambda_min(m).min()) > 1e-10:
                return ScalarField(grid, vals)
        vals *= 0.5
    return ScalarField(grid, np.zeros(grid.shape))


def _nonnegative_bump(problem: FlowProblem, rng: np.random.Generator) -> np.ndarray:
    """Nonnegative perturbation with curvature small next to the margin of
    _random_admissible, so the bumped state stays steppable too."""
    grid = problem.grid
    coords = grid.coordinate_fields()
    bump = np.full(grid.shape, rng.uniform(0.01, 0.05))
    for d in range(grid.n_dims):
        amp = rng.uniform(0.0, 0.03)
        shift = rng.uniform(0, 2 * np.pi)
        bump = bump + amp * (1.0 + np.cos(coords[d] - shift))
    return bump


def discrete_comparison_stress(problem: FlowProblem, pair_count: int = 50,
                               seed: int = 0, t_end: float = 0.4,
                               stencil: HessianStencil | None = None,
                               dt_max: float = 0.05) -> StressReport:
    """Randomized ordered pairs evolved in lockstep must stay ordered.

    Each pair is (phi, phi + nonnegative bump); both evolve with the same dt
    sequence, capped by the monotonicity bound of whichever state is
    stiffer. With the wide stencil the update is monotone in the neighbor
    values for such dt, so any crossing (below -1e-12) is a genuine scheme
    defect. The report carries the worst signed gap actually observed.
    """
    if pair_count < 1:
        raise ValueError(f"pair_count must be at least 1, got {pair_count}")
    if stencil is None:
        stencil = WIDE
    rng = np.random.default_rng(seed)
    crossings = 0
    worst_gap = np.inf
    steps_total = 0
    grid = problem.grid
    zero = ScalarField(grid, np.zeros(grid.shape))
    for _ in range(pair_count):
        low = _random_admissible(problem, rng, stencil)
        high = ScalarField(grid, low.values + _nonnegative_bump(problem, rng))
        state_a = FlowState(t=0.0, phi=low, last_phi_dot=zero, step_index=0)
        state_b = FlowState(t=0.0, phi=high, last_phi_dot=zero, step_index=0)
        budget = 200_000
        while state_a.t < t_end - 1e-12:
            if state_a.step_index >= budget:
                raise StabilityError(
                    f"stress pair exceeded {budget} steps before t = {t_end:g}; "
                    f"the monotonicity cap collapsed near a degenerate node"
                )
            cap = min(
                stability_cap(problem, state_a.t, state_a.phi, stencil=stencil),
                stability_cap(problem, state_b.t, state_b.phi, stencil=stencil),
            )
            dt = min(cap, dt_max, t_end - state_a.t)
            state_a = step(problem, state_a, dt, stencil=stencil)
            state_b = step(problem, state_b, dt, stencil=stencil)
            if state_b.last_dt != state_a.last_dt:
                raise StabilityError(
                    "lockstep broken: the paired states accepted different dt"
                )
            gap = float((state_b.phi.values - state_a.phi.values).min())
            worst_gap = min(worst_gap, gap)
            if gap < -1e-12:
                crossings += 1
                break
            steps_total += 1
    return StressReport(
        pairs=pair_count,
        crossings=crossings,
        worst_gap=worst_gap,
        steps_total=steps_total,
        seed=seed,
    )
