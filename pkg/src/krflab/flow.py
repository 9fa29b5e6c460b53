"""Semi-implicit time stepping for the collapsing scalar flow.

The update treats the reaction implicitly and the log-determinant explicitly:

    phi^{k+1} = (phi^k + dt (G_k - b)) / (1 + a dt),
    G_k = log det_+(theta_t + D2 phi^k) - log(C e^{-(n-kappa) t} f_mu),

with F(t, x, r) = a r + b. Fixed points of the update are exactly the
discrete stationary states, independent of dt.

Stability is enforced a priori: the linearization of G is an elliptic
difference operator whose symbol is bounded by Gershgorin sums of the inverse
matrix entries over the stencil, and dt is capped at a safety fraction of
2 / lambda_max. On fiber-invariant product data the solution loses its fiber
dependence super-exponentially; once every nonzero fiber Fourier mode of phi
sits below a small multiple of machine rounding the field is snapped to its
fiber mean, after which fiber invariance is bitwise self-sustaining and the
cap only needs the base directions. Until then, modes that have decayed to
the rounding floor are truncated each step so they cannot seed the
(uncapped) high-frequency fiber symbols. Both operations alter phi by less
than ~1e-13 per step and are recorded in the trajectory metadata.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from math import comb

import numpy as np

from .errors import AdmissibilityError, ConfigError, StabilityError
from .fieldio import read_field, write_field
from .geometry import FlowProblem, theta_density
from .grid import ScalarField, TorusGrid
from .linalg import lambda_min, sym_det
from .operators import CENTRAL, HessianStencil, hessian_values, ma_density

__all__ = [
    "FlowState",
    "Trajectory",
    "IntegralReport",
    "step",
    "run",
    "stability_cap",
    "integral_diagnostic",
    "trajectory_rows",
    "flow_value_bounds",
    "save_state",
    "load_state",
]

STABILITY_SAFETY = 0.9

# fiber Fourier amplitudes below this multiple of eps * max(1, sup|phi|)
# count as numerically dead
HYGIENE_ULPS = 64.0


@dataclass(frozen=True)
class FlowState:
    """One accepted time slice of the flow.

    last_phi_dot is the realized difference quotient of the accepting step
    (zero for a freshly initialized state); fiber_locked marks bitwise fiber
    invariance established by the spectral hygiene snap.
    """

    t: float
    phi: ScalarField
    last_phi_dot: ScalarField
    step_index: int
    last_dt: float | None = None
    fiber_locked: bool = False


@dataclass
class Trajectory:
    """Diagnostics series of one flow run plus field snapshots.

    series maps column name -> array aligned with times; snapshots is a tuple
    of (t, phi) pairs at the requested schedule (plus the initial and final
    slices). The series arrays are never mutated after the run.
    """

    times: np.ndarray
    series: dict
    snapshots: tuple
    final_state: FlowState
    meta: dict

    @property
    def row_count(self) -> int:
        return int(self.times.size)

    def snapshot_at(self, t: float, atol: float = 1e-6) -> ScalarField:
        for ts, phi in self.snapshots:
            if abs(ts - t) <= atol:
                return phi
        raise ValueError(f"no snapshot within {atol:g} of t = {t:g}")


@dataclass
class IntegralReport:
    """Mean-value diagnostic I(t) = integral of phi f_mu against its bound.

    rate is the centered difference I' + I (nan at the endpoints); bound is
    log of the total theta_t mass ratio; excess = rate - bound. The
    concavity of log forces excess <= 0 up to scheme error.
    """

    times: np.ndarray
    i_values: np.ndarray
    rate: np.ndarray
    bound: np.ndarray
    excess: np.ndarray
    max_excess: float


def _inv_sym(m: np.ndarray) -> np.ndarray:
    n = m.shape[-1]
    if n == 1:
        return 1.0 / m
    if n == 2:
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        out = np.empty_like(m)
        out[..., 0, 0] = m[..., 1, 1] / det
        out[..., 1, 1] = m[..., 0, 0] / det
        out[..., 0, 1] = -m[..., 0, 1] / det
        out[..., 1, 0] = -m[..., 1, 0] / det
        return out
    return np.linalg.inv(m)


def _current_matrix(problem: FlowProblem, t: float, phi: ScalarField) -> np.ndarray:
    return problem.theta_at(t).matrices + hessian_values(phi.values, problem.grid)


def _axis_symbol_limits(grid: TorusGrid, fiber_mode_cap: int | None):
    """Per-axis maxima of the second-difference and first-difference symbols.

    fiber_mode_cap = None resolves every representable frequency; an integer
    restricts fiber axes to modes |k| <= cap (0 removes them entirely).
    """
    k2 = np.empty(grid.n_dims)
    s1 = np.empty(grid.n_dims)
    fiber = set(grid.fiber_axes)
    for d in range(grid.n_dims):
        h = grid.spacings[d]
        if d in fiber and fiber_mode_cap is not None:
            k_eff = min(int(fiber_mode_cap), grid.points[d] // 2)
            if k_eff <= 0:
                k2[d] = 0.0
                s1[d] = 0.0
                continue
            xi = k_eff * h
            k2[d] = (2.0 - 2.0 * np.cos(xi)) / (h * h)
            s1[d] = np.sin(min(xi, np.pi / 2)) / h
        else:
            k2[d] = 4.0 / (h * h)
            s1[d] = 1.0 / h
    return k2, s1


def stability_cap(problem: FlowProblem, t: float, phi: ScalarField,
                  stencil: HessianStencil = CENTRAL,
                  fiber_mode_cap: int | None = None,
                  _m: np.ndarray | None = None) -> float:
    """Largest dt the explicit log-determinant update provably tolerates.

    Central scheme: spectral bound 2 / max symbol of the linearized operator
    tr(M^{-1} D2 .), times STABILITY_SAFETY. Wide scheme: the monotonicity
    bound 1 / max |d G / d phi_center| over all direction bases.
    """
    grid = problem.grid
    if stencil.scheme == "wide_stencil":
        return _wide_monotone_cap(problem, t, phi.values, stencil)
    m = _current_matrix(problem, t, phi) if _m is None else _m
    minv = _inv_sym(m)
    k2, s1 = _axis_symbol_limits(grid, fiber_mode_cap)
    lam = np.zeros(grid.shape)
    for d in range(grid.n_dims):
        if k2[d] > 0:
            lam += minv[..., d, d] * k2[d]
        for e in range(d + 1, grid.n_dims):
            if s1[d] > 0 and s1[e] > 0:
                lam += 2.0 * np.abs(minv[..., d, e]) * s1[d] * s1[e]
    lam_max = float(lam.max())
    if lam_max <= 0:
        return np.inf
    return STABILITY_SAFETY * 2.0 / lam_max


def _wide_monotone_cap(problem: FlowProblem, t: float, values: np.ndarray,
                       stencil: HessianStencil) -> float:
    """Monotonicity cap: the update must stay nondecreasing in the center.

    Nodes where some directional value is nonpositive have their product
    clamped to the density floor, where the update does not depend on the
    center at all; they are excluded rather than floored, otherwise a single
    touching node would freeze the step size globally.
    """
    grid = problem.grid
    n = grid.n_dims
    h = grid.spacings
    theta = problem.theta_at(t).matrices
    worst = 0.0
    for basis in stencil.direction_bases(n):
        coercivity = None
        valid = None
        for v in basis:
            w = np.array(v, dtype=float) * h[0]
            norm2 = float(w @ w)
            vbar = w / np.sqrt(norm2)
            quad = np.einsum("...ij,i,j->...", theta, vbar, vbar)
            shift = tuple(-vi for vi in v)
            second = (
                np.roll(values, shift, axis=tuple(range(n)))
                - 2.0 * values
                + np.roll(values, v, axis=tuple(range(n)))
            ) / norm2
            q = quad + second
            pos = q > 0
            valid = pos if valid is None else (valid & pos)
            term = 2.0 / (norm2 * np.maximum(q, 1e-300))
            coercivity = term if coercivity is None else coercivity + term
        if valid.any():
            worst = max(worst, float(coercivity[valid].max()))
    if worst <= 0:
        return np.inf
    return STABILITY_SAFETY / worst


def _reaction_coefficients(problem: FlowProblem, t: float):
    spec = problem.reaction
    if spec.kind == "identity":
        return 1.0, 0.0
    return spec.slope, spec.offset_at(t)


def step(problem: FlowProblem, state: FlowState, dt: float,
         stencil: HessianStencil = CENTRAL, dt_min: float = 1e-8,
         _m: np.ndarray | None = None) -> FlowState:
    """Advance one accepted time step, halving dt on definiteness loss.

    The update is computed at the requested dt; if theta_{t+dt} + D2 phi_new
    leaves the positive cone at any node the step is retried at dt/2, down to
    dt_min, below which StabilityError reports the worst node. The returned
    state records the dt actually accepted.
    """
    if not (dt > 0) or not np.isfinite(dt):
        raise ValueError(f"dt must be a positive finite number, got {dt}")
    grid = problem.grid
    t = state.t
    phi = state.phi.values
    n, kappa = grid.n_dims, grid.base_dims
    norm = comb(n, kappa) * np.exp(-(n - kappa) * t)

    if stencil.scheme == "wide_stencil":
        density = ma_density(problem, t, state.phi, stencil=stencil, clamped=True).values
        floor = 1e-12 * problem.f_mu.values
        log_density = np.log(np.maximum(density, floor))
    else:
        m = _current_matrix(problem, t, state.phi) if _m is None else _m
        lam = lambda_min(m)
        scale = np.maximum(np.abs(m).max(axis=(-2, -1)), 1.0)
        if float((lam + 1e-12 * scale).min()) < 0:
            bad = np.unravel_index(int(np.argmin(lam)), lam.shape)
            raise AdmissibilityError(
                f"current state inadmissible at node {bad}: lambda_min = "
                f"{float(lam[bad]):g} at t = {t:g}"
            )
        log_density = np.log(np.maximum(sym_det(m) / norm, 1e-300))

    g_val = log_density - np.log(problem.f_mu.values)
    a, b = _reaction_coefficients(problem, t)

    dt_try = float(dt)
    worst_node, worst_lam = None, None
    while True:
        new_vals = (phi + dt_try * (g_val - b)) / (1.0 + a * dt_try)
        ok = bool(np.isfinite(new_vals).all())
        if ok and stencil.scheme == "central":
            m_new = problem.theta_at(t + dt_try).matrices + hessian_values(new_vals, grid)
            lam_new = lambda_min(m_new)
            ok = float(lam_new.min()) > 0.0
            if not ok:
                worst_node = np.unravel_index(int(np.argmin(lam_new)), lam_new.shape)
                worst_lam = float(lam_new.min())
        if ok:
            break
        dt_try *= 0.5
        if dt_try < dt_min:
            raise StabilityError(
                f"step at t = {t:g} rejected down to dt = {dt_try:g} < "
                f"dt_min = {dt_min:g}; worst node {worst_node} with "
                f"lambda_min = {worst_lam}"
            )

    phi_dot = (new_vals - phi) / dt_try
    return FlowState(
        t=t + dt_try,
        phi=ScalarField(grid, new_vals),
        last_phi_dot=ScalarField(grid, phi_dot),
        step_index=state.step_index + 1,
        last_dt=dt_try,
        fiber_locked=state.fiber_locked,
    )


def _fiber_mode_frequencies(grid: TorusGrid):
    """Max per-axis integer frequency of each fiber rfftn coefficient."""
    sizes = [grid.points[a] for a in grid.fiber_axes]
    freq_axes = []
    for i, size in enumerate(sizes):
        if i == len(sizes) - 1:
            freq_axes.append(np.arange(size // 2 + 1))
        else:
            idx = np.arange(size)
            freq_axes.append(np.minimum(idx, size - idx))
    grids = np.meshgrid(*freq_axes, indexing="ij")
    out = grids[0]
    for g in grids[1:]:
        out = np.maximum(out, g)
    return out


def _fiber_hygiene(grid: TorusGrid, values: np.ndarray, thresh: float,
                   freq_table: np.ndarray):
    """Truncate dead fiber modes; snap to the fiber mean when all are dead.

    Returns (max alive integer fiber frequency, possibly replaced values,
    snapped flag). The snap assigns the fiber mean verbatim so invariance is
    bitwise; partial truncation goes through one rfftn/irfftn round trip.
    """
    fiber_axes = grid.fiber_axes
    fshape = tuple(grid.points[a] for a in fiber_axes)
    total = 1
    for p in fshape:
        total *= p
    coeffs = np.fft.rfftn(values, axes=fiber_axes)
    amp = 2.0 * np.abs(coeffs) / total
    base_axes = tuple(range(grid.base_dims))
    amp_max = amp.max(axis=base_axes) if base_axes else amp
    zero_mode = freq_table == 0
    alive = (amp_max > thresh) & ~zero_mode
    if not alive.any():
        mean = values.mean(axis=fiber_axes, keepdims=True)
        snapped = np.broadcast_to(mean, values.shape).copy()
        return 0, snapped, True
    k_alive = int(freq_table[alive].max())
    dead = ~alive & ~zero_mode
    if not dead.any():
        return k_alive, values, False
    keep = ~dead
    coeffs *= keep
    new_vals = np.fft.irfftn(coeffs, s=fshape, axes=fiber_axes)
    return k_alive, new_vals, False


def run(problem: FlowProblem, phi0: ScalarField, t_end: float,
        dt0: float | None = None, dt_max: float = 0.05,
        snapshot_schedule=(), phi_inf: ScalarField | None = None,
        stencil: HessianStencil = CENTRAL, dt_min: float = 1e-8,
        stationary_tol: float | None = None) -> Trajectory:
    """Integrate the flow to t_end recording diagnostics each accepted step.

    phi_inf (a full-grid field) enables the dist_static column. Snapshots are
    stored at the first accepted step past each scheduled time, plus the
    initial and final slices. stationary_tol stops the run early once
    sup |phi_dot| falls below it (used by pseudo-time relaxation).
    """
    if t_end < 0:
        raise ValueError(f"t_end must be nonnegative, got {t_end}")
    if phi0.grid.shape != problem.grid.shape:
        raise ValueError(
            f"phi0 grid {phi0.grid.shape} does not match problem grid "
            f"{problem.grid.shape}"
        )
    if phi_inf is not None and phi_inf.grid.shape != problem.grid.shape:
        raise ValueError("phi_inf must live on the problem grid")
    grid = problem.grid

    # validates admissibility of the initial slice (raises otherwise)
    ma_density(problem, 0.0, phi0, stencil=stencil, clamped=False)

    f_vals = problem.f_mu.values
    cell = grid.cell_volume

    def diagnostics(state: FlowState):
        v = state.phi.values
        row = {
            "sup_phi": float(v.max()),
            "inf_phi": float(v.min()),
            "I_t": float((v * f_vals).sum() * cell),
            "dist_static": (
                float(np.abs(v - phi_inf.values).max()) if phi_inf is not None
                else np.nan
            ),
        }
        return row

    hygiene = (
        problem.fiber_invariant
        and grid.fiber_dims > 0
        and stencil.scheme == "central"
    )
    freq_table = _fiber_mode_frequencies(grid) if hygiene else None

    state = FlowState(
        t=0.0,
        phi=phi0.copy(),
        last_phi_dot=ScalarField(grid, np.zeros(grid.shape)),
        step_index=0,
    )

    times = [0.0]
    series = {key: [] for key in
              ("sup_phi", "inf_phi", "I_t", "dist_static", "max_residual", "dt")}
    first = diagnostics(state)
    for key, val in first.items():
        series[key].append(val)
    series["max_residual"].append(0.0)
    series["dt"].append(np.nan)

    schedule = sorted(float(s) for s in snapshot_schedule if 0.0 < s < t_end)
    snapshots = [(0.0, state.phi.copy())]
    pending = list(schedule)

    meta = {
        "step_halvings": 0,
        "controller_shrinks": 0,
        "locked_at": None,
        "fiber_hygiene": hygiene,
        "stencil": stencil.scheme,
    }
    wall_start = time.perf_counter()

    dt_ctrl = float(dt0) if dt0 is not None else dt_max
    s_prev = None
    k_alive = None

    while state.t < t_end - 1e-12:
        phi_vals = state.phi.values
        if hygiene and not state.fiber_locked:
            thresh = HYGIENE_ULPS * np.finfo(float).eps * max(
                1.0, float(np.abs(phi_vals).max()))
            k_alive, new_vals, snapped = _fiber_hygiene(
                grid, phi_vals, thresh, freq_table)
            if new_vals is not phi_vals:
                state = replace(state, phi=ScalarField(grid, new_vals))
            if snapped:
                state = replace(state, fiber_locked=True)
                meta["locked_at"] = state.t
        elif hygiene and state.fiber_locked and state.step_index % 512 == 0:
            dev = phi_vals - phi_vals.mean(axis=grid.fiber_axes, keepdims=True)
            if float(np.abs(dev).max()) != 0.0:
                # bitwise invariance broken: fall back to honest full caps
                state = replace(state, fiber_locked=False)
                meta["locked_at"] = None

        if hygiene:
            mode_cap = 0 if state.fiber_locked else k_alive
        else:
            mode_cap = None
        m_cur = None
        if stencil.scheme == "central":
            m_cur = _current_matrix(problem, state.t, state.phi)
        cap = stability_cap(problem, state.t, state.phi, stencil=stencil,
                            fiber_mode_cap=mode_cap, _m=m_cur)
        dt_target = min(dt_ctrl, cap, dt_max, t_end - state.t)
        new_state = step(problem, state, dt_target, stencil=stencil,
                         dt_min=dt_min, _m=m_cur)
        accepted = new_state.last_dt
        if accepted < 0.999 * dt_target:
            meta["step_halvings"] += 1
            dt_ctrl = accepted
        else:
            dt_ctrl = min(dt_ctrl * 1.05, dt_max)

        s_new = float(np.abs(new_state.last_phi_dot.values).max())
        if (
            s_prev is not None
            and new_state.step_index > 5
            and s_new > max(1.6 * s_prev, s_prev + 1e-9)
        ):
            meta["controller_shrinks"] += 1
            dt_ctrl = max(accepted * 0.5, dt_min)
        s_prev = s_new
        state = new_state

        a, _ = _reaction_coefficients(problem, state.t)
        row = diagnostics(state)
        times.append(state.t)
        for key, val in row.items():
            series[key].append(val)
        series["max_residual"].append(abs(a) * accepted * s_new)
        series["dt"].append(accepted)

        while pending and state.t >= pending[0] - 1e-12:
            pending.pop(0)
            snapshots.append((state.t, state.phi.copy()))

        if stationary_tol is not None and s_new <= stationary_tol:
            break

    if not snapshots or snapshots[-1][0] < state.t:
        snapshots.append((state.t, state.phi.copy()))
    meta["wall_time"] = time.perf_counter() - wall_start
    meta["steps"] = state.step_index

    return Trajectory(
        times=np.asarray(times),
        series={key: np.asarray(vals) for key, vals in series.items()},
        snapshots=tuple(snapshots),
        final_state=state,
        meta=meta,
    )


def integral_diagnostic(problem: FlowProblem, trajectory: Trajectory) -> IntegralReport:
    """Check the mean-value rate I' + I against the concavity bound.

    The bound log integral(theta_density) is evaluated through the cached
    mixed-determinant expansion, so it is a smooth explicit function of t.
    Needs at least two recorded rows for the centered difference.
    """
    times = trajectory.times
    if times.size < 2:
        raise ValueError("integral diagnostic needs at least two trajectory rows")
    i_vals = trajectory.series["I_t"]
    n, k = problem.grid.n_dims, problem.kappa
    md = problem.chi_mixed_determinants()
    cell = problem.grid.cell_volume
    md_int = np.array([float(md[j].sum() * cell) for j in range(k + 1)])
    f_mass = float(problem.f_mu.values.sum() * cell)

    def bound_at(t: float) -> float:
        one_minus_u = -np.expm1(-t)
        total = 0.0
        for j in range(k + 1):
            total += (
                comb(n, j) / comb(n, k)
                * one_minus_u ** j
                * np.exp(-(k - j) * t)
                * md_int[j]
            )
        return float(np.log(total / f_mass))

    bound = np.array([bound_at(t) for t in times])
    rate = np.full(times.size, np.nan)
    for i in range(1, times.size - 1):
        # second-order three-point derivative on a nonuniform time grid
        # (the plain centered quotient loses an order wherever dt jumps)
        hp = times[i + 1] - times[i]
        hm = times[i] - times[i - 1]
        deriv = (
            hm * hm * i_vals[i + 1]
            + (hp * hp - hm * hm) * i_vals[i]
            - hp * hp * i_vals[i - 1]
        ) / (hp * hm * (hp + hm))
        rate[i] = deriv + i_vals[i]
    excess = rate - bound
    finite = np.isfinite(excess)
    max_excess = float(excess[finite].max()) if finite.any() else np.nan
    return IntegralReport(
        times=times,
        i_values=i_vals,
        rate=rate,
        bound=bound,
        excess=excess,
        max_excess=max_excess,
    )


def trajectory_rows(problem: FlowProblem, trajectory: Trajectory) -> list:
    """Flatten a trajectory into CSV-ready row dicts (fieldio.CSV_COLUMNS)."""
    excess = None
    if trajectory.times.size >= 2:
        excess = integral_diagnostic(problem, trajectory).excess
    rows = []
    for i, t in enumerate(trajectory.times):
        rows.append({
            "t": float(t),
            "sup_phi": float(trajectory.series["sup_phi"][i]),
            "inf_phi": float(trajectory.series["inf_phi"][i]),
            "I_t": float(trajectory.series["I_t"][i]),
            "excess_IplusIprime": (
                float(excess[i]) if excess is not None else np.nan
            ),
            "dist_static": float(trajectory.series["dist_static"][i]),
            "max_residual": float(trajectory.series["max_residual"][i]),
            "dt": float(trajectory.series["dt"][i]),
        })
    return rows


def flow_value_bounds(problem: FlowProblem, phi0: ScalarField,
                      t_cap: float = 60.0, samples: int = 181) -> tuple:
    """A priori uniform bounds on phi along the flow, from the max principle.

    At a spatial max of phi the Hessian term is nonpositive, so
    phi_dot + phi <= log(theta_density / f_mu) there; comparison with the
    scalar ODE gives sup phi(t) <= max(sup phi0, sup_(s,x) of that log),
    and symmetrically for the min. The density ratio converges as t grows
    (the expansion terminates at MD_kappa), so sampling out to t_cap
    captures the sup over all of [0, infinity).
    """
    if phi0.grid.shape != problem.grid.shape:
        raise ValueError("phi0 must live on the problem grid")
    f = problem.f_mu.values
    hi = float(phi0.values.max())
    lo = float(phi0.values.min())
    for t in np.linspace(0.0, t_cap, samples):
        ratio = np.log(theta_density(problem, float(t)).values / f)
        hi = max(hi, float(ratio.max()))
        lo = min(lo, float(ratio.min()))
    return lo, hi


def save_state(path, state: FlowState) -> None:
    """Checkpoint a FlowState in the binary field format."""
    write_field(path, state.phi, meta={
        "t": state.t,
        "step_index": state.step_index,
        "last_dt": state.last_dt,
        "fiber_locked": state.fiber_locked,
    })


def load_state(path, grid: TorusGrid) -> FlowState:
    """Load a checkpoint, refusing grids that do not match."""
    phi, meta = read_field(path)
    if phi.grid.shape != grid.shape or phi.grid.base_dims != grid.base_dims:
        raise ConfigError(
            f"checkpoint grid {phi.grid.shape} (kappa = {phi.grid.base_dims}) "
            f"does not match expected {grid.shape} (kappa = {grid.base_dims})"
        )
    phi = ScalarField(grid, phi.values)
    return FlowState(
        t=float(meta["t"]),
        phi=phi,
        last_phi_dot=ScalarField(grid, np.zeros(grid.shape)),
        step_index=int(meta["step_index"]),
        last_dt=meta.get("last_dt"),
        fiber_locked=bool(meta.get("fiber_locked", False)),
    )
