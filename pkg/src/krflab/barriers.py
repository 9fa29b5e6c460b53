"""Explicit comparison barriers for the collapsing flow.

Each barrier is affine in three static fields (the limit profile, the
fiberwise potential rho, the divisor log-norm) with exponential-in-time
coefficients plus a scalar reaction ODE part y' + y = R(t). The time
derivative is therefore exact in t: classification residuals contain no
time-differencing error, only the spatial scheme.

The plain pair works on the whole torus under a semidefiniteness hypothesis
on omega_rho = A0 + D2 rho. The divisor-penalized pair trades an
epsilon-thin neighborhood of the degenerate set for validity under much
weaker hypotheses; its constants (region radius, activation time, bulk
constant) are produced here verbatim from the inputs, so a failed
hypothesis surfaces as HypothesisError rather than a silently wrong
barrier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import HypothesisError
from .flow import flow_value_bounds
from .geometry import FlowProblem, mixed_kappa_density
from .grid import ScalarField
from .linalg import lambda_min, mixed_determinants, pencil_eig_bounds
from .operators import hessian_values

__all__ = [
    "OdeSolution",
    "solve_linear_reaction",
    "rk4_reference",
    "barrier_h",
    "barrier_g",
    "Barrier",
    "BarrierParams",
    "DivisorModel",
    "build_divisor_model",
    "make_subsolution",
    "make_supersolution",
    "make_approx_subsolution",
    "make_approx_supersolution",
]


def _ln_one_plus_exp(x: float) -> float:
    """log(1 + e^x) without overflow for any float x."""
    if x <= 0:
        return math.log1p(math.exp(x))
    return x + math.log1p(math.exp(-x))


@dataclass(frozen=True)
class OdeSolution:
    """Solution of y' + y = forcing(t), y(t0) = 0, with an exact evaluator."""

    t0: float
    forcing: Callable[[float], float]
    _evaluate: Callable[[float], float]

    def __call__(self, t):
        if np.ndim(t) > 0:
            return np.array([self._evaluate(float(s)) for s in np.ravel(t)]).reshape(np.shape(t))
        return self._evaluate(float(t))

    def derivative(self, t: float) -> float:
        return self.forcing(float(t)) - self._evaluate(float(t))

    def residual_sup(self, times, delta: float = 1e-3) -> float:
        """Five-point finite-difference defect of y' + y - R over times.

        The fourth-order stencil at a moderate delta keeps both truncation
        and cancellation error near 1e-13, well under closed-form checks.
        """
        worst = 0.0
        for t in times:
            t = float(t)
            if t - 2 * delta <= self.t0:
                continue
            ydot = (
                self._evaluate(t - 2 * delta)
                - 8.0 * self._evaluate(t - delta)
                + 8.0 * self._evaluate(t + delta)
                - self._evaluate(t + 2 * delta)
            ) / (12.0 * delta)
            worst = max(worst, abs(ydot + self._evaluate(t) - self.forcing(t)))
        return worst


def solve_linear_reaction(forcing: Callable[[float], float], t0: float) -> OdeSolution:
    """Variation-of-constants solution y(t) = int_t0^t e^(s-t) forcing(s) ds.

    Handles forcings with an integrable singularity at t0 (logarithmic or
    weaker); rejects non-integrable ones by probing x * |forcing(t0 + x)|
    as x -> 0, which must vanish for convergence of the integral.
    """
    probes = [1e-3, 1e-5, 1e-7, 1e-9, 1e-11]
    weighted = []
    for x in probes:
        val = forcing(t0 + x)
        if not np.isfinite(val):
            raise ValueError(
                f"forcing is not finite at t0 + {x:g}; cannot integrate from t0 = {t0:g}"
            )
        weighted.append(x * abs(val))
    if weighted[-1] > 1e-6 or weighted[-1] > weighted[0] + 1e-12:
        raise ValueError(
            f"forcing is not integrable at t0 = {t0:g}: "
            f"x * |forcing(t0 + x)| = {weighted[-1]:g} does not vanish"
        )

    def evaluate(t: float) -> float:
        if t < t0 - 1e-12:
            raise ValueError(f"solution defined for t >= {t0:g}, got {t:g}")
        if t <= t0:
            return 0.0

        def integrand(s):
            return math.exp(s - t) * forcing(s)

        # split off the (possibly singular) start so quad's endpoint
        # handling never sees a long smooth tail at the same time
        if t > t0 + 2.0:
            head, _ = quad(integrand, t0, t0 + 2.0, epsabs=1e-13, epsrel=1e-12, limit=200)
            tail, _ = quad(integrand, t0 + 2.0, t, epsabs=1e-13, epsrel=1e-12, limit=200)
            return head + tail
        val, _ = quad(integrand, t0, t, epsabs=1e-13, epsrel=1e-12, limit=200)
        return val

    return OdeSolution(t0=float(t0), forcing=forcing, _evaluate=evaluate)


def rk4_reference(forcing: Callable[[float], float], t0: float, t_end: float,
                  dt: float = 1e-3):
    """Classical RK4 integration of y' + y = forcing, y(t0) = 0.

    If the forcing is singular at t0 the first node is seeded from the local
    expansion of the integral with forcing c0 log(s - t0) + c1 (fitting c0,
    c1 from two nearby samples), then the mesh grows geometrically away from
    the singularity before switching to the uniform step. Returns (times,
    values) arrays including the initial node.
    """
    if t_end <= t0:
        raise ValueError("t_end must exceed t0")
    times = [t0]
    values = [0.0]
    if np.isfinite(forcing(t0)):
        t, y = t0, 0.0
    else:
        delta = 1e-6
        c0 = forcing(t0 + delta) - forcing(t0 + delta / math.e)
        c1 = forcing(t0 + delta) - c0 * math.log(delta)
        y = delta * (c0 * (math.log(delta) - 1.0) + c1)
        t = t0 + delta
        times.append(t)
        values.append(y)

    def rhs(s, v):
        return forcing(s) - v

    while t < t_end - 1e-14:
        offset = t - t0
        if offset < 0.1:
            step = min(max(offset * 0.01, 1e-8), 0.1 - offset + 1e-15, t_end - t)
        else:
            step = min(dt, t_end - t)
        k1 = rhs(t, y)
        k2 = rhs(t + step / 2, y + step * k1 / 2)
        k3 = rhs(t + step / 2, y + step * k2 / 2)
        k4 = rhs(t + step, y + step * k3)
        y = y + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        t = t + step
        times.append(t)
        values.append(y)
    return np.asarray(times), np.asarray(values)


def barrier_h(kappa: int) -> OdeSolution:
    """Closed form of y' + y = kappa log(1 - e^-t), y(0) = 0.

    y(t) = kappa [(1 - u) log(1 - u) - t u] with u = e^-t. Negative for
    t > 0 and decaying like -kappa (1 + t) e^-t.
    """
    if kappa < 1:
        raise ValueError(f"kappa must be a positive integer, got {kappa}")

    def evaluate(t: float) -> float:
        if t < 0:
            raise ValueError(f"defined for t >= 0, got {t:g}")
        if t == 0.0:
            return 0.0
        one_minus_u = -math.expm1(-t)
        return kappa * (one_minus_u * math.log(one_minus_u) - t * math.exp(-t))

    def forcing(t: float) -> float:
        if t <= 0:
            return -math.inf
        return kappa * math.log(-math.expm1(-t))

    return OdeSolution(t0=0.0, forcing=forcing, _evaluate=evaluate)


def barrier_g(kappa: int, b_const: float) -> OdeSolution:
    """Closed form of y' + y = kappa log(1 + e^(B - t)), y(0) = 0.

    y(t) = kappa [log(1 + e^(B-t)) + e^(B-t) log(e^t + e^B)
                  - e^-t (1 + e^B) log(1 + e^B)],
    nonnegative and decaying like kappa e^B (1 + t) e^-t. Stable for any
    float B (including -inf, where the forcing vanishes identically).
    """
    if kappa < 1:
        raise ValueError(f"kappa must be a positive integer, got {kappa}")
    b = float(b_const)

    def evaluate(t: float) -> float:
        if t < 0:
            raise ValueError(f"defined for t >= 0, got {t:g}")
        if t == 0.0:
            return 0.0
        term1 = _ln_one_plus_exp(b - t)
        if b == -math.inf:
            return kappa * term1
        log_sum = max(t, b) + math.log1p(math.exp(-abs(t - b)))
        term2 = math.exp(b - t) * log_sum
        term3 = math.exp(-t) * (1.0 + math.exp(b)) * _ln_one_plus_exp(b)
        return kappa * (term1 + term2 - term3)

    def forcing(t: float) -> float:
        return kappa * _ln_one_plus_exp(b - t)

    return OdeSolution(t0=0.0, forcing=forcing, _evaluate=evaluate)


@dataclass(frozen=True)
class BarrierParams:
    """Constants produced while assembling a barrier, for reporting."""

    C: float
    B: float | None = None
    epsilon: float | None = None
    amplification: float | None = None
    r: float | None = None
    t_start: float = 0.0
    extras: dict = field(default_factory=dict)


@dataclass
class Barrier:
    """Candidate comparison function alpha(t) phi_inf + e^-t (rho -+ C)
    + penalty + y(t), with alpha(t) = a0 + a1 e^-t.

    value and time_derivative are exact in t. mask (None = everywhere)
    restricts where the barrier claims validity; t_start is the first time.
    """

    kind: str
    phi_inf: ScalarField
    static_coeff: tuple
    decay_field: ScalarField
    penalty_field: ScalarField | None
    y: OdeSolution
    params: BarrierParams
    mask: np.ndarray | None = None
    label: str = ""

    @property
    def t_start(self) -> float:
        return self.params.t_start

    def value(self, t: float) -> ScalarField:
        t = float(t)
        if t < self.t_start - 1e-9:
            raise ValueError(
                f"{self.label or self.kind} barrier defined for t >= "
                f"{self.t_start:g}, got {t:g}"
            )
        u = math.exp(-t)
        a0, a1 = self.static_coeff
        vals = (a0 + a1 * u) * self.phi_inf.values + u * self.decay_field.values
        if self.penalty_field is not None:
            vals = vals + self.penalty_field.values
        vals = vals + self.y(t)
        return ScalarField(self.phi_inf.grid, vals)

    def time_derivative(self, t: float) -> ScalarField:
        t = float(t)
        if t < self.t_start - 1e-9:
            raise ValueError(
                f"{self.label or self.kind} barrier defined for t >= "
                f"{self.t_start:g}, got {t:g}"
            )
        u = math.exp(-t)
        a1 = self.static_coeff[1]
        vals = -u * (a1 * self.phi_inf.values + self.decay_field.values)
        vals = vals + self.y.derivative(t)
        return ScalarField(self.phi_inf.grid, vals)


def _as_full_field(problem: FlowProblem, data, name: str) -> ScalarField:
    """Accept None (zero), a full-grid field, or base-grid data to lift."""
    grid = problem.grid
    if data is None:
        return ScalarField(grid, np.zeros(grid.shape))
    if isinstance(data, ScalarField):
        if data.grid.shape == grid.shape:
            return data
        if data.grid.shape == grid.shape[:problem.kappa]:
            return ScalarField(grid, problem.lift_base_values(data.values))
        raise ValueError(f"{name} grid {data.grid.shape} matches neither the "
                         f"full grid nor the base grid")
    arr = np.asarray(data, dtype=float)
    if arr.shape == grid.shape:
        return ScalarField(grid, arr)
    if arr.shape == grid.shape[:problem.kappa]:
        return ScalarField(grid, problem.lift_base_values(arr))
    raise ValueError(f"{name} shape {arr.shape} matches neither the full "
                     f"grid nor the base grid")


def _omega_rho(problem: FlowProblem, rho: ScalarField) -> np.ndarray:
    return problem.a0.matrices + hessian_values(rho.values, problem.grid)


def _require_omega_rho_psd(problem: FlowProblem, w: np.ndarray,
                           mask: np.ndarray | None = None) -> None:
    lam = lambda_min(w)
    scale = np.maximum(np.abs(w).max(axis=(-2, -1)), 1.0)
    margin = lam + 1e-12 * scale
    if mask is not None:
        margin = np.where(mask, margin, np.inf)
    if float(margin.min()) < 0:
        bad = np.unravel_index(int(np.argmin(margin)), margin.shape)
        raise HypothesisError(
            f"omega_rho = A0 + D2 rho must be positive semidefinite"
            f"{' on the retained region' if mask is not None else ''}; "
            f"node {bad} has lambda_min = {float(lam[bad]):g}"
        )


def _static_density(problem: FlowProblem, phi_inf: ScalarField) -> np.ndarray:
    return np.exp(phi_inf.values) * problem.f_mu.values


def _check_calibration(problem: FlowProblem, phi_inf: ScalarField,
                       rho: ScalarField, mask: np.ndarray | None = None) -> float:
    """The limit profile must dominate: MD_kappa(chi_inf, omega_rho) <= e^phi_inf f."""
    ratio = mixed_kappa_density(problem, phi_inf, rho).values / _static_density(problem, phi_inf)
    check = ratio if mask is None else np.where(mask, ratio, -np.inf)
    worst = float(check.max())
    if worst > 1.0 + 1e-12:
        bad = np.unravel_index(int(np.argmax(check)), check.shape)
        raise HypothesisError(
            f"mixed density exceeds the static density at node {bad} "
            f"(ratio {worst:.12g}); the limit profile does not dominate"
        )
    return worst


def make_subsolution(problem: FlowProblem, phi_inf, phi0: ScalarField,
                     rho=None) -> Barrier:
    """Sliding subsolution (1 - e^-t) phi_inf + e^-t (rho - C) + h(t).

    Requires omega_rho positive semidefinite everywhere (HypothesisError
    otherwise). C = sup(rho - phi0) pins the barrier under the initial data;
    the h(t) part absorbs the collapsing volume factor exactly, making the
    discrete comparison inequality hold with no scheme slack.
    """
    phi_inf = _as_full_field(problem, phi_inf, "phi_inf")
    rho = _as_full_field(problem, rho, "rho")
    _require_omega_rho_psd(problem, _omega_rho(problem, rho))
    c_const = float((rho.values - phi0.values).max())
    decay = ScalarField(problem.grid, rho.values - c_const)
    return Barrier(
        kind="sub",
        phi_inf=phi_inf,
        static_coeff=(1.0, -1.0),
        decay_field=decay,
        penalty_field=None,
        y=barrier_h(problem.kappa),
        params=BarrierParams(C=c_const),
        mask=None,
        label="plain-sub",
    )


def make_supersolution(problem: FlowProblem, phi_inf, phi0: ScalarField,
                       rho=None, b_const: float | None = None) -> Barrier:
    """Sliding supersolution (1 - e^-t) phi_inf + e^-t (rho + C) + g(t).

    B (the transient-excess constant in the forcing) is measured from the
    lower mixed determinants of (chi_inf, omega_rho) against the static
    density unless supplied. The calibration gate checks the limit profile
    actually dominates the top mixed determinant.
    """
    phi_inf = _as_full_field(problem, phi_inf, "phi_inf")
    rho = _as_full_field(problem, rho, "rho")
    grid = problem.grid
    n, k = grid.n_dims, problem.kappa
    w = _omega_rho(problem, rho)
    _require_omega_rho_psd(problem, w)
    _check_calibration(problem, phi_inf, rho)
    if b_const is None:
        chi_inf = problem.achi.matrices + hessian_values(phi_inf.values, grid)
        md = mixed_determinants(chi_inf, w)
        lower = np.zeros(grid.shape)
        for j in range(k):
            lower += comb(n, j) / comb(n, k) * md[j]
        ratio = lower / _static_density(problem, phi_inf)
        b_const = math.log(1.1 * max(float(ratio.max()), 1e-300))
    c_const = float((phi0.values - rho.values).max())
    decay = ScalarField(grid, rho.values + c_const)
    return Barrier(
        kind="super",
        phi_inf=phi_inf,
        static_coeff=(1.0, -1.0),
        decay_field=decay,
        penalty_field=None,
        y=barrier_g(k, b_const),
        params=BarrierParams(C=c_const, B=b_const),
        mask=None,
        label="plain-super",
    )


@dataclass(frozen=True)
class DivisorModel:
    """Pulled-back divisor data: log-norm, curvature margin, and regions.

    log_s <= 0 everywhere (the section norm profile lives in (0, 1]);
    curvature_margin is the worst eigenvalue of chi_base + D2 log_s (the
    barrier hypotheses need it nonnegative up to rounding); a_curv is the
    largest generalized eigenvalue of -D2 log_s against chi_base.
    """

    log_s: ScalarField
    log_s_base: np.ndarray
    profile_base: np.ndarray
    curvature_margin: float
    a_curv: float
    _problem: FlowProblem

    def omega_region(self, r: float) -> np.ndarray:
        """Full-grid mask of { |s| >= r } (inclusive)."""
        base_mask = self.profile_base >= r
        return self._problem.lift_base_values(base_mask.astype(float)) > 0.5

    def boundary_ring(self, r: float) -> np.ndarray:
        """Nodes of the region with an axis neighbor outside it."""
        base_mask = self.profile_base >= r
        ring = np.zeros_like(base_mask)
        for axis in range(base_mask.ndim):
            for shift in (1, -1):
                ring |= base_mask & ~np.roll(base_mask, shift, axis=axis)
        return self._problem.lift_base_values(ring.astype(float)) > 0.5


def build_divisor_model(problem: FlowProblem, profile) -> DivisorModel:
    """Validate a base divisor section norm |s|_h and its curvature.

    profile: base-grid values in (0, 1]. The curvature hypothesis is
    chi_base + D2 log|s| >= 0 nodewise (up to 1e-10 relative); violation
    raises HypothesisError since every penalized barrier depends on it.
    """
    base = problem.grid.base_grid()
    if isinstance(profile, ScalarField):
        if profile.grid.shape != base.shape:
            raise ValueError(
                f"divisor profile grid {profile.grid.shape} does not match "
                f"base grid {base.shape}"
            )
        prof = profile.values
    else:
        prof = np.asarray(profile, dtype=float)
        if prof.shape != base.shape:
            raise ValueError(
                f"divisor profile shape {prof.shape} does not match base "
                f"grid {base.shape}"
            )
    if not np.isfinite(prof).all() or prof.min() <= 0 or prof.max() > 1.0 + 1e-12:
        bad = np.unravel_index(int(np.argmin(prof)), prof.shape)
        raise ValueError(
            f"divisor section norm must take values in (0, 1]; node {bad} "
            f"has {prof[bad]:g}"
        )
    log_base = np.log(prof)
    curv = hessian_values(log_base, base)
    chi_b = problem.achi_base_field().matrices
    total = chi_b + curv
    lam = lambda_min(total)
    scale = np.maximum(np.abs(chi_b).max(axis=(-2, -1)), 1e-30)
    margin = float((lam / scale).min())
    if margin < -1e-10:
        bad = np.unravel_index(int(np.argmin(lam)), lam.shape)
        raise HypothesisError(
            f"divisor curvature exceeds chi at base node {bad}: "
            f"lambda_min(chi + D2 log|s|) = {float(lam[bad]):g}"
        )
    _, gmax = pencil_eig_bounds(-curv, chi_b)
    return DivisorModel(
        log_s=ScalarField(problem.grid, problem.lift_base_values(log_base)),
        log_s_base=log_base,
        profile_base=prof,
        curvature_margin=margin,
        a_curv=float(gmax.max()),
        _problem=problem,
    )


def make_approx_subsolution(problem: FlowProblem, divisor: DivisorModel,
                            epsilon: float, phi_inf, phi0: ScalarField,
                            rho=None, value_bounds=None) -> Barrier:
    """Divisor-penalized subsolution on { |s| >= r } x [T0, inf).

    (1 - e^-t - eps) phi_inf + e^-t (rho - C) + eps log|s| + y(t), with the
    region radius r, the activation time T0, and the constant C produced
    from the a priori flow bounds so that the barrier sits below the flow on
    the region's parabolic boundary. The forcing has an integrable log
    singularity at the time where (1 - e^-t - eps)^kappa first exceeds the
    transient excess e^(B - t).
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    phi_inf = _as_full_field(problem, phi_inf, "phi_inf")
    rho = _as_full_field(problem, rho, "rho")
    grid = problem.grid
    k = problem.kappa
    if value_bounds is None:
        value_bounds = flow_value_bounds(problem, phi0)
    m_low, m_up = float(value_bounds[0]), float(value_bounds[1])

    sup_inf_profile = float(phi_inf.values.max())
    inf_inf_profile = float(phi_inf.values.min())

    # (1): the region radius, small enough that eps log|s| dominates the
    # gap between the barrier bulk and the flow lower bound on the cut
    r = min(0.5, math.exp(2.0 * (m_low - (1.0 - epsilon) * sup_inf_profile) / epsilon))
    mask = divisor.omega_region(r)
    ring = divisor.boundary_ring(r)

    w = _omega_rho(problem, rho)
    _require_omega_rho_psd(problem, w, mask=mask)

    # (2): from the activation time on, the decaying rho term can no longer
    # push the barrier above the flow on the spatial boundary of the region
    t_activate = 0.0
    if ring.any():
        rho_ring_max = float(rho.values[ring].max())
        if rho_ring_max > 0:
            t_activate = max(
                0.0, math.log(rho_ring_max * 2.0 / (epsilon * abs(math.log(r))))
            )

    # transient-excess constant from the generalized eigenvalues of
    # omega_rho against omega_0 over the retained region
    _, gmax = pencil_eig_bounds(w, problem.a0.matrices)
    c_ratio = float(gmax[mask].max())
    b_const = math.log(1.1 * max(c_ratio, 1.0))

    # singular time: (1 - e^-t - eps)^kappa = e^(B - t) has a unique root
    # (left side increasing from 0, right side decreasing)
    t_lo = -math.log1p(-epsilon) + 1e-12

    def gap(t: float) -> float:
        return k * math.log(-math.expm1(-t) - epsilon) - (b_const - t)

    t_singular = brentq(gap, t_lo, 100.0, xtol=1e-14, rtol=8.9e-16)
    t_start = max(t_activate, t_singular)

    # (3): bulk constant pinning the barrier under the flow at t = T0
    rho_region_max = float(rho.values[mask].max())
    c_const = max(
        1.0 + 1e-9,
        math.exp(t_start) * (
            (1.0 - epsilon) * sup_inf_profile
            + math.exp(-t_start) * rho_region_max
            - m_low
        ),
    )

    def forcing(t: float) -> float:
        arg = (-math.expm1(-t) - epsilon) ** k - math.exp(b_const - t)
        if arg <= 0:
            return -math.inf
        return epsilon * inf_inf_profile + math.log(arg)

    y = solve_linear_reaction(forcing, t0=t_start)
    penalty = ScalarField(grid, epsilon * divisor.log_s.values)
    decay = ScalarField(grid, rho.values - c_const)
    params = BarrierParams(
        C=c_const,
        B=b_const,
        epsilon=epsilon,
        r=r,
        t_start=t_start,
        extras={
            "t_activate": t_activate,
            "t_singular": t_singular,
            "pencil_ratio": c_ratio,
            "m_low": m_low,
            "m_up": m_up,
        },
    )
    return Barrier(
        kind="sub",
        phi_inf=phi_inf,
        static_coeff=(1.0 - epsilon, -1.0),
        decay_field=decay,
        penalty_field=penalty,
        y=y,
        params=params,
        mask=mask,
        label="penalized-sub",
    )


def _psd_clamp(m: np.ndarray) -> np.ndarray:
    """Project each symmetric matrix onto the PSD cone (eigenvalue clip)."""
    w, v = np.linalg.eigh(m)
    w = np.maximum(w, 0.0)
    return np.einsum("...ij,...j,...kj->...ik", v, w, v)


def make_approx_supersolution(problem: FlowProblem, divisor: DivisorModel,
                              epsilon: float, phi_inf, phi0: ScalarField,
                              rho=None, amplification: float = 1.0,
                              value_bounds=None) -> Barrier:
    """Divisor-penalized supersolution on { |s| >= r } x [T0, inf).

    (1 + eps A) phi_inf + e^-t (rho + C) - eps log|s| + y(t). The amplified
    static coefficient buys positivity of the residual; the measured B
    bounds the lower mixed determinants against the static density (with
    omega_rho clamped to the PSD cone, a rigorous enlargement). The forcing
    is smooth, so y has a closed form.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if amplification <= 0:
        raise ValueError(f"amplification must be positive, got {amplification}")
    phi_inf = _as_full_field(problem, phi_inf, "phi_inf")
    rho = _as_full_field(problem, rho, "rho")
    grid = problem.grid
    n, k = grid.n_dims, problem.kappa
    if value_bounds is None:
        value_bounds = flow_value_bounds(problem, phi0)
    m_low, m_up = float(value_bounds[0]), float(value_bounds[1])
    amp = float(amplification)
    lifted_coeff = 1.0 + epsilon * amp

    inf_inf_profile = float(phi_inf.values.min())

    r = min(0.5, math.exp(-2.0 * (m_up - lifted_coeff * inf_inf_profile) / epsilon))
    mask = divisor.omega_region(r)
    ring = divisor.boundary_ring(r)

    t_activate = 0.0
    if ring.any():
        rho_ring_min = float(rho.values[ring].min())
        if rho_ring_min < 0:
            t_activate = max(
                0.0, math.log(-rho_ring_min * 2.0 / (epsilon * abs(math.log(r))))
            )
    t_start = t_activate

    _check_calibration(problem, phi_inf, rho, mask=mask)

    chi_inf = problem.achi.matrices + hessian_values(phi_inf.values, grid)
    md = mixed_determinants(chi_inf, _psd_clamp(_omega_rho(problem, rho)))
    lower = np.zeros(grid.shape)
    for j in range(k):
        lower += comb(n, j) / comb(n, k) * lifted_coeff ** j * md[j]
    ratio = lower / _static_density(problem, phi_inf)
    b_const = math.log(1.1 * max(float(ratio[mask].max()), 1e-300))

    rho_region_min = float(rho.values[mask].min())
    c_const = max(
        1.0 + 1e-9,
        math.exp(t_start) * (
            m_up - lifted_coeff * inf_inf_profile
            - math.exp(-t_start) * rho_region_min
        ),
    )

    # forcing log[(1 + eps A)^kappa + e^(B - t)] - A eps inf(phi_inf)
    # = c0 + log(1 + e^(B~ - t)): closed form via the supersolution ODE
    c0 = k * math.log(lifted_coeff) - amp * epsilon * inf_inf_profile
    b_shifted = b_const - k * math.log(lifted_coeff)
    tail = barrier_g(1, b_shifted)

    def evaluate(t: float) -> float:
        if t < 0:
            raise ValueError(f"defined for t >= 0, got {t:g}")
        return c0 * (-math.expm1(-t)) + tail(t)

    def forcing(t: float) -> float:
        return c0 + _ln_one_plus_exp(b_shifted - t)

    y = OdeSolution(t0=0.0, forcing=forcing, _evaluate=evaluate)
    penalty = ScalarField(grid, -epsilon * divisor.log_s.values)
    decay = ScalarField(grid, rho.values + c_const)
    params = BarrierParams(
        C=c_const,
        B=b_const,
        epsilon=epsilon,
        amplification=amp,
        r=r,
        t_start=t_start,
        extras={"t_activate": t_activate, "m_low": m_low, "m_up": m_up},
    )
    return Barrier(
        kind="super",
        phi_inf=phi_inf,
        static_coeff=(lifted_coeff, 0.0),
        decay_field=decay,
        penalty_field=penalty,
        y=y,
        params=params,
        mask=mask,
        label="penalized-super",
    )
