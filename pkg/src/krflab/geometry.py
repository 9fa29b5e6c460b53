"""Toric-periodic model geometries for the collapsing flow.

A FlowProblem packages the time-dependent metric family

    theta_t = chi + e^{-t} (omega_0 - chi) = e^{-t} omega_0 + (1 - e^{-t}) chi

in matrix form (a0 for omega_0, achi for chi), the reference density f_mu and
the reaction term. chi lives on the base block only: its matrix is zero
outside the leading kappa x kappa block and constant along the fiber axes, so
the fibration structure (projection onto the first kappa torus factors) is
carried entirely by the matrix layout.

Masses are normalized at construction: f_mu integrates to 1 and so does the
mixed-volume density MD_kappa(chi, omega_0), the coefficient of the collapsing
top power. That pair of normalizations is what keeps the flow density bounded
as t grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np

from .errors import ConfigError, ModelError
from .grid import MetricField, ScalarField, TorusGrid, build_torus_grid
from .linalg import lambda_min, mixed_determinants, pencil_eig_bounds, sym_det
from .operators import hessian_values

__all__ = [
    "ReactionSpec",
    "FlowProblem",
    "SemiFlatField",
    "RegularityCertificate",
    "build_torus_grid",
    "build_product_problem",
    "theta_at",
    "theta_density",
    "pushforward_density",
    "static_weight",
    "semiflat_solve",
    "check_regular_family",
    "mixed_kappa_density",
]


@dataclass(frozen=True)
class ReactionSpec:
    """Reaction term F(t, x, r), nondecreasing in r.

    kind 'identity' is F = r (the normalized flow); 'affine' is
    F = slope * r + offset with slope >= 0. The offset may be a constant or
    a callable t -> array broadcastable over the grid.
    """

    kind: str = "identity"
    slope: float = 1.0
    offset: float | Callable = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "affine"):
            raise ConfigError(f"unknown reaction kind {self.kind!r}")
        if self.kind == "identity":
            object.__setattr__(self, "slope", 1.0)
            object.__setattr__(self, "offset", 0.0)
        if self.slope < 0:
            raise ConfigError(
                f"reaction slope must be nonnegative for monotonicity, got {self.slope}"
            )

    def offset_at(self, t: float):
        return self.offset(t) if callable(self.offset) else self.offset

    def apply(self, t: float, problem, phi_values: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return phi_values
        return self.slope * phi_values + self.offset_at(t)


@dataclass
class FlowProblem:
    """Discrete model geometry plus reaction; see module docstring."""

    grid: TorusGrid
    a0: MetricField
    achi: MetricField
    f_mu: ScalarField
    reaction: ReactionSpec
    binom: float
    normalization: dict = field(default_factory=dict)
    fiber_invariant: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def kappa(self) -> int:
        return self.grid.base_dims

    def chi_mixed_determinants(self) -> np.ndarray:
        """MD_j(chi, omega_0) for j = 0..n, cached.

        chi has rank kappa, so entries above j = kappa are identically zero
        in exact arithmetic; they are zeroed explicitly to keep the large-t
        density series free of rounding noise amplified by e^{(j-kappa) t}.
        """
        md = self._cache.get("chi_md")
        if md is None:
            md = mixed_determinants(self.achi.matrices, self.a0.matrices)
            md[self.kappa + 1:] = 0.0
            self._cache["chi_md"] = md
        return md

    def theta_at(self, t: float) -> MetricField:
        if t < 0:
            raise ValueError(f"t must be nonnegative, got {t}")
        u = np.exp(-t)
        mats = self.achi.matrices + u * (self.a0.matrices - self.achi.matrices)
        return MetricField(self.grid, mats, semidefinite_ok=True)

    def achi_base_field(self) -> MetricField:
        """chi restricted to the base block as a field on the base grid."""
        k = self.kappa
        fiber_zero = (slice(None),) * k + (0,) * self.grid.fiber_dims
        mats = self.achi.matrices[fiber_zero + (slice(0, k), slice(0, k))]
        return MetricField(self.grid.base_grid(), np.ascontiguousarray(mats))

    def base_slice(self, values: np.ndarray) -> np.ndarray:
        """Restrict a fiber-constant full-grid array to the base grid."""
        fiber_zero = (slice(None),) * self.kappa + (0,) * self.grid.fiber_dims
        return np.ascontiguousarray(values[fiber_zero])

    def lift_base_values(self, base_values: np.ndarray) -> np.ndarray:
        """Broadcast base-grid values along the fiber axes."""
        shape = base_values.shape + (1,) * self.grid.fiber_dims
        return np.broadcast_to(base_values.reshape(shape), self.grid.shape).copy()


def theta_at(problem: FlowProblem, t: float) -> MetricField:
    """Metric family member theta_t = chi + e^{-t}(omega_0 - chi)."""
    return problem.theta_at(t)


def _is_fiber_constant(values: np.ndarray, grid: TorusGrid) -> bool:
    for ax in grid.fiber_axes:
        if not np.array_equal(values, np.roll(values, 1, axis=ax)):
            return False
    return True


def build_product_problem(grid: TorusGrid, a0, achi_base, f_mu,
                          reaction: ReactionSpec | None = None,
                          normalize: bool = True) -> FlowProblem:
    """Assemble and normalize a product model geometry.

    a0: full matrix field, grid.shape + (n, n), positive definite.
    achi_base: base-block matrices, either on the base grid
        (base_shape + (kappa, kappa)) or on the full grid with entries
        constant along the fibers.
    f_mu: positive density on the full grid.

    With normalize=True, f_mu is rescaled to total mass 1 and chi is rescaled
    so the mixed volume integral of MD_kappa(chi, omega_0) is 1; both factors
    are recorded in problem.normalization.
    """
    n, k = grid.n_dims, grid.base_dims
    a0 = np.asarray(a0, dtype=float)
    achi_base = np.asarray(achi_base, dtype=float)
    f_mu = np.asarray(f_mu, dtype=float)

    if f_mu.shape != grid.shape:
        raise ModelError(f"f_mu shape {f_mu.shape} does not match grid {grid.shape}")
    if f_mu.min() <= 0 or not np.isfinite(f_mu).all():
        bad = np.unravel_index(np.argmin(f_mu), f_mu.shape)
        raise ModelError(f"f_mu must be strictly positive; node {bad} has {f_mu[bad]:g}")

    base_shape = grid.shape[:k]
    if achi_base.shape == grid.shape + (k, k):
        flat = achi_base.reshape(grid.shape + (k * k,))
        if not all(_is_fiber_constant(flat[..., i], grid) for i in range(k * k)):
            raise ModelError("achi base block must be constant along the fibers")
        fiber_zero = (slice(None),) * k + (0,) * grid.fiber_dims
        achi_base = achi_base[fiber_zero]
    if achi_base.shape != base_shape + (k, k):
        raise ModelError(
            f"achi base block shape {achi_base.shape} does not match base grid "
            f"{base_shape} with kappa = {k}"
        )

    f_scale = 1.0
    f_vals = f_mu.copy()
    if normalize:
        mass = float(f_vals.sum() * grid.cell_volume)
        f_scale = 1.0 / mass
        f_vals *= f_scale

    # embed the base block into n x n and broadcast along fibers
    achi_full_base = np.zeros(base_shape + (n, n))
    achi_full_base[..., :k, :k] = achi_base
    expand = achi_full_base.reshape(base_shape + (1,) * grid.fiber_dims + (n, n))
    achi_vals = np.broadcast_to(expand, grid.shape + (n, n)).copy()

    a0_field = MetricField(grid, a0).validate()
    MetricField(grid.base_grid(), achi_base).validate()

    achi_scale = 1.0
    if normalize:
        md = mixed_determinants(achi_vals, a0)
        mv_mass = float(md[k].sum() * grid.cell_volume)
        if mv_mass <= 0:
            raise ModelError(f"mixed volume mass must be positive, got {mv_mass:g}")
        # MD_kappa is homogeneous of degree kappa in the chi slot
        achi_scale = mv_mass ** (-1.0 / k)
        achi_vals *= achi_scale

    achi_field = MetricField(grid, achi_vals, semidefinite_ok=True)
    f_field = ScalarField(grid, f_vals)
    reaction = reaction or ReactionSpec()

    fiber_inv = (
        _is_fiber_constant(f_field.values, grid)
        and all(
            _is_fiber_constant(a0[..., i, j], grid)
            for i in range(n) for j in range(i, n)
        )
    )

    problem = FlowProblem(
        grid=grid,
        a0=a0_field,
        achi=achi_field,
        f_mu=f_field,
        reaction=reaction,
        binom=float(comb(n, k)),
        normalization={
            "f_mu_scale": f_scale,
            "achi_scale": achi_scale,
            "f_mu_mass": float(f_field.values.sum() * grid.cell_volume),
        },
        fiber_invariant=fiber_inv,
    )
    md = mixed_determinants(problem.achi.matrices, problem.a0.matrices)
    problem.normalization["mixed_volume_mass"] = float(md[k].sum() * grid.cell_volume)
    return problem


def theta_density(problem: FlowProblem, t: float) -> ScalarField:
    """Density of theta_t^n relative to the collapsing normalization:

        det-expansion of theta_t / (C(n,kappa) e^{-(n-kappa) t})
            = sum_{j<=kappa} [C(n,j)/C(n,kappa)] (1-e^{-t})^j e^{-(kappa-j) t}
              MD_j(chi, omega_0).

    Evaluated through the mixed-determinant expansion rather than a direct
    determinant so the e^{-(n-kappa) t} cancellation is exact for every t;
    the direct quotient loses all significance once the fiber directions
    have collapsed below rounding.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    n, k = problem.grid.n_dims, problem.kappa
    md = problem.chi_mixed_determinants()
    one_minus_u = -np.expm1(-t)
    out = np.zeros(problem.grid.shape)
    for j in range(k + 1):
        coef = comb(n, j) / comb(n, k) * one_minus_u ** j * np.exp(-(k - j) * t)
        out += coef * md[j]
    return ScalarField(problem.grid, out)


def pushforward_density(problem: FlowProblem) -> ScalarField:
    """Fiber integral of f_mu: w(y_base) = sum_fiber f_mu * fiber cell volume.

    The rectangle rule on the periodic fiber grid is spectrally accurate for
    smooth data and preserves total mass exactly.
    """
    grid = problem.grid
    if grid.fiber_dims == 0:
        return ScalarField(grid.base_grid(), problem.f_mu.values.copy())
    fiber_vol = 1.0
    for ax in grid.fiber_axes:
        fiber_vol *= grid.spacings[ax]
    w = problem.f_mu.values.sum(axis=grid.fiber_axes) * fiber_vol
    return ScalarField(grid.base_grid(), w)


def static_weight(problem: FlowProblem) -> ScalarField:
    """Weight of the limit equation det(chi_base + D2 psi) = e^psi w.

    w = C(n,kappa) * pushforward(f_mu) / fiber volume density of omega_0.
    On a compatible product model (fiber volume = C(n,kappa) per unit base
    cell) this reduces to the plain pushforward; the correction keeps the
    limit equation the exact stationarity condition of the flow for any
    product data. Fails if the weight degenerates to zero anywhere.
    """
    grid = problem.grid
    k = grid.base_dims
    pf = pushforward_density(problem)
    if grid.fiber_dims == 0:
        w = pf.values.copy()
    else:
        fiber_vol = 1.0
        for ax in grid.fiber_axes:
            fiber_vol *= grid.spacings[ax]
        a_ff = problem.a0.matrices[..., k:, k:]
        vol_ff = sym_det(a_ff).sum(axis=grid.fiber_axes) * fiber_vol
        w = problem.binom * pf.values / vol_ff
    if w.min() <= 0 or not np.isfinite(w).all():
        bad = np.unravel_index(np.argmin(w), w.shape)
        raise ModelError(
            f"static weight must be strictly positive; base node {bad} "
            f"has {w[bad]:g}"
        )
    return ScalarField(grid.base_grid(), w)


def mixed_kappa_density(problem: FlowProblem, phi_inf: ScalarField,
                        rho: ScalarField | None = None) -> ScalarField:
    """Density of (chi + D2 phi_inf)^kappa wedge (omega_0 + D2 rho)^{n-kappa}.

    This is the mixed determinant MD_kappa of the two matrix fields; on a
    compatible product model it equals e^{phi_inf} f_mu (the semi-flat
    identity behind the limit equation).
    """
    grid = problem.grid
    p = problem.achi.matrices + hessian_values(phi_inf.values, grid)
    q = problem.a0.matrices.copy()
    if rho is not None:
        q = q + hessian_values(rho.values, grid)
    md = mixed_determinants(p, q)
    return ScalarField(grid, md[problem.kappa])


@dataclass
class SemiFlatField:
    """Fiberwise solution rho of det(a0_ff + D2_fiber rho) = c(y_base).

    rho has plain mean zero on every fiber, so it vanishes identically on
    flat fibers; mean_abs_max records the largest per-fiber mean actually
    achieved (a solver exactness check, not a tolerance).
    """

    rho: ScalarField
    fiber_constants: np.ndarray
    residual_sup: float
    mean_abs_max: float


def _fiber_hessian(values: np.ndarray, spacings: tuple[float, ...]) -> np.ndarray:
    """Hessian on a standalone fiber torus, values shape = fiber grid shape."""
    m = values.ndim
    out = np.empty(values.shape + (m, m))
    for d in range(m):
        h = spacings[d]
        out[..., d, d] = (
            np.roll(values, -1, axis=d) - 2 * values + np.roll(values, 1, axis=d)
        ) / (h * h)
        for e in range(d + 1, m):
            he = spacings[e]
            vpp = np.roll(values, (-1, -1), axis=(d, e))
            vpm = np.roll(values, (-1, 1), axis=(d, e))
            vmp = np.roll(values, (1, -1), axis=(d, e))
            vmm = np.roll(values, (1, 1), axis=(d, e))
            cross = (vpp - vpm - vmp + vmm) / (4 * h * he)
            out[..., d, e] = cross
            out[..., e, d] = cross
    return out


def _solve_fiber_ma(a_ff: np.ndarray, spacings: tuple[float, ...],
                    tol: float, max_iter: int = 60) -> tuple[np.ndarray, float, float]:
    """Newton solve of det(a_ff + D2 rho) = const on one fiber torus.

    Returns (rho, c, sup residual). The linearized operator has the constant
    functions in its kernel, so the Newton system is bordered with a mean
    constraint.
    """
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    from .errors import SolverError

    fshape = a_ff.shape[:-2]
    m = a_ff.shape[-1]
    size = int(np.prod(fshape))
    rho = np.zeros(fshape)

    idx = np.arange(size).reshape(fshape)

    def laplace_like(minv: np.ndarray) -> sp.csr_matrix:
        rows, cols, vals = [], [], []

        def add(coef: np.ndarray, shift: tuple[int, ...]):
            rows.append(idx.ravel())
            cols.append(np.roll(idx, shift, axis=tuple(range(m))).ravel())
            vals.append(coef.ravel())

        diag = np.zeros(fshape)
        for d in range(m):
            h2 = spacings[d] ** 2
            c = minv[..., d, d] / h2
            add(c, tuple(-1 if a == d else 0 for a in range(m)))
            add(c, tuple(1 if a == d else 0 for a in range(m)))
            diag -= 2 * c
            for e in range(d + 1, m):
                ch = 2 * minv[..., d, e] / (4 * spacings[d] * spacings[e])
                for sd, se, sign in ((-1, -1, 1), (1, 1, 1), (-1, 1, -1), (1, -1, -1)):
                    shift = [0] * m
                    shift[d], shift[e] = sd, se
                    add(sign * ch, tuple(shift))
        rows.append(idx.ravel())
        cols.append(idx.ravel())
        vals.append(diag.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(size, size),
        )

    for _ in range(max_iter):
        mmat = a_ff + _fiber_hessian(rho, spacings)
        lam = lambda_min(mmat)
        if lam.min() <= 0:
            raise SolverError("fiber matrix lost definiteness during Newton")
        logdet = np.log(sym_det(mmat))
        c = float(np.exp(logdet.mean()))
        det = sym_det(mmat)
        res = float(np.abs(det - c).max())
        if res <= tol:
            return rho, c, res
        r = logdet - logdet.mean()
        lmat = laplace_like(np.linalg.inv(mmat))
        ones = np.ones((size, 1))
        bordered = sp.bmat([[lmat, ones], [ones.T, None]], format="csc")
        rhs = np.concatenate([-r.ravel(), [0.0]])
        sol = spla.spsolve(bordered, rhs)
        delta = sol[:size].reshape(fshape)
        alpha = 1.0
        while alpha > 2 ** -30:
            trial = rho + alpha * delta
            mt = a_ff + _fiber_hessian(trial, spacings)
            if lambda_min(mt).min() > 0:
                new_r = np.log(sym_det(mt))
                if np.abs(new_r - new_r.mean()).max() < np.abs(r).max() or alpha == 1.0:
                    break
            alpha *= 0.5
        rho = rho + alpha * delta
        rho -= rho.mean()
    raise SolverError(f"fiber Monge-Ampere Newton did not reach tol {tol:g}")


def semiflat_solve(problem: FlowProblem, tol: float = 1e-10) -> SemiFlatField:
    """Fiberwise Ricci-flat representative: solve the fiber determinant
    equation on every fiber and normalize to weighted mean zero."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    grid = problem.grid
    k = grid.base_dims
    if grid.fiber_dims == 0:
        zeros = ScalarField(grid, np.zeros(grid.shape))
        return SemiFlatField(zeros, np.ones(grid.shape[:k]), 0.0, 0.0)

    fiber_spacings = grid.spacings[k:]
    rho = np.zeros(grid.shape)
    constants = np.zeros(grid.shape[:k])
    worst_res = 0.0
    worst_mean = 0.0
    for base_idx in np.ndindex(grid.shape[:k]):
        a_ff = problem.a0.matrices[base_idx][..., k:, k:]
        r, c, res = _solve_fiber_ma(a_ff, fiber_spacings, tol)
        r = r - r.mean()
        rho[base_idx] = r
        constants[base_idx] = c
        worst_res = max(worst_res, res)
        worst_mean = max(worst_mean, abs(float(r.mean())))
    return SemiFlatField(ScalarField(grid, rho), constants, worst_res, worst_mean)


@dataclass
class RegularityCertificate:
    """Measured regular-family data for the metric path t -> theta_t.

    E_of_epsilon is the smallest E such that (1+E) theta_t >= theta_t' and
    theta_t' >= (1-E) theta_t at every node, maximized over sampled pairs
    with |t - t'| < epsilon. samples records (t, t', pairwise E).
    floor_coeff scales chi to a semi-positive form bounding theta_t from
    below; floor_worst is the most negative eigenvalue of theta_t minus
    that floor over the samples (>= -1e-10 when the bound holds).
    """

    epsilon: float
    E_of_epsilon: float
    samples: tuple[tuple[float, float, float], ...]
    floor_coeff: float
    floor_worst: float
    t_max: float

    @property
    def floor_ok(self) -> bool:
        return self.floor_worst >= -1e-10


def check_regular_family(problem: FlowProblem, epsilon: float,
                         t_max: float = 12.0, sample_count: int = 12) -> RegularityCertificate:
    """Measure E(epsilon) over sampled time pairs and verify the chi floor.

    Pairs (t, t') are sampled with |t - t'| just inside epsilon, where the
    two-sided bound is tightest, plus a half-separation pair.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    t_samples = np.linspace(0.0, t_max, sample_count)
    samples = []
    worst = 0.0
    for t in t_samples:
        theta_t = problem.theta_at(t).matrices
        for tp in (t + 0.98 * epsilon, max(t - 0.98 * epsilon, 0.0), t + 0.5 * epsilon):
            theta_tp = problem.theta_at(tp).matrices
            gmin, gmax = pencil_eig_bounds(theta_tp, theta_t)
            pair_e = max(float((gmax - 1.0).max()), float((1.0 - gmin).max()), 0.0)
            samples.append((float(t), float(tp), pair_e))
            worst = max(worst, pair_e)

    # largest generalized eigenvalue of chi against omega_0 bounds how much of
    # chi fits under theta_0 = omega_0
    gmax_chi = pencil_eig_bounds(problem.achi.matrices, problem.a0.matrices)[1]
    coeff = min(1.0, 1.0 / float(gmax_chi.max()))
    floor = coeff * problem.achi.matrices
    floor_worst = 0.0
    for t in t_samples:
        lam = lambda_min(problem.theta_at(t).matrices - floor)
        floor_worst = min(floor_worst, float(lam.min()))
    return RegularityCertificate(
        epsilon=epsilon,
        E_of_epsilon=worst,
        samples=tuple(samples),
        floor_coeff=coeff,
        floor_worst=floor_worst,
        t_max=t_max,
    )
