"""Discrete Monge-Ampere operator: Hessians, clamped determinants, residuals.

The parabolic equation is evaluated in the form

    r = log det_+(theta_t + D2 phi) - log(C e^{-(n-kappa) t} f_mu)
        - phi_dot - F(t, x, phi)

where det_+ clamps at the boundary of the positive cone. Subsolution tests
additionally require the matrix itself to be admissible (positive
semidefinite); supersolution tests run on the clamped value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import AdmissibilityError, ConfigError
from .grid import MetricField, ScalarField, TorusGrid
from .linalg import lambda_min, sym_det

__all__ = [
    "HessianStencil",
    "ResidualField",
    "CENTRAL",
    "WIDE",
    "discrete_hessian",
    "det_plus",
    "ma_density",
    "residual",
    "TAG_NEITHER",
    "TAG_SUB",
    "TAG_SUPER",
    "TAG_BOTH",
]

TAG_NEITHER, TAG_SUB, TAG_SUPER, TAG_BOTH = 0, 1, 2, 3

# det_plus treats eigenvalues down to -REL_EIG_TOL * scale as zero, so the
# degeneracy boundary itself stays admissible.
REL_EIG_TOL = 1e-12


@dataclass(frozen=True)
class HessianStencil:
    """Finite-difference recipe for second derivatives on the torus.

    scheme 'central': standard second-order stencil, diagonal by
    (f(x+h) - 2 f(x) + f(x-h)) / h^2 and mixed entries by the 4-point cross.
    scheme 'wide_stencil': direction-wise second differences over orthogonal
    integer direction bases up to max-norm ``radius``; used for monotone
    determinant evaluation, it does not assemble a Hessian matrix.
    """

    scheme: str = "central"
    radius: int = 1

    def __post_init__(self):
        if self.scheme not in ("central", "wide_stencil"):
            raise ConfigError(f"unknown stencil scheme {self.scheme!r}")
        if self.scheme == "wide_stencil" and self.radius not in (1, 2):
            raise ConfigError("wide_stencil radius must be 1 or 2")

    def direction_bases(self, n: int) -> list[list[tuple[int, ...]]]:
        """Orthogonal integer direction bases for the wide scheme.

        Every basis spans R^n; the axis basis is always present so the wide
        operator degrades gracefully to the diagonal stencil.
        """
        if self.scheme != "wide_stencil":
            raise ConfigError("direction bases are defined for the wide scheme only")
        if n == 1:
            return [[(1,)]]
        if n == 2:
            bases = [[(1, 0), (0, 1)], [(1, 1), (1, -1)]]
            if self.radius >= 2:
                bases += [[(2, 1), (-1, 2)], [(1, 2), (-2, 1)]]
            return bases
        if n == 3:
            bases = [
                [(1, 0, 0), (0, 1, 0), (0, 0, 1)],
                [(1, 1, 0), (1, -1, 0), (0, 0, 1)],
                [(1, 0, 1), (1, 0, -1), (0, 1, 0)],
                [(0, 1, 1), (0, 1, -1), (1, 0, 0)],
            ]
            if self.radius >= 2:
                bases.append([(1, 1, 1), (1, -1, 0), (1, 1, -2)])
            return bases
        raise ConfigError(f"wide stencil not implemented for n = {n}")


CENTRAL = HessianStencil("central")
WIDE = HessianStencil("wide_stencil", radius=2)


def _second_diff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (
        np.roll(values, -1, axis=axis) - 2.0 * values + np.roll(values, 1, axis=axis)
    ) / (h * h)


def _cross_diff(values: np.ndarray, ax1: int, ax2: int, h1: float, h2: float) -> np.ndarray:
    vpp = np.roll(values, (-1, -1), axis=(ax1, ax2))
    vpm = np.roll(values, (-1, 1), axis=(ax1, ax2))
    vmp = np.roll(values, (1, -1), axis=(ax1, ax2))
    vmm = np.roll(values, (1, 1), axis=(ax1, ax2))
    return (vpp - vpm - vmp + vmm) / (4.0 * h1 * h2)


def hessian_values(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Raw central-difference Hessian, shape grid.shape + (n, n)."""
    n = grid.n_dims
    h = grid.spacings
    out = np.empty(grid.shape + (n, n))
    for d in range(n):
        out[..., d, d] = _second_diff(values, d, h[d])
        for e in range(d + 1, n):
            cross = _cross_diff(values, d, e, h[d], h[e])
            out[..., d, e] = cross
            out[..., e, d] = cross
    return out


def discrete_hessian(phi: ScalarField, stencil: HessianStencil = CENTRAL) -> MetricField:
    """Periodic discrete Hessian of a scalar field (central scheme).

    The wide-stencil scheme produces directional second differences inside
    ma_density rather than a matrix; asking it for a Hessian is an error.
    """
    if stencil.scheme != "central":
        raise ConfigError(
            "discrete_hessian is defined for the central scheme; the wide "
            "stencil enters through ma_density directly"
        )
    return MetricField(phi.grid, hessian_values(phi.values, phi.grid), semidefinite_ok=True)


def det_plus(m: np.ndarray) -> np.ndarray:
    """Clamped determinant: det(m) where m is positive semidefinite, else 0.

    Accepts a single symmetric matrix or a batch (..., n, n). The boundary is
    inclusive: eigenvalues above -1e-12 * scale count as nonnegative.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {m.shape}")
    asym = np.abs(m - np.swapaxes(m, -1, -2)).max()
    if asym > 1e-10 * max(1.0, np.abs(m).max()):
        raise ValueError(f"matrix not symmetric: max asymmetry {asym:g}")
    lam = lambda_min(m)
    scale = np.maximum(np.abs(m).max(axis=(-2, -1)), 1.0)
    ok = lam >= -REL_EIG_TOL * scale
    det = sym_det(m)
    out = np.where(ok, np.maximum(det, 0.0), 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def _wide_directional(problem, t: float, values: np.ndarray, stencil: HessianStencil,
                      clamped: bool):
    """min over direction bases of the product of directional values.

    Directional value along integer direction v is
        vbar^T theta_t vbar + (f(x + v) - 2 f(x) + f(x - v)) / |w_v|^2
    with w_v the physical step and vbar its unit vector. Requires equal grid
    spacing on all axes so integer-orthogonal bases stay orthogonal in space.
    """
    grid = problem.grid
    n = grid.n_dims
    h = grid.spacings
    if max(h) - min(h) > 1e-12 * h[0]:
        raise ConfigError("wide stencil requires equal spacing on all axes")
    theta = problem.theta_at(t).matrices
    best = None
    worst_direction_value = None
    for basis in stencil.direction_bases(n):
        prod = None
        basis_min = None
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
            basis_min = q if basis_min is None else np.minimum(basis_min, q)
            qc = np.maximum(q, 0.0) if clamped else q
            prod = qc if prod is None else prod * qc
        best = prod if best is None else np.minimum(best, prod)
        worst_direction_value = (
            basis_min if worst_direction_value is None
            else np.minimum(worst_direction_value, basis_min)
        )
    return best, worst_direction_value


def ma_density(problem, t: float, phi: ScalarField,
               stencil: HessianStencil = CENTRAL, clamped: bool = True) -> ScalarField:
    """Normalized Monge-Ampere density det_+(theta_t + D2 phi) / (C e^{-(n-k)t}).

    With clamped=False the raw determinant is returned and any inadmissible
    node raises AdmissibilityError naming the first offending node.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    grid = problem.grid
    n, kappa = grid.n_dims, grid.base_dims
    scale = comb(n, kappa) * np.exp(-(n - kappa) * t)
    if stencil.scheme == "wide_stencil":
        prod, dir_min = _wide_directional(problem, t, phi.values, stencil, clamped=True)
        if not clamped:
            if dir_min.min() <= 0.0:
                bad = np.unravel_index(np.argmin(dir_min), dir_min.shape)
                raise AdmissibilityError(
                    f"directional value nonpositive at node {bad}: {dir_min.min():g}"
                )
        return ScalarField(grid, prod / scale)
    m = problem.theta_at(t).matrices + hessian_values(phi.values, grid)
    if clamped:
        det = det_plus(m)
    else:
        lam = lambda_min(m)
        entry_scale = np.maximum(np.abs(m).max(axis=(-2, -1)), 1.0)
        bad_mask = lam < -REL_EIG_TOL * entry_scale
        if bad_mask.any():
            bad = tuple(
                int(i) for i in np.unravel_index(np.argmax(bad_mask), bad_mask.shape)
            )
            raise AdmissibilityError(
                f"theta_t + D2 phi not positive semidefinite at node {bad}: "
                f"lambda_min = {lam[bad]:g}"
            )
        det = sym_det(m)
    return ScalarField(grid, det / scale)


@dataclass
class ResidualField:
    """Pointwise flow residual with sub/supersolution tags.

    r >= -tol on admissible nodes marks sub_ok, r <= tol marks super_ok;
    the tag encodes both bits (0 neither, 1 sub, 2 super, 3 both).
    """

    grid: TorusGrid
    r: np.ndarray
    tags: np.ndarray
    tol: float
    admissible: np.ndarray = field(repr=False, default=None)

    def counts(self) -> dict:
        return {
            "neither": int((self.tags == TAG_NEITHER).sum()),
            "sub_ok": int((self.tags == TAG_SUB).sum()),
            "super_ok": int((self.tags == TAG_SUPER).sum()),
            "both": int((self.tags == TAG_BOTH).sum()),
        }

    def worst_sub_violation(self, mask: np.ndarray | None = None) -> float:
        """Largest violation of the subsolution inequality over the mask.

        Inadmissible nodes violate by +inf since the sub test needs an
        admissible matrix.
        """
        viol = np.where(self.admissible, np.maximum(-self.r, 0.0), np.inf)
        if mask is not None:
            viol = viol[mask]
        return float(viol.max()) if viol.size else 0.0

    def worst_super_violation(self, mask: np.ndarray | None = None) -> float:
        viol = np.maximum(self.r, 0.0)
        if mask is not None:
            viol = viol[mask]
        return float(viol.max()) if viol.size else 0.0


def residual(problem, t: float, phi: ScalarField, phi_dot: ScalarField,
             tol: float, stencil: HessianStencil = CENTRAL,
             delta_rel: float = 1e-12) -> ResidualField:
    """Classify a space-time jet against the flow equation.

    The density is floored at max(1e-300, delta_rel * f_mu) before the log so
    fully degenerate nodes produce a large negative residual instead of -inf.
    """
    if delta_rel <= 0:
        raise ConfigError(f"density floor delta_rel must be positive, got {delta_rel}")
    if tol < 0:
        raise ValueError(f"tol must be nonnegative, got {tol}")
    grid = problem.grid
    density = ma_density(problem, t, phi, stencil=stencil, clamped=True).values
    f = problem.f_mu.values
    floor = np.maximum(1e-300, delta_rel * f)
    log_ma = np.log(np.maximum(density, floor))
    reaction = problem.reaction.apply(t, problem, phi.values)
    r = log_ma - np.log(f) - phi_dot.values - reaction

    if stencil.scheme == "wide_stencil":
        _, dir_min = _wide_directional(problem, t, phi.values, stencil, clamped=True)
        theta_scale = np.abs(problem.theta_at(t).matrices).max()
        admissible = dir_min >= -REL_EIG_TOL * max(theta_scale, 1.0)
    else:
        m = problem.theta_at(t).matrices + hessian_values(phi.values, grid)
        lam = lambda_min(m)
        entry_scale = np.maximum(np.abs(m).max(axis=(-2, -1)), 1.0)
        admissible = lam >= -REL_EIG_TOL * entry_scale

    tags = np.zeros(grid.shape, dtype=np.uint8)
    tags[admissible & (r >= -tol)] |= TAG_SUB
    tags[r <= tol] |= TAG_SUPER
    return ResidualField(grid, r, tags, tol, admissible=admissible)
