"""Periodic grids and the field containers living on them.

A TorusGrid discretizes the flat torus (R / 2 pi Z)^n with a uniform grid
per axis. The first ``base_dims`` axes span the base of the fibration, the
remaining axes the fiber. Node (i_1, ..., i_n) sits at y_d = i_d * 2 pi / N_d
and every field is stored row-major over the index tuple.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ModelError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on (R / 2 pi Z)^n with a marked base block."""

    n_dims: int
    points: tuple[int, ...]
    base_dims: int

    def __post_init__(self):
        if self.n_dims < 1:
            raise ConfigError(f"n_dims must be >= 1, got {self.n_dims}")
        if len(self.points) != self.n_dims:
            raise ConfigError(
                f"points must list one entry per axis: expected {self.n_dims}, "
                f"got {len(self.points)}"
            )
        for d, p in enumerate(self.points):
            if int(p) != p or p < 4:
                raise ConfigError(
                    f"points[{d}] must be an integer >= 4, got {p!r}"
                )
        if not (0 < self.base_dims <= self.n_dims):
            raise ConfigError(
                f"base_dims must lie in 1..{self.n_dims}, got {self.base_dims}"
            )
        object.__setattr__(self, "points", tuple(int(p) for p in self.points))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(TWO_PI / p for p in self.points)

    @property
    def cell_volume(self) -> float:
        out = 1.0
        for h in self.spacings:
            out *= h
        return out

    @property
    def fiber_dims(self) -> int:
        return self.n_dims - self.base_dims

    @property
    def fiber_axes(self) -> tuple[int, ...]:
        return tuple(range(self.base_dims, self.n_dims))

    @property
    def node_count(self) -> int:
        return int(np.prod(self.points))

    def axis_coordinates(self, d: int) -> np.ndarray:
        return np.arange(self.points[d]) * self.spacings[d]

    def coordinate_fields(self) -> list[np.ndarray]:
        """Full-shape coordinate arrays, one per axis ('ij' indexing)."""
        axes = [self.axis_coordinates(d) for d in range(self.n_dims)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def base_grid(self) -> "TorusGrid":
        """Grid spanned by the base axes alone."""
        return TorusGrid(self.base_dims, self.points[: self.base_dims], self.base_dims)

    def wrap_index(self, idx: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(i % p for i, p in zip(idx, self.points))


def build_torus_grid(n_dims: int, points, kappa: int) -> TorusGrid:
    """Construct the periodic product grid with kappa base axes."""
    return TorusGrid(n_dims, tuple(points), kappa)


@dataclass
class ScalarField:
    """Scalar grid function; values must be finite everywhere."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ModelError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.isfinite(self.values).all():
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise ModelError(
                f"non-finite field value at node {tuple(int(i) for i in bad)}")

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def integral(self, weight: np.ndarray | None = None) -> float:
        v = self.values if weight is None else self.values * weight
        return float(v.sum() * self.grid.cell_volume)

    def __add__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values + o)

    def __sub__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values - o)

    def __mul__(self, c):
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass
class MetricField:
    """Symmetric matrix-valued grid function (one n x n matrix per node).

    ``semidefinite_ok`` distinguishes reference metrics that must stay
    positive definite from the semi-positive forms (the base form extended
    by zero to the fiber block is only semidefinite by design).
    """

    grid: TorusGrid
    matrices: np.ndarray
    semidefinite_ok: bool = False
    _validated: bool = field(default=False, repr=False)

    SYM_TOL = 1e-12
    EIG_TOL = 1e-10

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)
        n = self.grid.n_dims
        if self.matrices.shape != self.grid.shape + (n, n):
            raise ModelError(
                f"matrix field shape {self.matrices.shape} does not match "
                f"grid {self.grid.shape} with n = {n}"
            )

    def validate(self) -> "MetricField":
        """Check symmetry and the definiteness class; raises ModelError."""
        from .linalg import lambda_min

        m = self.matrices
        asym = np.abs(m - np.swapaxes(m, -1, -2)).max()
        scale = max(np.abs(m).max(), 1.0)
        if asym > self.SYM_TOL * scale:
            raise ModelError(f"matrix field asymmetric: max deviation {asym:g}")
        lam = lambda_min(m)
        floor = -self.EIG_TOL * scale if self.semidefinite_ok else self.EIG_TOL * scale
        if self.semidefinite_ok:
            if lam.min() < floor:
                bad = tuple(int(i) for i in np.unravel_index(np.argmin(lam), lam.shape))
                raise ModelError(
                    f"matrix field not positive semidefinite at node {bad}: "
                    f"lambda_min = {lam.min():g}"
                )
        else:
            if lam.min() <= floor:
                bad = tuple(int(i) for i in np.unravel_index(np.argmin(lam), lam.shape))
                raise ModelError(
                    f"matrix field not positive definite at node {bad}: "
                    f"lambda_min = {lam.min():g}"
                )
        self._validated = True
        return self

    def copy(self) -> "MetricField":
        return MetricField(self.grid, self.matrices.copy(), self.semidefinite_ok)
