"""Ready-made model geometries shared by tests, docs, and benchmarks.

The flagship product geometry is a two-torus fibration with kappa = 1:
one collapsing fiber circle over a base circle, every input a single
harmonic so discrete normalization integrals are exact. The fiber metric
entry 1/pi is chosen against the base chi mass so the semi-flat identity
holds at the static solution without any rescaling slack.
"""

from __future__ import annotations

import numpy as np

from .geometry import FlowProblem, build_product_problem
from .grid import ScalarField, TorusGrid, build_torus_grid

__all__ = [
    "acceptance_problem",
    "acceptance_phi0",
    "acceptance_divisor_profile",
    "constant_problem",
    "manufactured_refinement_problem",
    "perturbed_fiber_problem",
]


def acceptance_problem(points=(64, 64)) -> FlowProblem:
    """n = 2, kappa = 1 product geometry with fully harmonic data."""
    grid = build_torus_grid(2, tuple(points), kappa=1)
    y1, _ = grid.coordinate_fields()
    a0 = np.zeros(grid.shape + (2, 2))
    a0[..., 0, 0] = 1.0 + 0.12 * np.cos(y1)
    a0[..., 1, 1] = 1.0 / np.pi
    base_y = grid.axis_coordinates(0)
    achi = ((1.0 + 0.2 * np.cos(base_y)) / (2.0 * np.pi)).reshape(-1, 1, 1)
    f_mu = (1.0 + 0.25 * np.cos(y1)) / (4.0 * np.pi ** 2)
    return build_product_problem(grid, a0, achi, f_mu)


def acceptance_phi0(grid: TorusGrid) -> ScalarField:
    """Initial data with one base and one fiber harmonic."""
    y1, y2 = grid.coordinate_fields()
    return ScalarField(grid, 0.2 * np.cos(y1) + 0.1 * np.cos(y2))


def acceptance_divisor_profile(grid: TorusGrid) -> np.ndarray:
    """Base section norm in (0, 1] whose curvature stays below chi."""
    base_y = grid.axis_coordinates(0)
    return np.exp(-0.15 * (1.0 - np.cos(base_y)))


def constant_problem(points=(32, 16)) -> FlowProblem:
    """Everything constant: the static solution is exactly a constant."""
    grid = build_torus_grid(2, tuple(points), kappa=1)
    a0 = np.zeros(grid.shape + (2, 2))
    a0[..., 0, 0] = 1.0
    a0[..., 1, 1] = 1.0 / np.pi
    achi = np.full((points[0], 1, 1), 1.0 / (2.0 * np.pi))
    f_mu = np.full(grid.shape, 1.0 / (4.0 * np.pi ** 2))
    return build_product_problem(grid, a0, achi, f_mu)


def manufactured_refinement_problem(base_points: int, fiber_points: int = 8):
    """Geometry whose continuum limit profile is psi* = 0.05 cos(y1).

    The density is reverse-engineered so psi* solves the continuum limit
    equation exactly; the grid evaluation of psi* then misses the discrete
    equation by the central-stencil truncation error only. Returns
    (problem, lifted psi* field). Built unnormalized: rescaling chi or f
    would detune the manufactured identity.
    """
    grid = build_torus_grid(2, (base_points, fiber_points), kappa=1)
    y1, _ = grid.coordinate_fields()
    psi_star = 0.05 * np.cos(y1)
    a0 = np.zeros(grid.shape + (2, 2))
    a0[..., 0, 0] = 1.0 + 0.1 * np.cos(y1)
    a0[..., 1, 1] = 1.0 / np.pi
    base_y = grid.axis_coordinates(0)
    chi_base = (1.0 + 0.2 * np.cos(base_y)) / (2.0 * np.pi)
    achi = chi_base.reshape(-1, 1, 1)
    # det(chi + psi*'') = e^psi* w  with  w = 2 pi f_mu on this product
    chi_full = (1.0 + 0.2 * np.cos(y1)) / (2.0 * np.pi)
    w_star = (chi_full - 0.05 * np.cos(y1)) * np.exp(-psi_star)
    f_mu = w_star / (2.0 * np.pi)
    problem = build_product_problem(grid, a0, achi, f_mu, normalize=False)
    return problem, ScalarField(grid, psi_star)


def perturbed_fiber_problem(points=(16, 64)) -> FlowProblem:
    """Fiber metric genuinely curved along the fibers.

    The fiberwise potential rho is then nonzero and the semi-flat identity
    holds only after solving for it; used to exercise the fiberwise solver
    away from the flat-fiber shortcut.
    """
    grid = build_torus_grid(2, tuple(points), kappa=1)
    y1, y2 = grid.coordinate_fields()
    a0 = np.zeros(grid.shape + (2, 2))
    a0[..., 0, 0] = 1.0 + 0.12 * np.cos(y1)
    a0[..., 1, 1] = (1.0 + 0.2 * np.cos(y1) * np.cos(y2)) / np.pi
    base_y = grid.axis_coordinates(0)
    achi = ((1.0 + 0.2 * np.cos(base_y)) / (2.0 * np.pi)).reshape(-1, 1, 1)
    f_mu = (1.0 + 0.25 * np.cos(y1)) / (4.0 * np.pi ** 2)
    return build_product_problem(grid, a0, achi, f_mu)
