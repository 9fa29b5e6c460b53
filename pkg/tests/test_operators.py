import numpy as np
import pytest

from krflab.errors import AdmissibilityError, ConfigError
from krflab.geometry import theta_density
from krflab.grid import ScalarField, build_torus_grid
from krflab.operators import (
    CENTRAL,
    WIDE,
    HessianStencil,
    det_plus,
    discrete_hessian,
    hessian_values,
    ma_density,
    residual,
)
from krflab.presets import acceptance_phi0


def _roll_second_diff(v, axis, h):
    return (np.roll(v, -1, axis) - 2 * v + np.roll(v, 1, axis)) / h ** 2


def _roll_cross_diff(v, h1, h2):
    return (
        np.roll(v, (-1, -1), (0, 1)) + np.roll(v, (1, 1), (0, 1))
        - np.roll(v, (-1, 1), (0, 1)) - np.roll(v, (1, -1), (0, 1))
    ) / (4 * h1 * h2)


def test_hessian_values_match_roll_formulas():
    grid = build_torus_grid(2, (16, 20), kappa=1)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(grid.shape)
    hess = hessian_values(v, grid)
    h1, h2 = grid.spacings
    assert np.array_equal(hess[..., 0, 0], _roll_second_diff(v, 0, h1))
    assert np.array_equal(hess[..., 1, 1], _roll_second_diff(v, 1, h2))
    cross = _roll_cross_diff(v, h1, h2)
    assert np.allclose(hess[..., 0, 1], cross, atol=1e-14)
    assert np.array_equal(hess[..., 0, 1], hess[..., 1, 0])


def test_hessian_second_order_convergence():
    # truncation error of the central stencil shrinks by ~4x per refinement
    errs = []
    for n in (16, 32, 64):
        grid = build_torus_grid(2, (n, n), kappa=1)
        y1, y2 = grid.coordinate_fields()
        v = np.cos(y1) * np.sin(y2)
        hess = hessian_values(v, grid)
        errs.append(np.abs(hess[..., 0, 1] + np.sin(y1) * np.cos(y2)).max())
    assert errs[0] / errs[1] > 3.5
    assert errs[1] / errs[2] > 3.5


def test_discrete_hessian_wraps_metric_field():
    grid = build_torus_grid(2, (12, 12), kappa=1)
    y1, _ = grid.coordinate_fields()
    phi = ScalarField(grid, 0.3 * np.cos(y1))
    field = discrete_hessian(phi)
    assert field.matrices.shape == grid.shape + (2, 2)
    sym_gap = np.abs(field.matrices - np.swapaxes(field.matrices, -1, -2)).max()
    assert sym_gap == 0.0


def test_det_plus_clamps_inadmissible_nodes():
    m = np.zeros((3, 2, 2))
    m[0] = np.diag([2.0, 3.0])
    m[1] = np.diag([1.0, -0.5])
    m[2] = np.diag([1.0, 0.0])
    out = det_plus(m)
    assert out[0] == pytest.approx(6.0)
    assert out[1] == 0.0
    assert out[2] == 0.0
    assert det_plus(np.eye(2)) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="symmetric"):
        det_plus(np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        det_plus(np.zeros((2, 3)))


def test_wide_stencil_direction_bases():
    assert HessianStencil("wide_stencil", 1).direction_bases(2) == [
        [(1, 0), (0, 1)], [(1, 1), (1, -1)],
    ]
    bases = WIDE.direction_bases(2)
    assert [(1, 0), (0, 1)] in bases and len(bases) == 4
    for basis in WIDE.direction_bases(3):
        mat = np.array(basis)
        # orthogonal rows so directional second differences stay monotone
        off = mat @ mat.T - np.diag(np.diag(mat @ mat.T))
        assert np.abs(off).max() == 0
    with pytest.raises(ConfigError):
        HessianStencil("wide_stencil", 3)
    with pytest.raises(ConfigError):
        HessianStencil("nonsense")
    with pytest.raises(ConfigError):
        CENTRAL.direction_bases(2)


def test_ma_density_constant_phi_reproduces_theta_density(problem24):
    grid = problem24.grid
    phi = ScalarField(grid, np.full(grid.shape, 0.7))
    for t in (0.0, 1.3, 6.0):
        dens = ma_density(problem24, t, phi, clamped=False)
        ref = theta_density(problem24, t)
        assert np.allclose(dens.values, ref.values, rtol=1e-10)


def test_ma_density_unclamped_raises_on_bad_node(problem24):
    grid = problem24.grid
    y1, _ = grid.coordinate_fields()
    # curvature far beyond theta_0 makes some node inadmissible
    phi = ScalarField(grid, 5.0 * np.cos(y1))
    with pytest.raises(AdmissibilityError, match="node"):
        ma_density(problem24, 0.0, phi, clamped=False)
    clamped = ma_density(problem24, 0.0, phi, clamped=True)
    assert clamped.values.min() == 0.0


def test_ma_density_rejects_negative_time(problem24):
    phi = ScalarField(problem24.grid, np.zeros(problem24.grid.shape))
    with pytest.raises(ValueError):
        ma_density(problem24, -0.1, phi)


def test_wide_ma_density_positive_on_smooth_data(problem24):
    phi = acceptance_phi0(problem24.grid)
    wide = ma_density(problem24, 0.5, phi, stencil=WIDE, clamped=False)
    central = ma_density(problem24, 0.5, phi, clamped=False)
    assert wide.values.min() > 0
    # both stencils converge to the same density; at this resolution they
    # agree to the truncation level, not to rounding
    assert np.abs(wide.values - central.values).max() < 0.05


def test_residual_classifies_exact_jet(problem24):
    grid = problem24.grid
    phi = acceptance_phi0(grid)
    t = 0.8
    dens = ma_density(problem24, t, phi, clamped=False)
    log_ma = np.log(dens.values)
    f = problem24.f_mu.values
    # phi_dot chosen so the flow equation holds exactly at every node
    phi_dot = ScalarField(grid, log_ma - np.log(f) - phi.values)
    field = residual(problem24, t, phi, phi_dot, tol=1e-9)
    counts = field.counts()
    assert counts["both"] == grid.node_count
    assert field.worst_sub_violation() <= 1e-12
    assert field.worst_super_violation() <= 1e-12

    # shifting phi_dot up makes the jet a strict subsolution only
    shifted = ScalarField(grid, phi_dot.values - 1.0)
    field_sub = residual(problem24, t, phi, shifted, tol=1e-9)
    assert field_sub.counts()["sub_ok"] == grid.node_count
    assert field_sub.worst_super_violation() == pytest.approx(1.0, abs=1e-12)


def test_residual_marks_inadmissible_nodes(problem24):
    grid = problem24.grid
    y1, _ = grid.coordinate_fields()
    phi = ScalarField(grid, 5.0 * np.cos(y1))
    phi_dot = ScalarField(grid, np.zeros(grid.shape))
    field = residual(problem24, 0.0, phi, phi_dot, tol=1e-9)
    assert not field.admissible.all()
    # inadmissible nodes can never certify the subsolution inequality
    assert field.worst_sub_violation() == np.inf
    assert np.isfinite(field.worst_super_violation())


def test_residual_validates_inputs(problem24):
    grid = problem24.grid
    zero = ScalarField(grid, np.zeros(grid.shape))
    with pytest.raises(ConfigError):
        residual(problem24, 0.0, zero, zero, tol=1e-9, delta_rel=0.0)
    with pytest.raises(ValueError):
        residual(problem24, 0.0, zero, zero, tol=-1.0)
