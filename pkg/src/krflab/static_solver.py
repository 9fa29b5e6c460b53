"""Solver for the elliptic limit equation on the base torus.

The flow's stationary states satisfy

    det(chi_base + D2 psi) = e^psi w        on the base torus,

with w the fiber-volume-corrected pushforward of f_mu (geometry.static_weight).
The e^psi zeroth-order term makes the linearized operator strictly negative,
so no solvability constraint or bordering is needed: damped Newton converges
from the log-ratio initial guess on every admissible weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelError, SolverError
from .geometry import FlowProblem, static_weight
from .grid import ScalarField, TorusGrid
from .linalg import lambda_min, sym_det
from .operators import hessian_values

__all__ = ["StaticSolution", "solve_static", "lift_to_total"]


@dataclass
class StaticSolution:
    """Converged static potential with its residual history.

    psi lives on the base grid; lifted is its fiber-constant extension to the
    full grid (exactly constant along fibers, bitwise). residual_history
    records (iteration, sup |det - e^psi w|) for every iterate including the
    accepted one.
    """

    psi: ScalarField
    residual_history: list[tuple[int, float]]
    lifted: ScalarField


def _linearized_matrix(minv: np.ndarray, spacings) -> "object":
    """Sparse matrix of delta -> tr(M^{-1} D2 delta) on a periodic grid.

    minv has shape grid_shape + (m, m); the stencil mirrors hessian_values
    exactly (same diagonal and 4-point cross differences) so Newton solves
    the true linearization of the discrete operator.
    """
    import scipy.sparse as sp

    fshape = minv.shape[:-2]
    m = minv.shape[-1]
    size = int(np.prod(fshape))
    idx = np.arange(size).reshape(fshape)
    rows, cols, vals = [], [], []

    def add(coef: np.ndarray, shift):
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


def _base_hessian(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    # the base grid is itself a torus grid, so the full-grid stencil applies
    return hessian_values(values, grid)


def _sup_residual(a_chi: np.ndarray, psi: np.ndarray, w: np.ndarray,
                  grid: TorusGrid) -> float:
    mmat = a_chi + _base_hessian(psi, grid)
    return float(np.abs(sym_det(mmat) - np.exp(psi) * w).max())


def _newton(a_chi: np.ndarray, w: np.ndarray, grid: TorusGrid,
            tol: float, max_iter: int) -> tuple[np.ndarray, list]:
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    spacings = grid.spacings
    log_ratio = np.log(sym_det(np.asarray(a_chi)) / w)
    psi = np.full(grid.shape, float(log_ratio.mean()))
    history = []
    stop = tol * float(w.max())

    for it in range(max_iter):
        mmat = a_chi + _base_hessian(psi, grid)
        if lambda_min(mmat).min() <= 0:
            raise SolverError(
                "static Newton iterate lost positive definiteness",
                history=history,
            )
        res_sup = _sup_residual(a_chi, psi, w, grid)
        history.append((it, res_sup))
        if res_sup <= stop:
            return psi, history
        nval = np.log(sym_det(mmat)) - psi - np.log(w)
        lmat = _linearized_matrix(np.linalg.inv(mmat), spacings)
        size = lmat.shape[0]
        system = lmat - sp.identity(size, format="csr")
        delta = spla.spsolve(system.tocsc(), -nval.ravel()).reshape(grid.shape)

        alpha = 1.0
        n_sup = float(np.abs(nval).max())
        accepted = False
        while alpha > 2.0 ** -40:
            trial = psi + alpha * delta
            mt = a_chi + _base_hessian(trial, grid)
            if lambda_min(mt).min() > 0:
                trial_n = np.log(sym_det(mt)) - trial - np.log(w)
                if float(np.abs(trial_n).max()) < n_sup:
                    psi = trial
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            raise SolverError(
                "static Newton found no damping step that keeps the matrix "
                "positive definite and decreases the residual",
                history=history,
            )
    history.append((max_iter, _sup_residual(a_chi, psi, w, grid)))
    raise SolverError(
        f"static Newton did not reach tol {tol:g} in {max_iter} iterations",
        history=history,
    )


def _pseudo_time(a_chi: np.ndarray, w: np.ndarray, grid: TorusGrid,
                 tol: float, max_iter: int) -> tuple[np.ndarray, list]:
    """Relax d psi / d tau = log det(chi + D2 psi) - log w - psi to stationarity.

    Reuses the flow stepping: the equation is exactly the kappa = n flow with
    time-independent metric chi and density w, so the semi-implicit update and
    its stability cap carry over unchanged.
    """
    from .flow import FlowState, stability_cap, step
    from .geometry import ReactionSpec
    from .grid import MetricField

    base = grid
    a_vals = np.ascontiguousarray(np.asarray(a_chi, dtype=float))
    pseudo = FlowProblem(
        grid=base,
        a0=MetricField(base, a_vals.copy()),
        achi=MetricField(base, a_vals.copy(), semidefinite_ok=True),
        f_mu=ScalarField(base, np.asarray(w, dtype=float)),
        reaction=ReactionSpec(),
        binom=1.0,
        fiber_invariant=True,
    )
    log_ratio = np.log(sym_det(a_vals) / w)
    psi = np.full(base.shape, float(log_ratio.mean()))
    state = FlowState(t=0.0, phi=ScalarField(base, psi),
                      last_phi_dot=ScalarField(base, np.zeros(base.shape)),
                      step_index=0)
    history = []
    stop = tol * float(w.max())
    check_every = 25
    for it in range(max_iter):
        dt = min(0.25, stability_cap(pseudo, state.t, state.phi))
        state = step(pseudo, state, dt)
        if it % check_every == 0 or it == max_iter - 1:
            res_sup = _sup_residual(a_chi, state.phi.values, w, grid)
            history.append((it, res_sup))
            if res_sup <= stop:
                return state.phi.values, history
    raise SolverError(
        f"pseudo-time relaxation did not reach tol {tol:g} in {max_iter} steps",
        history=history,
    )


def solve_static(problem: FlowProblem, method: str = "damped_newton",
                 tol: float = 1e-10, max_iter: int = 60,
                 weight: ScalarField | None = None) -> StaticSolution:
    """Solve det(chi_base + D2 psi) = e^psi w on the base grid.

    method 'damped_newton' (default) or 'pseudo_time'. Stops when
    sup |det - e^psi w| <= tol * sup w. The weight defaults to
    static_weight(problem); passing one explicitly overrides it (it must be
    strictly positive on the base grid).
    """
    if method not in ("damped_newton", "pseudo_time"):
        raise ValueError(f"unknown static method {method!r}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    base = problem.grid.base_grid()
    if weight is None:
        weight = static_weight(problem)
    if weight.grid.shape != base.shape:
        raise ValueError(
            f"weight grid {weight.grid.shape} does not match base grid {base.shape}"
        )
    w = weight.values
    if w.min() <= 0:
        bad = np.unravel_index(np.argmin(w), w.shape)
        raise ModelError(f"static weight must be positive; node {bad} has {w[bad]:g}")

    a_chi = problem.achi_base_field().matrices
    if method == "damped_newton":
        psi, history = _newton(a_chi, w, base, tol, max_iter)
    else:
        pseudo_budget = max(max_iter, 200_000)
        psi, history = _pseudo_time(a_chi, w, base, tol, pseudo_budget)

    psi_field = ScalarField(base, psi)
    lifted = lift_to_total(problem, psi_field)
    return StaticSolution(psi=psi_field, residual_history=history, lifted=lifted)


def lift_to_total(problem: FlowProblem, psi: ScalarField) -> ScalarField:
    """Fiber-constant extension of a base-grid field to the full grid."""
    base = problem.grid.base_grid()
    if psi.grid.shape != base.shape:
        raise ValueError(
            f"psi grid {psi.grid.shape} does not match base grid {base.shape}"
        )
    return ScalarField(problem.grid, problem.lift_base_values(psi.values))
