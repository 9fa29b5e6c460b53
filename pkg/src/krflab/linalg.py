"""Batched symmetric-matrix helpers.

All routines accept arrays of shape (..., n, n) and operate nodewise.
Dimensions n <= 2 take closed-form paths; larger n falls back to LAPACK
through numpy. The mixed-determinant expansion is the single primitive
behind every wedge-power density in the package.
"""

from __future__ import annotations

from math import comb

import numpy as np

__all__ = [
    "sym_det",
    "sym_eig_bounds",
    "lambda_min",
    "is_posdef",
    "mixed_determinants",
    "pencil_eig_bounds",
]


def sym_det(m: np.ndarray) -> np.ndarray:
    """Determinant of a batch of symmetric matrices."""
    n = m.shape[-1]
    if n == 1:
        return m[..., 0, 0].copy()
    if n == 2:
        return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return np.linalg.det(m)


def sym_eig_bounds(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(lambda_min, lambda_max) for a batch of symmetric matrices."""
    n = m.shape[-1]
    if n == 1:
        v = m[..., 0, 0]
        return v.copy(), v.copy()
    if n == 2:
        half_tr = 0.5 * (m[..., 0, 0] + m[..., 1, 1])
        # radius of the 2x2 eigenvalue pair around the half trace
        rad = np.sqrt(
            (0.5 * (m[..., 0, 0] - m[..., 1, 1])) ** 2 + m[..., 0, 1] ** 2
        )
        return half_tr - rad, half_tr + rad
    w = np.linalg.eigvalsh(m)
    return w[..., 0], w[..., -1]


def lambda_min(m: np.ndarray) -> np.ndarray:
    return sym_eig_bounds(m)[0]


def is_posdef(m: np.ndarray, rel_tol: float = 0.0) -> np.ndarray:
    """Nodewise strict (rel_tol=0) or tolerant positive-definiteness mask.

    With rel_tol > 0 a matrix counts as admissible when its smallest
    eigenvalue exceeds -rel_tol times the entry scale, which keeps nodes
    sitting exactly on the degeneracy boundary inside the admissible set.
    """
    lam = lambda_min(m)
    if rel_tol == 0.0:
        return lam > 0.0
    scale = np.abs(m).max(axis=(-2, -1))
    return lam >= -rel_tol * np.maximum(scale, 1.0)


def mixed_determinants(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """All normalized mixed determinants MD_j(p, q), j = 0..n, nodewise.

    Defined through det(s*p + q) = sum_j C(n,j) s^j MD_j where MD_j mixes
    j copies of p with n-j copies of q and MD_n(p, p-slot) = det(p).
    Returned with shape (n+1,) + batch, index j first.

    The coefficients are extracted by evaluating the determinant at the
    integer nodes s = 0..n and solving the (exact, tiny) Vandermonde
    system once.
    """
    n = p.shape[-1]
    if q.shape != p.shape:
        q = np.broadcast_to(q, p.shape)
    s_nodes = np.arange(n + 1, dtype=float)
    dets = np.stack([sym_det(s * p + q) for s in s_nodes], axis=0)
    vand = np.vander(s_nodes, n + 1, increasing=True)
    coeffs = np.linalg.solve(vand, dets.reshape(n + 1, -1))
    coeffs = coeffs.reshape((n + 1,) + p.shape[:-2])
    for j in range(n + 1):
        coeffs[j] /= comb(n, j)
    return coeffs


def pencil_eig_bounds(b: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Extreme generalized eigenvalues of the pencil (b, a), a positive definite.

    Returns nodewise (min, max) of the spectrum of a^{-1} b, computed through
    the Cholesky transform so symmetry is preserved.
    """
    ell = np.linalg.cholesky(a)
    ell_inv = np.linalg.inv(ell)
    s = ell_inv @ b @ np.swapaxes(ell_inv, -1, -2)
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    return sym_eig_bounds(s)
