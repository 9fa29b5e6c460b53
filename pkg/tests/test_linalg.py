import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflab.linalg import (
    is_posdef,
    lambda_min,
    mixed_determinants,
    pencil_eig_bounds,
    sym_det,
    sym_eig_bounds,
)

from conftest import random_psd, random_spd


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_sym_det_matches_numpy(n):
    rng = np.random.default_rng(7 + n)
    m = random_spd(rng, n, batch=(5, 3))
    assert np.allclose(sym_det(m), np.linalg.det(m), rtol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_sym_eig_bounds_match_eigvalsh(n):
    rng = np.random.default_rng(11 + n)
    a = rng.standard_normal((40, n, n))
    m = 0.5 * (a + np.swapaxes(a, -1, -2))
    lo, hi = sym_eig_bounds(m)
    w = np.linalg.eigvalsh(m)
    assert np.allclose(lo, w[..., 0], atol=1e-12)
    assert np.allclose(hi, w[..., -1], atol=1e-12)


def test_is_posdef_tolerance_keeps_boundary_nodes():
    m = np.zeros((2, 2, 2))
    m[0] = np.eye(2)
    m[1] = np.diag([1.0, -1e-13])
    strict = is_posdef(m)
    assert strict.tolist() == [True, False]
    relaxed = is_posdef(m, rel_tol=1e-10)
    assert relaxed.tolist() == [True, True]


def _mixed_det_bruteforce(p, q):
    """Permanent-style expansion: average det over column choices.

    MD_j(p, q) = (number of j-subsets)^{-1} * sum over subsets S of size j
    of det(columns of p on S, columns of q elsewhere), symmetrized by rows
    not needed since det is multilinear in columns.
    """
    n = p.shape[-1]
    out = np.zeros((n + 1,) + p.shape[:-2])
    for j in range(n + 1):
        acc = 0.0
        subsets = list(itertools.combinations(range(n), j))
        for cols in subsets:
            m = q.copy()
            for c in cols:
                m[..., :, c] = p[..., :, c]
            acc = acc + np.linalg.det(m)
        out[j] = acc / len(subsets)
    return out


@pytest.mark.parametrize("n", [1, 2, 3])
def test_mixed_determinants_against_column_expansion(n):
    rng = np.random.default_rng(3 * n + 1)
    p = random_spd(rng, n, batch=(6,))
    q = random_spd(rng, n, batch=(6,))
    md = mixed_determinants(p, q)
    ref = _mixed_det_bruteforce(p, q)
    assert np.allclose(md, ref, rtol=1e-10, atol=1e-12)


def test_mixed_determinants_endpoints_and_linearity():
    rng = np.random.default_rng(42)
    p = random_spd(rng, 3, batch=(4,))
    q = random_spd(rng, 3, batch=(4,))
    md = mixed_determinants(p, q)
    assert np.allclose(md[0], np.linalg.det(q), rtol=1e-12)
    assert np.allclose(md[3], np.linalg.det(p), rtol=1e-12)
    # multilinearity: MD_1 is linear in the p slot
    md_scaled = mixed_determinants(2.5 * p, q)
    assert np.allclose(md_scaled[1], 2.5 * md[1], rtol=1e-10)


def test_mixed_determinants_reconstruct_det():
    rng = np.random.default_rng(5)
    p = random_spd(rng, 3)
    q = random_spd(rng, 3)
    md = mixed_determinants(p, q)
    for s in (0.3, 1.0, 2.7):
        expect = np.linalg.det(s * p + q)
        series = sum(math.comb(3, j) * s ** j * md[j] for j in range(4))
        assert series == pytest.approx(expect, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3))
def test_mixed_determinants_nonnegative_for_psd_pairs(seed, n):
    rng = np.random.default_rng(seed)
    md = mixed_determinants(random_psd(rng, n), random_psd(rng, n))
    assert (md >= -1e-10 * max(1.0, np.abs(md).max())).all()


def test_pencil_eig_bounds_generalized_eigenvalues():
    from scipy.linalg import eigh

    rng = np.random.default_rng(17)
    a = random_spd(rng, 3, batch=(8,))
    b = random_spd(rng, 3, batch=(8,))
    lo, hi = pencil_eig_bounds(b, a)
    for i in range(8):
        w = eigh(b[i], a[i], eigvals_only=True)
        assert lo[i] == pytest.approx(w[0], rel=1e-10)
        assert hi[i] == pytest.approx(w[-1], rel=1e-10)


def test_pencil_bounds_certify_two_sided_comparison():
    # b <= hi * a and b >= lo * a as quadratic forms
    rng = np.random.default_rng(23)
    a = random_spd(rng, 2)
    b = random_spd(rng, 2)
    lo, hi = pencil_eig_bounds(b, a)
    assert lambda_min(float(hi) * a - b) >= -1e-12
    assert lambda_min(b - float(lo) * a) >= -1e-12
