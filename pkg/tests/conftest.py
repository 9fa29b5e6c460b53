import os

os.environ.setdefault("MPLBACKEND", "Agg")

import numpy as np
import pytest

from krflab.presets import acceptance_phi0, acceptance_problem, constant_problem


@pytest.fixture(scope="session")
def problem24():
    return acceptance_problem((24, 24))


@pytest.fixture(scope="session")
def phi024(problem24):
    return acceptance_phi0(problem24.grid)


@pytest.fixture(scope="session")
def const_problem():
    return constant_problem((16, 8))


def random_spd(rng, n, batch=(), scale=1.0):
    """Random symmetric positive definite matrices, eigenvalues >= 0.1."""
    a = rng.standard_normal(batch + (n, n))
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    return scale * (sym @ np.swapaxes(sym, -1, -2) + 0.1 * np.eye(n))


def random_psd(rng, n, batch=()):
    a = rng.standard_normal(batch + (n, n))
    return a @ np.swapaxes(a, -1, -2)
