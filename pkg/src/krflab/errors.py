"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration and dependency problems
exit with 2, solver and stability failures with 3, failed verification
checks with 1 (reported, not raised).
"""

from __future__ import annotations


class KrfError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(KrfError):
    """Malformed or out-of-range configuration input."""


class ModelError(KrfError):
    """Model data violates a structural requirement (definiteness, positivity)."""


class DependencyError(KrfError):
    """A prerequisite artifact is missing or unreadable."""


class SolverError(KrfError):
    """An iterative solver failed to converge."""

    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


class StabilityError(SolverError):
    """Time stepping could not proceed above the minimum step size."""


class AdmissibilityError(KrfError):
    """A matrix that must be positive (semi)definite is not."""


class HypothesisError(KrfError):
    """A barrier construction hypothesis fails on the given data."""
