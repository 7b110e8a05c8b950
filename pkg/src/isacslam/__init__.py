"""Cooperative multi-user radio SLAM, multi-modal localization and
sensing-aided beam management for mmWave ISAC simulations."""

__version__ = "0.1.0"


class GeometryError(ValueError):
    """Raised for degenerate geometric inputs (coincident points, zero-length walls)."""


class ContractError(RuntimeError):
    """Raised when an algorithm precondition between modules is violated."""
