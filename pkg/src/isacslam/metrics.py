"""Evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channel import sum_se


@dataclass(frozen=True)
class OspaConfig:
    cutoff: float = 10.0
    order: int = 1

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ValueError("OSPA cutoff must be positive")
        if self.order != 1:
            raise ValueError("only order 1 is supported")


def _as_points(a) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(-1, 2)


def ospa(estimated, truth, cutoff: float = 10.0) -> float:
    """Order-1 OSPA distance with an exact optimal assignment."""
    if not cutoff > 0:
        raise ValueError("OSPA cutoff must be positive")
    X, Y = _as_points(estimated), _as_points(truth)
    n, m = len(X), len(Y)
    if n == 0 and m == 0:
        return 0.0
    if n == 0 or m == 0:
        return float(cutoff)
    D = np.minimum(np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=2), cutoff)
    rows, cols = linear_sum_assignment(D)
    total = D[rows, cols].sum() + cutoff * abs(n - m)
    return float(total / max(n, m))


def ue_error(estimates, truth):
    """Per-UE Euclidean errors and their mean."""
    E, T = _as_points(estimates), _as_points(truth)
    if E.shape != T.shape:
        raise ValueError(f"estimate/truth count mismatch: {len(E)} vs {len(T)}")
    err = np.linalg.norm(E - T, axis=1)
    return err, float(err.mean()) if len(err) else 0.0


def realized_se(channels, pairs, sigma2: float) -> float:
    return sum_se(channels, pairs, sigma2)
