"""Brute-force reference implementations used only by tests.

Nothing here is a production code path. The exact WI fit enumerates all
p-subsets of observations, which is only viable on tiny instances; the
other two oracles provide independent numbers for cross-checking the
solver's Jacobian and the lag-correlation estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError
from .model import LongitudinalDataset, check_objective, check_tau

__all__ = [
    "OracleFit",
    "exact_wi_fit",
    "finite_difference_jacobian",
    "indicator_correlation_oracle",
]

MAX_OBS = 40
MAX_DIM = 3


@dataclass
class OracleFit:
    beta: np.ndarray
    objective: float


def exact_wi_fit(dataset: LongitudinalDataset, tau: float) -> OracleFit:
    """Exact minimizer of the check-loss objective by subset enumeration.

    A minimizer interpolates p observations, so every nonsingular p-subset
    yields one candidate. Ties are broken by lexicographically smallest
    beta. Guarded to N <= 40 and p <= 3.
    """
    tau = check_tau(tau)
    X, y = dataset.X, dataset.y
    n_obs, p = X.shape
    if n_obs > MAX_OBS or p > MAX_DIM:
        raise ValueError(f"oracle limited to N <= {MAX_OBS}, p <= {MAX_DIM}")
    row_norms = np.linalg.norm(X, axis=1)
    best_beta, best_obj = None, np.inf
    for idx in itertools.combinations(range(n_obs), p):
        sub = X[list(idx)]
        scale = np.prod(row_norms[list(idx)])
        if scale == 0.0 or abs(np.linalg.det(sub)) <= 1e-12 * scale:
            continue
        beta = np.linalg.solve(sub, y[list(idx)])
        obj = check_objective(X, y, beta, tau)
        if best_beta is None or obj < best_obj - 1e-12 * (1.0 + abs(best_obj)):
            best_beta, best_obj = beta, obj
        elif abs(obj - best_obj) <= 1e-12 * (1.0 + abs(best_obj)):
            if tuple(beta) < tuple(best_beta):
                best_beta = beta
    if best_beta is None:
        raise DataError("no nonsingular observation subset; design is rank deficient")
    return OracleFit(best_beta, best_obj)


def finite_difference_jacobian(func, beta: np.ndarray, step: float) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function at beta."""
    if step <= 0.0:
        raise ValueError("step must be positive")
    beta = np.asarray(beta, dtype=float)
    cols = []
    for k in range(beta.shape[0]):
        e = np.zeros_like(beta)
        e[k] = step
        cols.append((np.asarray(func(beta + e)) - np.asarray(func(beta - e))) / (2.0 * step))
    return np.column_stack(cols)


def indicator_correlation_oracle(rho: float) -> float:
    """Correlation of I(e1 < 0), I(e2 < 0) for standard bivariate normal.

    Closed form (2 / pi) * arcsin(rho); the limit the lag-correlation
    estimator recovers at the median.
    """
    rho = float(rho)
    if not abs(rho) < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    return 2.0 / np.pi * float(np.arcsin(rho))
