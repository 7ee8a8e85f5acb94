"""Working covariance of the quantile scores.

Builds Sigma_i = A_i^{1/2} C(rho) A_i^{1/2} from per-occasion score
variances and the stationary lag-correlation moment estimator. Subjects
with the same occasion count share one Cholesky factor, which the solver
exploits; all linear solves go through triangular factors, never an
explicit inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, toeplitz

from .exceptions import DataError
from .model import LongitudinalDataset, check_tau, score_psi

__all__ = [
    "SIGMA_MIN",
    "ScoreVariances",
    "sigma_constant",
    "sigma_empirical",
    "standardized_scores",
    "estimate_lag_correlations",
    "build_stationary_correlation",
    "regularize_correlation",
    "WorkingCovariance",
    "assemble_working_covariance",
]

# variance floor: an occasion whose indicator proportion hits 0 or 1 carries
# no rank information and would otherwise divide by zero
SIGMA_MIN = 1e-4

LAG_CLAMP = 0.99


@dataclass
class ScoreVariances:
    """Per-occasion score variances sigma_jj, shared by all subjects.

    Occasion j is the within-subject position; every subject observed at
    position j uses per_position[j].
    """

    per_position: np.ndarray  # (max_n,), each >= SIGMA_MIN

    def __post_init__(self):
        v = np.asarray(self.per_position, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("score variances must be finite")
        self.per_position = np.maximum(v, SIGMA_MIN)

    def per_observation(self, dataset: LongitudinalDataset) -> np.ndarray:
        """Expand to one value per stacked observation row."""
        return self.per_position[dataset.positions]


def sigma_constant(tau: float) -> float:
    """Constant score variance tau * (1 - tau) used by WI and PQR."""
    tau = check_tau(tau)
    return tau * (1.0 - tau)


def sigma_empirical(dataset: LongitudinalDataset, beta: np.ndarray, tau: float) -> ScoreVariances:
    """Per-occasion empirical score variances p_j (1 - p_j) used by AQR.

    p_j is the fraction of subjects observed at occasion j whose residual
    is strictly negative at the supplied beta.
    """
    check_tau(tau)
    resid = dataset.y - dataset.X @ beta
    neg = resid < 0.0
    max_n = dataset.max_n
    counts = np.bincount(dataset.positions, minlength=max_n)
    if np.any(counts == 0):
        raise DataError("an occasion position has no observations")
    hits = np.bincount(dataset.positions, weights=neg.astype(float), minlength=max_n)
    p_hat = hits / counts
    return ScoreVariances(p_hat * (1.0 - p_hat))


def standardized_scores(
    dataset: LongitudinalDataset,
    beta: np.ndarray,
    tau: float,
    variances: ScoreVariances,
) -> np.ndarray:
    """Scores psi_tau(y - x'beta) divided by the per-occasion sqrt variance."""
    psi = score_psi(dataset.y - dataset.X @ beta, tau)
    return psi / np.sqrt(variances.per_observation(dataset))


def estimate_lag_correlations(dataset: LongitudinalDataset, scores: np.ndarray) -> np.ndarray:
    """Moment estimator of the stationary lag correlations of the scores.

    For each lag l = 1, ..., max_n - 1 pools all available within-subject
    pairs:

        rho_l = [sum_i sum_j ytil_ij ytil_i,j+l / sum_i (n_i - l)]
                / [sum_i sum_j ytil_ij^2 / sum_i n_i]

    clamped to [-0.99, 0.99].
    """
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.shape[0] != dataset.n_obs:
        raise ValueError("scores length does not match dataset")
    if dataset.max_n < 2:
        raise DataError("lag correlations need at least one subject with two occasions")
    if np.all(scores == 0.0):
        raise DataError("all standardized scores are zero")
    den = float(scores @ scores) / dataset.n_obs
    lags = dataset.max_n - 1
    num_sum = np.zeros(lags)
    pair_count = np.zeros(lags)
    for n, idx, obs, _, _ in dataset.groups():
        sg = scores[obs]  # (g, n)
        for lag in range(1, n):
            num_sum[lag - 1] += float((sg[:, :-lag] * sg[:, lag:]).sum())
            pair_count[lag - 1] += idx.size * (n - lag)
    rho = (num_sum / pair_count) / den
    return np.clip(rho, -LAG_CLAMP, LAG_CLAMP)


def build_stationary_correlation(rho: np.ndarray, n: int) -> np.ndarray:
    """Toeplitz correlation matrix with rho_l on the l-th off-diagonals."""
    rho = np.asarray(rho, dtype=float).ravel()
    if n < 1:
        raise ValueError("occasion count must be at least 1")
    if rho.shape[0] < n - 1:
        raise ValueError(f"need {n - 1} lags, got {rho.shape[0]}")
    return toeplitz(np.concatenate([[1.0], rho[: n - 1]]))


def regularize_correlation(C: np.ndarray) -> np.ndarray:
    """Repair a possibly non-PD correlation matrix by identity shrinkage.

    Returns C unchanged when its Cholesky succeeds; otherwise the smallest
    lam in {0.05, 0.10, ..., 0.95} with min eigenvalue of
    (1 - lam) C + lam I at least 1e-6, falling back to the identity.
    """
    C = np.asarray(C, dtype=float)
    try:
        np.linalg.cholesky(C)
        return C
    except np.linalg.LinAlgError:
        pass
    n = C.shape[0]
    eye = np.eye(n)
    for lam in np.arange(1, 20) * 0.05:
        shrunk = (1.0 - lam) * C + lam * eye
        if np.linalg.eigvalsh(shrunk).min() >= 1e-6:
            return shrunk
    return eye


class WorkingCovariance:
    """Per-subject Sigma_i with shared Cholesky factors by occasion count."""

    def __init__(self, variances: ScoreVariances, correlation: np.ndarray,
                 dataset: LongitudinalDataset, lag_correlations: np.ndarray | None = None):
        self.variances = variances
        self.correlation = np.asarray(correlation, dtype=float)
        self.lag_correlations = (
            np.empty(0) if lag_correlations is None else np.asarray(lag_correlations, float)
        )
        max_n = dataset.max_n
        if self.correlation.shape != (max_n, max_n):
            raise ValueError("correlation matrix does not match the occasion count")
        sd = np.sqrt(variances.per_position[:max_n])
        full = sd[:, None] * self.correlation * sd[None, :]
        self._full = full
        self._chol = {}
        for n, _, _, _, _ in dataset.groups():
            self._chol[n] = cho_factor(full[:n, :n], lower=True)

    def subject_matrix(self, dataset: LongitudinalDataset, i: int) -> np.ndarray:
        """Dense Sigma_i for subject index i."""
        n = int(dataset.lengths[i])
        return self._full[:n, :n].copy()

    def solve_vectors(self, n: int, values: np.ndarray) -> np.ndarray:
        """Sigma^{-1} v for a (g, n) stack of per-subject vectors."""
        return cho_solve(self._chol[n], values.T).T

    def solve_blocks(self, n: int, blocks: np.ndarray) -> np.ndarray:
        """Sigma^{-1} B for a (g, n, p) stack of per-subject matrices."""
        g, _, p = blocks.shape
        flat = blocks.transpose(1, 0, 2).reshape(n, g * p)
        out = cho_solve(self._chol[n], flat)
        return out.reshape(n, g, p).transpose(1, 0, 2)


def assemble_working_covariance(
    variances: ScoreVariances,
    correlation: np.ndarray,
    dataset: LongitudinalDataset,
    lag_correlations: np.ndarray | None = None,
) -> WorkingCovariance:
    """Build Sigma_i = A^{1/2} C A^{1/2} with its Cholesky factors."""
    C = regularize_correlation(correlation)
    return WorkingCovariance(variances, C, dataset, lag_correlations)
