"""Core domain types and the scalar score/check functions.

Longitudinal data are stored as independent subjects, each carrying a block
of covariate rows and responses. All estimating equations in this package
are built from the four scalar functions defined here: the check loss, its
discontinuous score, and the induced-smoothed score with its density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .exceptions import DataError

__all__ = [
    "check_tau",
    "Subject",
    "LongitudinalDataset",
    "FitResult",
    "check_loss",
    "check_objective",
    "score_psi",
    "smoothed_score",
    "smoothed_score_density",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)
# beyond |z| = 40 the normal cdf/pdf are 0/1 to double precision
_Z_CLIP = 40.0


def check_tau(tau: float) -> float:
    """Validate a quantile level, returning it as a float.

    Raises
    ------
    ValueError
        If tau is not strictly inside (0, 1).
    """
    tau = float(tau)
    if not np.isfinite(tau) or not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau!r}")
    return tau


def _norm_pdf(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -_Z_CLIP, _Z_CLIP)
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def _norm_cdf(z: np.ndarray) -> np.ndarray:
    return ndtr(np.clip(z, -_Z_CLIP, _Z_CLIP))


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class Subject:
    """One independent subject: covariate rows x_ij and responses y_ij."""

    id: object
    covariates: np.ndarray  # (n_i, p), row j = x_ij
    responses: np.ndarray  # (n_i,)

    def __post_init__(self):
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        self.responses = np.asarray(self.responses, dtype=float).ravel()
        if self.covariates.shape[0] != self.responses.shape[0]:
            raise DataError(
                f"subject {self.id!r}: {self.covariates.shape[0]} covariate rows "
                f"vs {self.responses.shape[0]} responses"
            )
        if self.responses.shape[0] < 1:
            raise DataError(f"subject {self.id!r} has no observations")
        if not (np.all(np.isfinite(self.covariates)) and np.all(np.isfinite(self.responses))):
            raise DataError(f"subject {self.id!r} contains non-finite values")

    @property
    def n(self) -> int:
        return self.responses.shape[0]


class LongitudinalDataset:
    """An ordered collection of subjects sharing one covariate dimension.

    Besides the per-subject view, the constructor caches a stacked design
    matrix and a grouping of subjects by occasion count. Subjects with the
    same number of occasions share one working-covariance factor, so the
    solver batches them.
    """

    def __init__(self, subjects):
        self.subjects = list(subjects)
        if not self.subjects:
            raise DataError("dataset needs at least one subject")
        p = self.subjects[0].covariates.shape[1]
        for s in self.subjects:
            if s.covariates.shape[1] != p:
                raise DataError(
                    f"subject {s.id!r} has {s.covariates.shape[1]} covariates, expected {p}"
                )
        self.p = p
        self.X = np.vstack([s.covariates for s in self.subjects])
        self.y = np.concatenate([s.responses for s in self.subjects])
        self.lengths = np.array([s.n for s in self.subjects], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        # flat occasion position (0-based within subject) per observation
        self.positions = np.concatenate([np.arange(n) for n in self.lengths])
        self._groups = None

    @property
    def m(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return int(self.y.shape[0])

    @property
    def max_n(self) -> int:
        return int(self.lengths.max())

    def groups(self):
        """Subjects batched by occasion count.

        Returns a list of (n, subject_indices, obs_indices, Xg, yg) with
        obs_indices of shape (g, n) gathering the flat observation rows,
        Xg of shape (g, n, p) and yg of shape (g, n).
        """
        if self._groups is None:
            out = []
            for n in np.unique(self.lengths):
                idx = np.flatnonzero(self.lengths == n)
                obs = self.offsets[idx][:, None] + np.arange(n)[None, :]
                out.append((int(n), idx, obs, self.X[obs], self.y[obs]))
            self._groups = out
        return self._groups


@dataclass
class FitResult:
    """Output of one quantile regression fit."""

    beta: np.ndarray  # coefficient estimates
    omega: np.ndarray  # estimated covariance of beta (sandwich)
    std_errors: np.ndarray  # sqrt of diag(omega)
    iterations: int
    converged: bool
    tau: float
    method: str  # "WI", "PQR" or "AQR"
    rho_hat: np.ndarray  # lag correlations; empty for WI
    # root of the smoothed estimating equation at the final radii; for WI this
    # is the pre-polish fixed point, for PQR/AQR it equals beta
    beta_root: np.ndarray | None = None
    n_obs: int = 0
    coefficient_names: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# scalar functions (vectorized over numpy arrays)
# ---------------------------------------------------------------------------


def check_loss(u, tau: float):
    """Check loss rho_tau(u) = u * (tau - I(u <= 0)); nonnegative."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("check_loss requires finite input")
    return np.where(u <= 0.0, u * (tau - 1.0), u * tau)


def check_objective(X: np.ndarray, y: np.ndarray, beta: np.ndarray, tau: float) -> float:
    """Sum of check losses of the residuals y - X beta."""
    return float(check_loss(y - X @ beta, tau).sum())


def score_psi(u, tau: float):
    """Quantile score psi_tau(u) = tau - I(u < 0); equals tau at u = 0."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("score_psi requires finite input")
    return np.where(u < 0.0, tau - 1.0, tau)


def smoothed_score(u, r, tau: float):
    """Induced-smoothed score tau - 1 + Phi(u / r); strictly increasing in u."""
    u = np.asarray(u, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ValueError("smoothing radius must be positive")
    return tau - 1.0 + _norm_cdf(u / r)


def smoothed_score_density(u, r):
    """Derivative of the smoothed score in u: phi(u / r) / r."""
    u = np.asarray(u, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ValueError("smoothing radius must be positive")
    return _norm_pdf(u / r) / r
