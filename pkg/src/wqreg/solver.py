"""Induced-smoothed estimating equations and the three fitting drivers.

The estimating function, its Jacobian and the score covariance are shared
by all methods; WI, PQR and AQR differ only in the weights they feed in
(Gamma, C, sigma). One Newton loop with a joint Omega update drives all of
them. Two refinement phases run after the loop:

* every converged fit gets a final Newton pass at frozen weights so the
  reported beta is a machine-precision root of the smoothed equation;
* the WI fit additionally continues with a vanishing-smoothing phase that
  drives beta to the exact minimizer of the check-loss objective, since
  with shrinking radii the smoothed equation is the gradient of a convex
  surrogate of that objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .correlation import (
    ScoreVariances,
    WorkingCovariance,
    assemble_working_covariance,
    build_stationary_correlation,
    estimate_lag_correlations,
    sigma_constant,
    sigma_empirical,
    standardized_scores,
)
from .exceptions import DataError, SolverError
from .model import (
    FitResult,
    LongitudinalDataset,
    check_objective,
    check_tau,
    smoothed_score,
    smoothed_score_density,
)
from .sparsity import (
    SparsityWeights,
    estimate_sparsity_hk,
    hall_sheather_bandwidth,
    identity_sparsity,
)

__all__ = [
    "METHODS",
    "SolverConfig",
    "SmoothingState",
    "smoothed_estimating_function",
    "smoothed_jacobian",
    "score_covariance",
    "sandwich_covariance",
    "fit",
    "fit_many",
    "confidence_intervals",
]

METHODS = ("WI", "PQR", "AQR")

COND_MAX = 1e12  # Jacobian condition limit; beyond it the system is singular
RADII_FLOOR = 1e-12
MAX_HALVINGS = 20
INFLATE_MAX = 60  # radius inflation attempts before giving up on a step


@dataclass
class SolverConfig:
    """Tolerances and switches of the outer Newton iteration."""

    max_outer_iterations: int = 100
    beta_tolerance: float = 1e-8  # sup-norm of the beta step
    omega_tolerance: float = 1e-6  # relative Frobenius change of Omega
    rho_refresh: bool = True  # re-estimate rho and sigma each outer iteration
    gamma_mode: str = "hk"  # "hk" or "identity"

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be at least 1")
        if self.beta_tolerance <= 0 or self.omega_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.gamma_mode not in ("hk", "identity"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")


@dataclass
class SmoothingState:
    """Omega together with the per-observation radii it induces."""

    omega: np.ndarray
    radii: np.ndarray

    @classmethod
    def from_omega(cls, dataset: LongitudinalDataset, omega: np.ndarray) -> "SmoothingState":
        return cls(omega, _radii(dataset.X, omega))


def _radii(X: np.ndarray, omega: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, omega, X), 0.0))
    return np.maximum(r, RADII_FLOOR)


# ---------------------------------------------------------------------------
# estimating function, Jacobian, score covariance
# ---------------------------------------------------------------------------


def smoothed_estimating_function(
    dataset: LongitudinalDataset,
    beta: np.ndarray,
    state: SmoothingState,
    gamma: SparsityWeights,
    sigma: WorkingCovariance,
    tau: float,
) -> np.ndarray:
    """U~(beta) = sum_i X_i' Gamma_i Sigma_i^{-1} psi~(y_i - X_i beta)."""
    psi = smoothed_score(dataset.y - dataset.X @ beta, state.radii, tau)
    U = np.zeros(dataset.p)
    for n, _, obs, Xg, _ in dataset.groups():
        q = sigma.solve_vectors(n, psi[obs])
        U += np.einsum("gnp,gn->p", Xg, gamma.values[obs] * q)
    return U


def smoothed_jacobian(
    dataset: LongitudinalDataset,
    beta: np.ndarray,
    state: SmoothingState,
    gamma: SparsityWeights,
    sigma: WorkingCovariance,
    tau: float,
) -> np.ndarray:
    """G~ = sum_i X_i' Gamma_i Sigma_i^{-1} Lambda~_i X_i (minus dU/dbeta).

    Raises SolverError when the assembled matrix has condition number above
    1e12; the smoothed system is then numerically singular.
    """
    lam = smoothed_score_density(dataset.y - dataset.X @ beta, state.radii)
    G = np.zeros((dataset.p, dataset.p))
    for n, _, obs, Xg, _ in dataset.groups():
        M = sigma.solve_blocks(n, lam[obs][:, :, None] * Xg)
        G += np.einsum("gnp,gnq->pq", gamma.values[obs][:, :, None] * Xg, M)
    # the negated comparison also catches a NaN condition number (zero matrix)
    if not np.all(np.isfinite(G)) or not (np.linalg.cond(G) <= COND_MAX):
        raise SolverError("smoothed Jacobian is numerically singular")
    return G


def score_covariance(
    dataset: LongitudinalDataset,
    beta: np.ndarray,
    state: SmoothingState,
    gamma: SparsityWeights,
    sigma: WorkingCovariance,
    tau: float,
) -> np.ndarray:
    """cov(U~) = sum_i v_i v_i' with v_i = X_i' Gamma_i Sigma_i^{-1} psi~_i."""
    psi = smoothed_score(dataset.y - dataset.X @ beta, state.radii, tau)
    V = np.zeros((dataset.p, dataset.p))
    for n, _, obs, Xg, _ in dataset.groups():
        q = sigma.solve_vectors(n, psi[obs])
        v = np.einsum("gnp,gn->gp", gamma.values[obs][:, :, None] * Xg, q)
        V += v.T @ v
    return V


def _sandwich(G: np.ndarray, V: np.ndarray) -> np.ndarray:
    # Omega = G^{-1} V G^{-T}, computed through two solves
    W = np.linalg.solve(G, V)
    omega = np.linalg.solve(G, W.T).T
    return 0.5 * (omega + omega.T)


def sandwich_covariance(
    dataset: LongitudinalDataset,
    beta: np.ndarray,
    state: SmoothingState,
    gamma: SparsityWeights,
    sigma: WorkingCovariance,
    tau: float,
) -> np.ndarray:
    """Sandwich estimate G~^{-1} cov(U~) G~^{-T} of the covariance of beta."""
    G = smoothed_jacobian(dataset, beta, state, gamma, sigma, tau)
    V = score_covariance(dataset, beta, state, gamma, sigma, tau)
    return _sandwich(G, V)


def confidence_intervals(result: FitResult, level: float = 0.95) -> np.ndarray:
    """Per-coefficient Wald intervals beta_k +/- z (1+level)/2 * SE_k."""
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    z = norm.ppf(0.5 * (1.0 + level))
    half = z * result.std_errors
    return np.column_stack([result.beta - half, result.beta + half])


# ---------------------------------------------------------------------------
# weight construction per method
# ---------------------------------------------------------------------------


def _wi_weights(dataset: LongitudinalDataset, tau: float):
    variances = ScoreVariances(np.full(dataset.max_n, sigma_constant(tau)))
    C = np.eye(dataset.max_n)
    sigma = assemble_working_covariance(variances, C, dataset)
    return identity_sparsity(dataset), sigma


def _weighted_sigma(dataset: LongitudinalDataset, beta, tau: float, method: str):
    if method == "AQR":
        variances = sigma_empirical(dataset, beta, tau)
    else:
        variances = ScoreVariances(np.full(dataset.max_n, sigma_constant(tau)))
    if dataset.max_n >= 2:
        scores = standardized_scores(dataset, beta, tau, variances)
        rho = estimate_lag_correlations(dataset, scores)
    else:
        rho = np.empty(0)
    C = build_stationary_correlation(rho, dataset.max_n)
    return assemble_working_covariance(variances, C, dataset, rho), rho


# ---------------------------------------------------------------------------
# Newton loop with Omega update
# ---------------------------------------------------------------------------


def _jacobian_with_inflation(dataset, beta, state, gamma, sigma, tau):
    """Jacobian guarded against kernel underflow.

    When every residual sits far outside its smoothing radius the Gaussian
    kernel underflows and G~ degenerates. Inflating Omega widens the radii
    until the system is invertible again; the subsequent Omega update
    overwrites the inflated value.
    """
    for _ in range(INFLATE_MAX):
        try:
            return smoothed_jacobian(dataset, beta, state, gamma, sigma, tau), state
        except SolverError:
            state = SmoothingState.from_omega(dataset, state.omega * 10.0)
    raise SolverError("smoothed Jacobian stayed singular under radius inflation")


def _newton_loop(dataset, tau, method, config, beta0, gamma):
    X, y = dataset.X, dataset.y
    beta = beta0.copy()
    state = SmoothingState.from_omega(dataset, np.eye(dataset.p) / dataset.m)
    sigma = None
    rho_hat = np.empty(0)
    track_best = method == "WI"
    best_beta = beta.copy()
    best_obj = check_objective(X, y, beta, tau) if track_best else np.inf
    converged = False
    iterations = 0
    for it in range(config.max_outer_iterations):
        iterations = it + 1
        if method == "WI":
            if sigma is None:
                _, sigma = _wi_weights(dataset, tau)
        elif sigma is None or config.rho_refresh:
            sigma, rho_hat = _weighted_sigma(dataset, beta, tau, method)
        U = smoothed_estimating_function(dataset, beta, state, gamma, sigma, tau)
        G, state = _jacobian_with_inflation(dataset, beta, state, gamma, sigma, tau)
        step = np.linalg.solve(G, U)
        norm0 = np.linalg.norm(U)
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            trial = smoothed_estimating_function(
                dataset, beta + scale * step, state, gamma, sigma, tau
            )
            if np.linalg.norm(trial) <= norm0:
                break
            scale *= 0.5
        # accepted regardless after the last halving
        beta_new = beta + scale * step
        V = score_covariance(dataset, beta, state, gamma, sigma, tau)
        omega_new = _sandwich(G, V)
        delta_beta = float(np.max(np.abs(beta_new - beta)))
        denom = max(np.linalg.norm(state.omega), 1e-300)
        delta_omega = float(np.linalg.norm(omega_new - state.omega) / denom)
        beta = beta_new
        state = SmoothingState.from_omega(dataset, omega_new)
        if track_best:
            obj = check_objective(X, y, beta, tau)
            if obj < best_obj:
                best_obj, best_beta = obj, beta.copy()
        if delta_beta < config.beta_tolerance and delta_omega < config.omega_tolerance:
            converged = True
            break
    return beta, state, sigma, rho_hat, iterations, converged, best_beta, best_obj


def _refine_root(dataset, beta, state, gamma, sigma, tau):
    """Newton at frozen weights until the smoothed score is a numerical zero."""
    best_beta = beta.copy()
    best_norm = np.inf
    for _ in range(30):
        U = smoothed_estimating_function(dataset, beta, state, gamma, sigma, tau)
        sup = float(np.max(np.abs(U)))
        if sup < best_norm:
            best_norm, best_beta = sup, beta.copy()
        if sup <= 1e-9:
            break
        try:
            G = smoothed_jacobian(dataset, beta, state, gamma, sigma, tau)
            step = np.linalg.solve(G, U)
        except (SolverError, np.linalg.LinAlgError):
            break
        norm0 = np.linalg.norm(U)
        scale, moved = 1.0, False
        for _ in range(MAX_HALVINGS):
            trial = smoothed_estimating_function(
                dataset, beta + scale * step, state, gamma, sigma, tau
            )
            if np.linalg.norm(trial) < norm0:
                beta = beta + scale * step
                moved = True
                break
            scale *= 0.5
        if not moved:
            break
    return best_beta


# ---------------------------------------------------------------------------
# WI vanishing-smoothing phase
# ---------------------------------------------------------------------------

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _smoothed_check_loss(u: np.ndarray, r: np.ndarray, tau: float) -> float:
    """Convex primitive whose gradient in beta is -X' psi~; used for line search."""
    z = np.clip(u / r, -40.0, 40.0)
    from scipy.special import ndtr

    return float(((tau - 1.0) * u + u * ndtr(z) + r * np.exp(-0.5 * z * z) / _SQRT_2PI).sum())


def _polish_to_vertex(X, y, tau, beta_start, r_base, best_beta, best_obj):
    """Drive beta to the exact check-loss minimizer by shrinking the radii.

    Each level solves the smoothed convex problem at radii shrunk by half a
    decade, warm-started from the previous level. Steps use Levenberg
    damping so that a degenerate Jacobian degrades into a short gradient
    step instead of an overshoot. The best exact objective seen anywhere
    wins.
    """
    n_obs, p = X.shape
    beta = beta_start.copy()
    eye = np.eye(p)
    for level in range(1, 17):
        r = np.maximum(r_base * 10.0 ** (-0.5 * level), RADII_FLOOR)
        mu0 = 1e-10
        for _ in range(120):
            resid = y - X @ beta
            U = X.T @ smoothed_score(resid, r, tau)
            if np.max(np.abs(U)) < 1e-13 * n_obs:
                break
            lam = smoothed_score_density(resid, r)
            G = X.T @ (lam[:, None] * X)
            f0 = _smoothed_check_loss(resid, r, tau)
            trace = max(np.trace(G) / p, 1e-300)
            mu, accepted, step = mu0, False, None
            for _ in range(60):
                try:
                    step = np.linalg.solve(G + mu * trace * eye, U)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                if not np.all(np.isfinite(step)):
                    mu *= 10.0
                    continue
                f_trial = _smoothed_check_loss(y - X @ (beta + step), r, tau)
                decrease = 1e-4 * float(U @ step)
                if f_trial <= f0 - decrease or f_trial < f0 - 1e-15 * (1.0 + abs(f0)):
                    beta = beta + step
                    accepted = True
                    mu0 = max(mu0 / 10.0, 1e-12)
                    break
                mu *= 10.0
            if not accepted:
                break
            obj = check_objective(X, y, beta, tau)
            if obj < best_obj:
                best_obj, best_beta = obj, beta.copy()
            if np.max(np.abs(step)) < 1e-15 * (1.0 + np.max(np.abs(beta))):
                break
    return best_beta, best_obj


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _fit_wi(dataset: LongitudinalDataset, tau: float, config: SolverConfig) -> FitResult:
    X, y = dataset.X, dataset.y
    beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    gamma, _ = _wi_weights(dataset, tau)
    beta, state, sigma, _, iterations, converged, best_beta, best_obj = _newton_loop(
        dataset, tau, "WI", config, beta0, gamma
    )
    if converged:
        beta = _refine_root(dataset, beta, state, gamma, sigma, tau)
        obj = check_objective(X, y, beta, tau)
        if obj < best_obj:
            best_obj, best_beta = obj, beta.copy()
    beta_root = beta.copy()

    # vanishing-smoothing continuation; base radii clamped to the residual
    # scale so a diverged Omega cannot poison them
    resid = y - X @ best_beta
    data_scale = max(1.4826 * float(np.median(np.abs(resid))), 1e-6 * (1.0 + float(np.std(y))))
    if np.all(np.isfinite(state.omega)):
        r_base = np.minimum(_radii(X, state.omega), data_scale)
    else:
        r_base = np.full(dataset.n_obs, data_scale)
    beta_hat, _ = _polish_to_vertex(X, y, tau, best_beta.copy(), r_base, best_beta, best_obj)

    if np.all(np.isfinite(state.omega)):
        report_state = state
    else:
        report_state = SmoothingState(None, np.full(dataset.n_obs, data_scale))
    try:
        omega = sandwich_covariance(dataset, beta_hat, report_state, gamma, sigma, tau)
        std_errors = np.sqrt(np.maximum(np.diag(omega), 0.0))
    except (SolverError, np.linalg.LinAlgError):
        omega = np.full((dataset.p, dataset.p), np.nan)
        std_errors = np.full(dataset.p, np.nan)
        converged = False
    result = FitResult(
        beta=beta_hat,
        omega=omega,
        std_errors=std_errors,
        iterations=iterations,
        converged=converged,
        tau=tau,
        method="WI",
        rho_hat=np.empty(0),
        beta_root=beta_root,
        n_obs=dataset.n_obs,
    )
    result._context = {"state": report_state, "gamma": gamma, "sigma": sigma}
    return result


def _fit_weighted(
    dataset: LongitudinalDataset,
    tau: float,
    method: str,
    config: SolverConfig,
    beta0: np.ndarray,
    gamma: SparsityWeights,
) -> FitResult:
    beta, state, sigma, rho_hat, iterations, converged, _, _ = _newton_loop(
        dataset, tau, method, config, beta0, gamma
    )
    if converged:
        beta = _refine_root(dataset, beta, state, gamma, sigma, tau)
    try:
        omega = sandwich_covariance(dataset, beta, state, gamma, sigma, tau)
        std_errors = np.sqrt(np.maximum(np.diag(omega), 0.0))
    except (SolverError, np.linalg.LinAlgError):
        omega = np.full((dataset.p, dataset.p), np.nan)
        std_errors = np.full(dataset.p, np.nan)
        converged = False
    result = FitResult(
        beta=beta,
        omega=omega,
        std_errors=std_errors,
        iterations=iterations,
        converged=converged,
        tau=tau,
        method=method,
        rho_hat=rho_hat,
        beta_root=beta.copy(),
        n_obs=dataset.n_obs,
    )
    result._context = {"state": state, "gamma": gamma, "sigma": sigma}
    return result


def _gamma_for(dataset, tau, config) -> SparsityWeights:
    if config.gamma_mode == "identity":
        return identity_sparsity(dataset)
    h = hall_sheather_bandwidth(tau, dataset.n_obs)
    fit_lo = _fit_wi(dataset, tau - h, config)
    fit_hi = _fit_wi(dataset, tau + h, config)
    if not (fit_lo.converged and fit_hi.converged):
        # quantile-crossing or a failed auxiliary fit: fall back to unit
        # weights, which the estimator tolerates at some efficiency cost
        return identity_sparsity(dataset)
    return estimate_sparsity_hk(dataset, tau, h, fit_lo, fit_hi)


def fit_many(
    dataset: LongitudinalDataset,
    tau: float,
    methods,
    config: SolverConfig | None = None,
) -> dict:
    """Fit several methods at one tau, sharing the WI baseline and Gamma.

    Returns a dict keyed by canonical method name. The WI fit is always
    computed because it initializes the weighted methods.
    """
    tau = check_tau(tau)
    config = config or SolverConfig()
    wanted = [str(m).upper() for m in methods]
    for m in wanted:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    if dataset.n_obs <= dataset.p:
        raise DataError(f"need more observations ({dataset.n_obs}) than parameters ({dataset.p})")
    if np.linalg.matrix_rank(dataset.X) < dataset.p:
        raise DataError("stacked design matrix is rank deficient")
    results = {}
    wi = _fit_wi(dataset, tau, config)
    if "WI" in wanted:
        results["WI"] = wi
    weighted = [m for m in wanted if m != "WI"]
    if weighted:
        gamma = _gamma_for(dataset, tau, config)
        for method in weighted:
            results[method] = _fit_weighted(dataset, tau, method, config, wi.beta, gamma)
    return results


def fit(
    dataset: LongitudinalDataset,
    tau: float,
    method: str = "PQR",
    config: SolverConfig | None = None,
) -> FitResult:
    """Fit one quantile regression by the requested method."""
    return fit_many(dataset, tau, [method], config)[str(method).upper()]
