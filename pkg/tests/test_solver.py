"""Estimating function, Jacobian, sandwich, and the fitting drivers."""

import numpy as np
import pytest

import wqreg.solver as solver_mod
from wqreg import (
    DataError,
    LongitudinalDataset,
    SimConfig,
    SmoothingState,
    SolverConfig,
    SolverError,
    Subject,
    check_objective,
    confidence_intervals,
    exact_wi_fit,
    finite_difference_jacobian,
    fit,
    fit_many,
    generate_dataset,
    sandwich_covariance,
    score_covariance,
    score_psi,
    smoothed_estimating_function,
    smoothed_jacobian,
    smoothed_score,
)
from wqreg.correlation import ScoreVariances, assemble_working_covariance
from wqreg.sparsity import SparsityWeights, identity_sparsity

from conftest import random_dataset, scalar_dataset


def wi_weights(ds, tau=0.5):
    variances = ScoreVariances(np.full(ds.max_n, tau * (1 - tau)))
    return identity_sparsity(ds), assemble_working_covariance(variances, np.eye(ds.max_n), ds)


def unit_weights(ds):
    variances = ScoreVariances(np.ones(ds.max_n))
    return identity_sparsity(ds), assemble_working_covariance(variances, np.eye(ds.max_n), ds)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_outer_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(beta_tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(omega_tolerance=-1e-6)
    with pytest.raises(ValueError):
        SolverConfig(gamma_mode="kernel")


def test_estimating_function_zero_at_zero_residuals():
    ds = scalar_dataset([2.0, 2.0, 2.0])
    gamma, sigma = wi_weights(ds)
    state = SmoothingState.from_omega(ds, np.eye(1))
    U = smoothed_estimating_function(ds, np.array([2.0]), state, gamma, sigma, 0.5)
    assert np.allclose(U, 0.0, atol=1e-15)


def test_estimating_function_symmetric_cancellation():
    ds = scalar_dataset([1.0, -1.0])
    gamma, sigma = unit_weights(ds)
    state = SmoothingState.from_omega(ds, np.eye(1))
    U = smoothed_estimating_function(ds, np.array([0.0]), state, gamma, sigma, 0.5)
    assert U[0] == pytest.approx(0.0, abs=1e-15)


def test_estimating_function_matches_direct_formula(rng):
    subs = [
        Subject(id=i, covariates=np.column_stack([np.ones(2), rng.standard_normal(2)]),
                responses=rng.standard_normal(2))
        for i in range(3)
    ]
    ds = LongitudinalDataset(subs)
    tau = 0.3
    beta = rng.standard_normal(2)
    omega = np.diag(rng.uniform(0.5, 2.0, 2))
    state = SmoothingState.from_omega(ds, omega)
    gamma = SparsityWeights(rng.uniform(0.5, 2.0, ds.n_obs), "hk")
    variances = ScoreVariances(rng.uniform(0.1, 0.4, 2))
    C = np.array([[1.0, 0.4], [0.4, 1.0]])
    sigma = assemble_working_covariance(variances, C, ds)

    U = smoothed_estimating_function(ds, beta, state, gamma, sigma, tau)
    G = smoothed_jacobian(ds, beta, state, gamma, sigma, tau)
    V = score_covariance(ds, beta, state, gamma, sigma, tau)

    # independent elementwise recomputation with explicit inverses
    from wqreg.model import smoothed_score_density

    U_ref = np.zeros(2)
    G_ref = np.zeros((2, 2))
    V_ref = np.zeros((2, 2))
    for i, s in enumerate(subs):
        Xi = s.covariates
        ri = state.radii[2 * i : 2 * i + 2]
        gi = np.diag(gamma.values[2 * i : 2 * i + 2])
        sig_inv = np.linalg.inv(sigma.subject_matrix(ds, i))
        psi = smoothed_score(s.responses - Xi @ beta, ri, tau)
        lam = np.diag(smoothed_score_density(s.responses - Xi @ beta, ri))
        U_ref += Xi.T @ gi @ sig_inv @ psi
        G_ref += Xi.T @ gi @ sig_inv @ lam @ Xi
        v = Xi.T @ gi @ sig_inv @ psi
        V_ref += np.outer(v, v)
    assert np.max(np.abs(U - U_ref)) < 1e-12
    assert np.max(np.abs(G - G_ref)) < 1e-12
    assert np.max(np.abs(V - V_ref)) < 1e-12


def test_jacobian_scalar_case():
    ds = scalar_dataset([0.0])
    gamma, sigma = unit_weights(ds)
    state = SmoothingState.from_omega(ds, np.eye(1))
    G = smoothed_jacobian(ds, np.array([0.0]), state, gamma, sigma, 0.5)
    assert G.shape == (1, 1)
    assert G[0, 0] == pytest.approx(0.3989423, abs=1e-6)


def test_jacobian_matches_finite_differences(rng):
    for _ in range(5):
        ds = random_dataset(rng, 12, 3, 2)
        gamma, sigma = wi_weights(ds, 0.4)
        state = SmoothingState.from_omega(ds, np.eye(2) / ds.m)
        beta = rng.standard_normal(2) * 0.3

        def U_of(b):
            return smoothed_estimating_function(ds, b, state, gamma, sigma, 0.4)

        G = smoothed_jacobian(ds, beta, state, gamma, sigma, 0.4)
        J = finite_difference_jacobian(U_of, beta, 1e-6)
        assert np.linalg.norm(J + G) / np.linalg.norm(G) < 1e-6


def test_jacobian_raises_on_singular_system():
    ds = scalar_dataset([100.0, 200.0])
    gamma, sigma = unit_weights(ds)
    # microscopic radii put every residual far outside the kernel support
    state = SmoothingState(np.eye(1) * 1e-30, np.full(2, 1e-15))
    with pytest.raises(SolverError):
        smoothed_jacobian(ds, np.array([0.0]), state, gamma, sigma, 0.5)


def test_score_covariance_structure(rng):
    ds = scalar_dataset([2.0, 2.0])
    gamma, sigma = wi_weights(ds)
    state = SmoothingState.from_omega(ds, np.eye(1))
    V = score_covariance(ds, np.array([2.0]), state, gamma, sigma, 0.5)
    assert np.allclose(V, 0.0, atol=1e-28)

    one = LongitudinalDataset([Subject(id=0, covariates=[[1.0, 0.5]], responses=[1.3])])
    gamma1, sigma1 = wi_weights(one)
    state1 = SmoothingState.from_omega(one, np.eye(2))
    V1 = score_covariance(one, np.zeros(2), state1, gamma1, sigma1, 0.5)
    psi = smoothed_score(1.3, state1.radii, 0.5) / 0.25
    v = one.X[0] * psi
    assert np.allclose(V1, np.outer(v, v), atol=1e-14)

    ds2 = random_dataset(rng, 15, 3, 2)
    gamma2, sigma2 = wi_weights(ds2)
    state2 = SmoothingState.from_omega(ds2, np.eye(2) / 15)
    V2 = score_covariance(ds2, rng.standard_normal(2), state2, gamma2, sigma2, 0.5)
    assert np.max(np.abs(V2 - V2.T)) <= 1e-12
    assert np.linalg.eigvalsh(V2).min() >= -1e-10


def test_sandwich_matches_explicit_inverse(rng):
    ds = random_dataset(rng, 20, 2, 2)
    gamma, sigma = wi_weights(ds)
    state = SmoothingState.from_omega(ds, np.eye(2) / 20)
    beta = rng.standard_normal(2) * 0.2
    omega = sandwich_covariance(ds, beta, state, gamma, sigma, 0.5)
    G = smoothed_jacobian(ds, beta, state, gamma, sigma, 0.5)
    V = score_covariance(ds, beta, state, gamma, sigma, 0.5)
    ref = np.linalg.inv(G) @ V @ np.linalg.inv(G).T
    assert np.max(np.abs(omega - ref)) < 1e-12


def test_confidence_intervals():
    from wqreg import FitResult

    res = FitResult(
        beta=np.array([0.0, 1.0]),
        omega=np.diag([1.0, 0.0]),
        std_errors=np.array([1.0, 0.0]),
        iterations=1,
        converged=True,
        tau=0.5,
        method="WI",
        rho_hat=np.empty(0),
    )
    ci = confidence_intervals(res, 0.95)
    assert ci[0, 0] == pytest.approx(-1.959964, abs=1e-5)
    assert ci[0, 1] == pytest.approx(1.959964, abs=1e-5)
    assert ci[1, 0] == ci[1, 1] == 1.0  # zero SE degenerates to a point
    for bad in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError):
            confidence_intervals(res, bad)


def test_fit_validates_inputs(rng):
    ds = random_dataset(rng, 10, 2, 2)
    with pytest.raises(ValueError):
        fit(ds, 0.5, "QQR")
    with pytest.raises(ValueError):
        fit(ds, 1.5, "WI")

    tiny = LongitudinalDataset([Subject(id=0, covariates=[[1.0, 2.0]], responses=[1.0])])
    with pytest.raises(DataError):
        fit(tiny, 0.5, "WI")

    collinear = LongitudinalDataset(
        [Subject(id=i, covariates=[[1.0, 2.0]], responses=[float(i)]) for i in range(6)]
    )
    with pytest.raises(DataError):
        fit(collinear, 0.5, "WI")


def test_wi_fit_matches_sample_median(rng):
    y = rng.standard_normal(50)
    ds = scalar_dataset(y)
    res = fit(ds, 0.5, "WI")
    iqr = np.subtract(*np.percentile(y, [75, 25]))
    assert abs(res.beta[0] - np.median(y)) <= 0.05 * iqr
    assert res.converged


def test_wi_fit_reaches_oracle_objective(rng):
    for _ in range(20):
        m = int(rng.integers(5, 16))
        ds = random_dataset(rng, m, 1, 2)
        tau = float(rng.choice([0.25, 0.5, 0.75]))
        res = fit(ds, tau, "WI")
        oracle = exact_wi_fit(ds, tau)
        assert np.max(np.abs(res.beta - oracle.beta)) <= 0.02
        excess = check_objective(ds.X, ds.y, res.beta, tau) - oracle.objective
        assert excess <= 1e-6 * (1.0 + abs(oracle.objective))


def test_fit_result_invariants():
    config = SimConfig(m=60, n=4, rho=0.5, error_case="normal", taus=(0.5,), replications=1, master_seed=10)
    ds = generate_dataset(config, 0)
    for method in ("WI", "PQR", "AQR"):
        res = fit(ds, 0.5, method)
        assert res.converged
        assert res.method == method
        sym = np.max(np.abs(res.omega - res.omega.T))
        assert sym <= 1e-10 * max(np.max(np.abs(res.omega)), 1e-300)
        eigs = np.linalg.eigvalsh(res.omega)
        assert eigs.min() >= -1e-10 * eigs.max()
        assert np.allclose(res.std_errors, np.sqrt(np.diag(res.omega)))
        if method == "WI":
            assert res.rho_hat.size == 0
        else:
            assert res.rho_hat.size == ds.max_n - 1


def test_newton_fixed_point_at_reported_root():
    config = SimConfig(m=80, n=4, rho=0.5, error_case="normal", taus=(0.5,), replications=1, master_seed=21)
    ds = generate_dataset(config, 0)
    for method in ("WI", "PQR", "AQR"):
        res = fit(ds, 0.5, method)
        assert res.converged
        ctx = res._context
        U = smoothed_estimating_function(
            ds, res.beta_root, ctx["state"], ctx["gamma"], ctx["sigma"], 0.5
        )
        assert np.max(np.abs(U)) <= 1e-6


def test_wi_equivariance(rng):
    ds = random_dataset(rng, 40, 2, 2)
    base = fit(ds, 0.5, "WI")

    delta = np.array([0.7, -1.2])
    shifted = LongitudinalDataset(
        [
            Subject(id=s.id, covariates=s.covariates, responses=s.responses + s.covariates @ delta)
            for s in ds.subjects
        ]
    )
    res_shift = fit(shifted, 0.5, "WI")
    assert np.max(np.abs(res_shift.beta - (base.beta + delta))) < 1e-6

    c = 3.5
    scaled = LongitudinalDataset(
        [
            Subject(id=s.id, covariates=s.covariates, responses=c * s.responses)
            for s in ds.subjects
        ]
    )
    res_scale = fit(scaled, 0.5, "WI")
    assert np.max(np.abs(res_scale.beta - c * base.beta)) < 1e-6 * c


def test_wi_pqr_coincide_at_zero_lags(rng, monkeypatch):
    ds = random_dataset(rng, 50, 3, 2)
    monkeypatch.setattr(
        solver_mod, "estimate_lag_correlations", lambda d, s: np.zeros(d.max_n - 1)
    )
    config = SolverConfig(gamma_mode="identity")
    fits = fit_many(ds, 0.5, ["WI", "PQR"], config)
    assert np.max(np.abs(fits["PQR"].beta - fits["WI"].beta_root)) <= 1e-6


def test_smoothing_equivalence_on_fixed_dataset(rng):
    ds = random_dataset(rng, 40, 3, 2)
    beta = np.array([0.3, -0.4])
    tau = 0.5
    gamma, sigma = wi_weights(ds, tau)
    hard = np.zeros(2)
    for n, _, obs, Xg, yg in ds.groups():
        psi = score_psi(yg - np.einsum("gnp,p->gn", Xg, beta), tau)
        q = sigma.solve_vectors(n, psi)
        hard += np.einsum("gnp,gn->p", Xg, q)
    gaps = []
    for c in (1e-2, 1e-4, 1e-6):
        state = SmoothingState.from_omega(ds, c * np.eye(2))
        U = smoothed_estimating_function(ds, beta, state, gamma, sigma, tau)
        gaps.append(np.linalg.norm(U - hard) / np.sqrt(ds.m))
    assert gaps[0] >= gaps[1] - 1e-12 >= gaps[2] - 1e-12
    assert gaps[-1] <= 1e-3


def test_non_convergence_is_flagged_not_raised(rng):
    ds = random_dataset(rng, 30, 2, 2)
    res = fit(ds, 0.5, "PQR", SolverConfig(max_outer_iterations=1))
    assert res.iterations == 1
    assert not res.converged


def test_wi_se_close_to_asymptotic_median_variance():
    ses = []
    for seed in (1, 2, 3):
        rng = np.random.default_rng(seed)
        ds = scalar_dataset(rng.standard_normal(200))
        res = fit(ds, 0.5, "WI")
        ses.append(res.std_errors[0])
    target = 1.0 / (2.0 * 0.3989423 * np.sqrt(200))
    assert abs(np.median(ses) - target) <= 0.3 * target


def test_fit_many_returns_requested_methods(rng):
    ds = random_dataset(rng, 30, 3, 2)
    fits = fit_many(ds, 0.5, ["pqr", "wi"])
    assert set(fits) == {"PQR", "WI"}
    single = fit(ds, 0.5, "aqr")
    assert single.method == "AQR"


def test_identity_gamma_mode(rng):
    ds = random_dataset(rng, 30, 3, 2)
    res = fit(ds, 0.5, "PQR", SolverConfig(gamma_mode="identity"))
    assert res.converged
    ctx = res._context
    assert ctx["gamma"].mode == "identity"


def test_singleton_occasions_fit(rng):
    # n = 1 panels have no lag information; weighted fits still run
    ds = random_dataset(rng, 40, 1, 2)
    fits = fit_many(ds, 0.5, ["WI", "PQR", "AQR"])
    for res in fits.values():
        assert res.converged
        assert res.rho_hat.size == 0
