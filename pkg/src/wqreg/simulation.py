"""Monte Carlo harness: AR(1)-correlated error cases, replication engine,
and the bias / SD / SE / EFF / coverage summaries."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import ndtr
from scipy.stats import chi2, norm
from scipy.stats import t as student_t

from .exceptions import DataError, SolverError
from .model import LongitudinalDataset, Subject, check_tau
from .solver import METHODS, SolverConfig, fit_many

__all__ = [
    "CASES",
    "SimConfig",
    "ReplicationRecord",
    "SummaryRow",
    "SimStudyReport",
    "ar1_covariance",
    "sample_errors",
    "generate_dataset",
    "run_study",
    "summarize",
]

CASES = ("normal", "chisq", "t")
_CASE_ALIASES = {
    "normal": "normal",
    "gaussian": "normal",
    "chisq": "chisq",
    "chisq2": "chisq",
    "t": "t",
    "t3": "t",
}
_Z95 = float(norm.ppf(0.975))


@dataclass
class SimConfig:
    """Design of one study: error case, dependence, size, and seeds."""

    m: int = 500
    n: int = 4
    beta_true: tuple = (-0.5, 0.5, 1.0)
    rho: float = 0.5
    error_case: str = "normal"
    taus: tuple = (0.25, 0.5, 0.95)
    methods: tuple = ("WI", "PQR", "AQR")
    replications: int = 1000
    master_seed: int = 20240901

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        self.beta_true = tuple(float(b) for b in self.beta_true)
        if len(self.beta_true) != 3:
            raise ValueError("beta_true must have length 3")
        case = _CASE_ALIASES.get(str(self.error_case).lower())
        if case is None:
            raise ValueError(f"unknown error case {self.error_case!r}")
        self.error_case = case
        self.taus = tuple(check_tau(t) for t in self.taus)
        if not self.taus:
            raise ValueError("taus must be non-empty")
        methods = tuple(str(m).upper() for m in self.methods)
        for m in methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if not methods:
            raise ValueError("methods must be non-empty")
        self.methods = methods
        self.master_seed = int(self.master_seed)


@dataclass
class ReplicationRecord:
    """One (tau, method) fit from one replication."""

    tau: float
    method: str
    replication: int
    beta: np.ndarray
    std_errors: np.ndarray
    converged: bool


@dataclass
class SummaryRow:
    """Aggregated metrics for one (tau, method, coefficient) cell.

    Metrics that are undefined for the cell (single replication, or no
    converged fits) are None.
    """

    tau: float
    method: str
    coefficient: str
    bias: Optional[float]
    sd: Optional[float]
    mean_se: Optional[float]
    eff: Optional[float]
    coverage: Optional[float]
    n_fail: int
    n_used: int


@dataclass
class SimStudyReport:
    """All summary rows of a study, in (tau, method, coefficient) order."""

    rows: list
    replications: int
    taus: tuple = ()
    methods: tuple = ()
    coefficients: tuple = ()

    def row(self, tau: float, method: str, coefficient) -> SummaryRow:
        if isinstance(coefficient, int):
            coefficient = self.coefficients[coefficient]
        for r in self.rows:
            if r.tau == tau and r.method == str(method).upper() and r.coefficient == coefficient:
                return r
        raise KeyError((tau, method, coefficient))


def ar1_covariance(rho: float, n: int) -> np.ndarray:
    """AR(1) correlation matrix with entries rho^|j-k|."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if n < 1:
        raise ValueError("n must be at least 1")
    return toeplitz(rho ** np.arange(n, dtype=float))


def sample_errors(case: str, rho: float, n: int, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one subject's error vector with marginal tau-quantile zero.

    normal: AR(1) Gaussian shifted by the normal tau-quantile.
    chisq:  Gaussian copula with chi-square(2) marginals.
    t:      AR(1) Gaussian over sqrt(W/3), one chi-square(3) W per subject.
    """
    case = _CASE_ALIASES.get(str(case).lower())
    if case is None:
        raise ValueError(f"unknown error case {case!r}")
    tau = check_tau(tau)
    L = np.linalg.cholesky(ar1_covariance(rho, n))
    z = L @ rng.standard_normal(n)
    if case == "normal":
        return z - norm.ppf(tau)
    if case == "chisq":
        u = np.clip(ndtr(z), 1e-16, 1.0 - 1e-16)
        return chi2.ppf(u, df=2) - chi2.ppf(tau, df=2)
    w = rng.chisquare(3)
    return z / np.sqrt(w / 3.0) - student_t.ppf(tau, df=3)


def generate_dataset(
    config: SimConfig, replication: int, tau: Optional[float] = None
) -> LongitudinalDataset:
    """Build the dataset of one replication.

    Errors are centered at the analysis quantile, so each tau gets its own
    response; tau defaults to the first configured level. Covariates and
    the underlying Gaussian draws are shared across taus because every
    subject stream is keyed only by (master_seed, replication, subject).
    """
    if tau is None:
        tau = config.taus[0]
    beta = np.asarray(config.beta_true)
    subjects = []
    for i in range(config.m):
        rng = np.random.default_rng(
            np.random.SeedSequence([config.master_seed, replication, i])
        )
        x1 = (rng.random(config.n) < 0.5).astype(float)
        x2 = rng.standard_normal(config.n)
        X = np.column_stack([np.ones(config.n), x1, x2])
        eps = sample_errors(config.error_case, config.rho, config.n, tau, rng)
        subjects.append(Subject(id=str(i), covariates=X, responses=X @ beta + eps))
    return LongitudinalDataset(subjects)


def _fit_method_order(config: SimConfig):
    # WI is always fitted: it initializes PQR/AQR and anchors EFF
    wanted = set(config.methods) | {"WI"}
    return [m for m in METHODS if m in wanted]


def _replicate(config: SimConfig, replication: int, solver_config: SolverConfig):
    methods = _fit_method_order(config)
    p = len(config.beta_true)
    records = []
    for tau in config.taus:
        dataset = generate_dataset(config, replication, tau)
        try:
            fits = fit_many(dataset, tau, methods, solver_config)
        except (SolverError, DataError, np.linalg.LinAlgError):
            fits = None
        for method in methods:
            if fits is None:
                records.append(
                    ReplicationRecord(
                        tau, method, replication, np.full(p, np.nan), np.full(p, np.nan), False
                    )
                )
            else:
                f = fits[method]
                records.append(
                    ReplicationRecord(
                        tau, method, replication, f.beta, f.std_errors, f.converged
                    )
                )
    return records


def _replicate_star(args):
    return _replicate(*args)


def run_study(
    config: SimConfig, workers: int = 1, solver_config: Optional[SolverConfig] = None
) -> SimStudyReport:
    """Run all replications and aggregate.

    Replications are independent with deterministic per-replication seeds;
    records are reduced in replication order, so the report is identical
    for any worker count.
    """
    solver_config = solver_config or SolverConfig()
    if workers > 1:
        jobs = [(config, r, solver_config) for r in range(config.replications)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_replicate_star, jobs, chunksize=4))
    else:
        batches = [_replicate(config, r, solver_config) for r in range(config.replications)]
    records = [rec for batch in batches for rec in batch]
    return summarize(records, np.asarray(config.beta_true))


def _cell_metrics(recs, beta_true, k):
    ok = [
        r
        for r in recs
        if r.converged
        and np.all(np.isfinite(r.beta))
        and np.all(np.isfinite(r.std_errors))
    ]
    n_fail = len(recs) - len(ok)
    if not ok:
        return None, n_fail, 0
    b = np.array([r.beta[k] for r in ok])
    se = np.array([r.std_errors[k] for r in ok])
    R = len(ok)
    bias = float(np.mean(b)) - float(beta_true[k])
    sd = float(np.std(b, ddof=1)) if R >= 2 else None
    # population variance (R-1)/R * sd^2, zero when R == 1
    var_pop = float(np.var(b)) if R >= 2 else 0.0
    mse = bias * bias + var_pop
    mean_se = float(np.mean(se))
    coverage = float(np.mean(np.abs(b - beta_true[k]) <= _Z95 * se))
    return {"bias": bias, "sd": sd, "mean_se": mean_se, "mse": mse, "coverage": coverage}, n_fail, R


def summarize(records, beta_true) -> SimStudyReport:
    """Aggregate replication records into per-cell metrics.

    bias = mean estimate minus truth; SD = sample standard deviation; EFF =
    MSE(WI)/MSE(method) with MSE = bias^2 + SD^2 (R-1)/R; coverage = share
    of 95% Wald intervals containing the truth. Non-converged replications
    are excluded and counted. WI's EFF is 1 by definition.
    """
    beta_true = np.asarray(beta_true, dtype=float)
    p = beta_true.size
    coefficients = tuple(f"beta{k}" for k in range(p))
    taus, methods = [], []
    for r in records:
        if r.tau not in taus:
            taus.append(r.tau)
        if r.method not in methods:
            methods.append(r.method)
    replications = len({r.replication for r in records})
    rows = []
    for tau in taus:
        wi_recs = [r for r in records if r.tau == tau and r.method == "WI"]
        wi_mse = {}
        for k in range(p):
            metrics, _, _ = _cell_metrics(wi_recs, beta_true, k)
            if metrics is not None:
                wi_mse[k] = metrics["mse"]
        for method in methods:
            recs = [r for r in records if r.tau == tau and r.method == method]
            for k in range(p):
                metrics, n_fail, n_used = _cell_metrics(recs, beta_true, k)
                if metrics is None:
                    rows.append(
                        SummaryRow(tau, method, coefficients[k], None, None, None, None, None, n_fail, 0)
                    )
                    continue
                if method == "WI":
                    eff = 1.0
                elif k in wi_mse and metrics["mse"] > 0.0:
                    eff = wi_mse[k] / metrics["mse"]
                else:
                    eff = None
                rows.append(
                    SummaryRow(
                        tau,
                        method,
                        coefficients[k],
                        metrics["bias"],
                        metrics["sd"],
                        metrics["mean_se"],
                        eff,
                        metrics["coverage"],
                        n_fail,
                        n_used,
                    )
                )
    return SimStudyReport(
        rows=rows,
        replications=replications,
        taus=tuple(taus),
        methods=tuple(methods),
        coefficients=coefficients,
    )
