"""Shared builders for the test suite."""

import numpy as np
import pytest

from wqreg import LongitudinalDataset, Subject


def scalar_dataset(values):
    """One observation per subject, intercept-only design."""
    return LongitudinalDataset(
        [Subject(id=i, covariates=[[1.0]], responses=[v]) for i, v in enumerate(values)]
    )


def random_dataset(rng, m, n, p, scale=1.0):
    """Independent-noise panel with an intercept column when p >= 2."""
    subjects = []
    for i in range(m):
        if p == 1:
            X = rng.standard_normal((n, 1))
        else:
            X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        y = X @ rng.standard_normal(p) + scale * rng.standard_normal(n)
        subjects.append(Subject(id=i, covariates=X, responses=y))
    return LongitudinalDataset(subjects)


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
