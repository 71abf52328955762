"""
Shared fixtures for pytest tests
"""
import itertools
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from evalgen import ar_covariance  # noqa: E402
from matnorm import ComponentParams  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the replicate reproduction studies")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: replicate studies, run with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_spd(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Well-conditioned random SPD matrix"""
    a = rng.standard_normal((dim, dim))
    return a @ a.T + dim * np.eye(dim)


def random_component(rng: np.random.Generator, r: int, p: int) -> ComponentParams:
    return ComponentParams(M=rng.standard_normal((r, p)), U=random_spd(rng, r), V=random_spd(rng, p))


def vec_normal_logpdf(Y: np.ndarray, theta: ComponentParams) -> float:
    """log N(vec(Y); vec(M), V kron U) by brute force"""
    cov = np.kron(theta.V, theta.U)
    d = (Y - theta.M).ravel(order="F")
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    quad = d @ np.linalg.solve(cov, d)
    return float(-0.5 * (d.size * np.log(2 * np.pi) + logdet + quad))


def permutation_accuracy(pred, truth) -> float:
    """Exhaustive best relabeling of pred onto truth"""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    pred_names = sorted(set(pred.tolist()))
    truth_names = sorted(set(truth.tolist()))
    names = truth_names + [f"unmatched{i}" for i in range(len(pred_names))]
    best = 0
    for target in itertools.permutations(names, len(pred_names)):
        mapping = dict(zip(pred_names, target))
        best = max(best, sum(mapping[a] == b for a, b in zip(pred.tolist(), truth.tolist())))
    return best / pred.size


@pytest.fixture
def rng():
    return np.random.default_rng(20260112)


@pytest.fixture
def ar_component():
    """3 x 4 component with AR(1) row and column covariances"""
    M = np.arange(12, dtype=float).reshape(3, 4) / 10.0
    return ComponentParams(M=M, U=ar_covariance(3, 0.5), V=ar_covariance(4, 0.3))


@pytest.fixture
def separated_stack():
    """Two tight clusters of 3 x 3 matrices around 0 and 100, 10 samples each"""
    gen = np.random.default_rng(7)
    low = gen.standard_normal((10, 3, 3))
    high = 100.0 + gen.standard_normal((10, 3, 3))
    stack = np.concatenate([low, high])
    labels = np.array([0] * 10 + [1] * 10)
    return stack, labels
