"""Shared fixtures and data helpers for the test suite."""

import json
from pathlib import Path

import numpy as np
import pytest

from circe_mg.model import validate_dataset

REPO_ROOT = Path(__file__).resolve().parent.parent
DEMO_DIR = REPO_ROOT / "demo"
DATA_DIR = Path(__file__).resolve().parent / "data"


def random_dataset(rng, sizes=(12, 9), p=2, noise=0.0, m=None, sigma2=None,
                   h_low=0.5, h_high=3.0):
    """Draw a dataset from the generative model.

    ``noise`` sets a constant noise variance for every observation; ``m`` and
    ``sigma2`` default to spread-out positive values.  Returns the validated
    dataset together with the true parameters used to draw it.
    """
    q = len(sizes)
    n = int(np.sum(sizes))
    if m is None:
        m = 1.0 + 0.5 * np.arange(p)
    m = np.asarray(m, dtype=float)
    if sigma2 is None:
        sigma2 = 0.05 + 0.04 * (np.arange(q * p).reshape(q, p) % 3)
    sigma2 = np.asarray(sigma2, dtype=float)
    h = rng.uniform(h_low, h_high, size=(n, p))
    groups = np.repeat(np.arange(1, q + 1), sizes)
    lam = m + rng.standard_normal((n, p)) * np.sqrt(sigma2[groups - 1])
    y = np.sum(h * lam, axis=1)
    r = None
    if noise > 0:
        r = np.full(n, float(noise))
        y = y + rng.standard_normal(n) * np.sqrt(r)
    d = validate_dataset(y, h, r, groups)
    return d, m, sigma2


def assert_monotone_trace(trace, tol=1e-10):
    trace = np.asarray(trace, dtype=float)
    if trace.size < 2:
        return
    deltas = np.diff(trace)
    worst = float(deltas.min())
    assert worst >= -tol, f"log-likelihood trace decreased by {-worst:.3e}"


@pytest.fixture(scope="session")
def demo_two_group_spec():
    with open(DEMO_DIR / "demo1.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def demo_three_factor_spec():
    with open(DEMO_DIR / "demo3d.json") as fh:
        return json.load(fh)
