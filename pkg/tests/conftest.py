"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np
import pytest

from blockgp import KernelModel
from blockgp.data import sample_prior


def make_instance(n, d, family="rbf", ard=False, seed=0, lengthscale=0.4,
                  outputscale=1.0, noise=0.5, mean=0.0):
    """A synthetic GP instance: inputs, a generating model, and one draw."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    if ard:
        ls = lengthscale * np.linspace(0.75, 1.5, d)
    else:
        ls = np.array([lengthscale])
    model = KernelModel(family, outputscale, ls, noise, mean=mean)
    y = sample_prior(model, X, rng)
    return X, y, model


def random_spd(n, seed=0, cond=100.0):
    """A dense well-conditioned SPD matrix for solver tests."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = np.geomspace(1.0, cond, n)
    return (Q * eigs) @ Q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
