"""Shared fixtures and small numerical helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from prsrg import Batch, PullbackOracle, TangentVector, make_rayleigh
from prsrg.geometry import Stiefel


def fd_pullback_grad(oracle, u, h=1e-6):
    """Central-difference gradient of the pullback in tangent-basis coords,
    mapped back to ambient coordinates."""
    man = oracle.manifold
    basis = man.tangent_basis(oracle.anchor)
    g = np.zeros(man.dim)
    for j in range(man.dim):
        e = basis[:, j]
        up = TangentVector(oracle.anchor, u.coords + h * e)
        um = TangentVector(oracle.anchor, u.coords - h * e)
        g[j] = (oracle.value(up) - oracle.value(um)) / (2.0 * h)
    return basis @ g


@pytest.fixture
def small_rayleigh():
    """Axis-aligned 3-d instance with spectrum (2, 1, 0): exact eigenvectors."""
    return make_rayleigh(d=3, n=50, spectrum=[2.0, 1.0, 0.0],
                         noise_scale=0.2, seed=None)


@pytest.fixture
def medium_rayleigh():
    spec = np.concatenate(([2.0, 1.0], np.linspace(0.9, 0.1, 28)))
    return make_rayleigh(d=30, n=200, spectrum=spec, noise_scale=0.4, seed=5)


def oracle_at(objective, point) -> PullbackOracle:
    return PullbackOracle(objective, point)


def _sym(M):
    return 0.5 * (M + M.T)


class StiefelTrace:
    """f_i(X) = -tr(X^T A_i X) on St(n, p); test-local objective used to
    exercise the generic adjoint path (no closed-form differential)."""

    def __init__(self, n, p, n_comp, rng):
        base = rng.standard_normal((n, n))
        self.A = 0.5 * (base + base.T)
        self.perturb = [0.05 * _sym(rng.standard_normal((n, n)))
                        for _ in range(n_comp)]
        self.n = n_comp
        self.manifold = Stiefel(n, p)
        self.sigma_hint = None
        self._shape = (n, p)

    def _mat(self, i):
        return self.A + self.perturb[i]

    def value(self, x):
        X = x.coords.reshape(self._shape)
        return -float(np.trace(X.T @ (self.A @ X)))

    def _grad(self, M, x):
        X = x.coords.reshape(self._shape)
        W = -2.0 * (M @ X)
        sym = 0.5 * (X.T @ W + W.T @ X)
        return TangentVector(x, (W - X @ sym).ravel())

    def full_riem_grad(self, x):
        return self._grad(self.A, x)

    def component_riem_grad(self, i, x):
        return self._grad(self._mat(i), x)

    def batch_riem_grad(self, batch, x):
        idx = batch.idx if batch.idx is not None else np.arange(self.n)
        M = sum(self._mat(int(i)) for i in idx) / len(idx)
        return self._grad(M, x)

    def sample_minibatch(self, b, rng):
        return Batch(size=b, idx=rng.integers(0, self.n, size=b))

    def sample_largebatch(self, B, rng):
        if B >= self.n:
            return Batch(size=self.n, idx=None)
        return Batch(size=B, idx=rng.permutation(self.n)[:B])
