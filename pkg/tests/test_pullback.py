"""Pullback oracle: values, batch gradients, FD Hessian-vector products,
query accounting, and the empirical Lipschitz estimator."""

from __future__ import annotations

import numpy as np
import pytest

from prsrg import (
    EmptyBatch,
    OutOfBall,
    ParameterError,
    PullbackOracle,
    TangentVector,
    make_quadratic_saddle,
    make_rayleigh,
    make_streaming_rayleigh,
)
from prsrg.rng import StreamTree

from conftest import StiefelTrace, fd_pullback_grad, oracle_at


# ------------------------------------------------------------ values

def test_value_at_zero_is_objective_value(small_rayleigh):
    x = small_rayleigh.manifold.point(np.array([0.0, 1.0, 0.0]))
    oracle = oracle_at(small_rayleigh, x)
    # F(e2) = -e2^T diag(2,1,0) e2 = -1
    assert oracle.value(oracle.zero()) == pytest.approx(-1.0, abs=1e-12)
    assert oracle.value(oracle.zero()) == pytest.approx(small_rayleigh.value(x))


def test_value_pulls_back_through_retraction():
    # noiseless instance so F is exactly -y^T Abar y
    obj = make_rayleigh(d=3, n=4, spectrum=[2.0, 1.0, 0.0],
                        noise_scale=0.0, seed=None)
    man = obj.manifold
    x = man.point(np.array([1.0, 0.0, 0.0]))
    oracle = PullbackOracle(obj, x)
    u = oracle.tangent(np.array([0.0, 0.3, 0.0]))
    y = man.retract(x, u)
    expect = -float(y.coords @ (np.diag([2.0, 1.0, 0.0]) @ y.coords))
    assert oracle.value(u) == pytest.approx(expect, abs=1e-14)


def test_value_out_of_ball(small_rayleigh):
    x = small_rayleigh.manifold.point(np.array([1.0, 0.0, 0.0]))
    oracle = oracle_at(small_rayleigh, x)
    far = TangentVector(x, np.array([0.0, 0.9, 0.0]))
    with pytest.raises(OutOfBall):
        oracle.value(far)


# ------------------------------------------------------------ gradients

def test_full_gradient_at_zero_matches_riemannian(medium_rayleigh):
    rng = np.random.default_rng(3)
    x = medium_rayleigh.manifold.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    g = oracle.grad_minibatch(np.arange(medium_rayleigh.n), oracle.zero())
    expect = medium_rayleigh.full_riem_grad(x)
    assert np.allclose(g.coords, expect.coords, atol=1e-10)


def test_gradient_zero_at_eigenvector(small_rayleigh):
    x = small_rayleigh.eigvec(1)
    oracle = oracle_at(small_rayleigh, x)
    g = oracle.grad_minibatch(np.arange(small_rayleigh.n), oracle.zero())
    # eigenvectors are critical points of the Rayleigh quotient
    assert np.linalg.norm(g.coords) < 1e-12


def test_gradient_matches_finite_differences(medium_rayleigh):
    rng = np.random.default_rng(11)
    man = medium_rayleigh.manifold
    for _ in range(5):
        x = man.rand_point(rng)
        oracle = oracle_at(medium_rayleigh, x)
        u = man.sample_ball(x, 0.3, rng)
        g = oracle.exact_grad(u)
        fd = fd_pullback_grad(oracle, u)
        rel = np.linalg.norm(g.coords - fd) / max(np.linalg.norm(fd), 1e-30)
        assert rel <= 1e-5


def test_empty_batch_rejected(small_rayleigh):
    x = small_rayleigh.eigvec(0)
    oracle = oracle_at(small_rayleigh, x)
    with pytest.raises(EmptyBatch):
        oracle.grad_minibatch([], oracle.zero())


def test_gradient_out_of_ball(small_rayleigh):
    x = small_rayleigh.manifold.point(np.array([1.0, 0.0, 0.0]))
    oracle = oracle_at(small_rayleigh, x)
    far = TangentVector(x, np.array([0.0, 0.7, 0.0]))
    with pytest.raises(OutOfBall):
        oracle.grad_minibatch([0, 1], far)


# ---------------------------------------------------- large-batch draws

def test_exhaustive_batch_is_exact_and_samples_nothing(medium_rayleigh):
    rng = np.random.default_rng(0)
    x = medium_rayleigh.manifold.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    u = medium_rayleigh.manifold.sample_ball(x, 0.2, rng)
    state_before = rng.bit_generator.state
    g_big = oracle.grad_largebatch(medium_rayleigh.n, u, rng)
    # B = n short-circuits to the full sum without touching the generator
    assert rng.bit_generator.state == state_before
    g_all = oracle.grad_minibatch(np.arange(medium_rayleigh.n), u)
    assert np.array_equal(g_big.coords, g_all.coords)


def test_singleton_batch_is_single_component(small_rayleigh):
    x = small_rayleigh.eigvec(2)
    oracle = oracle_at(small_rayleigh, x)
    u = oracle.zero()
    g1 = oracle.grad_minibatch([7], u)
    expect = small_rayleigh.component_riem_grad(7, x)
    assert np.allclose(g1.coords, expect.coords, atol=1e-12)


def test_largebatch_exceeding_n_rejected(small_rayleigh):
    rng = np.random.default_rng(1)
    x = small_rayleigh.eigvec(0)
    oracle = oracle_at(small_rayleigh, x)
    with pytest.raises(ParameterError):
        oracle.grad_largebatch(small_rayleigh.n + 1, oracle.zero(), rng)


def test_streaming_largebatch_concentrates():
    obj = make_streaming_rayleigh(d=10, spectrum=np.linspace(2.0, 0.1, 10),
                                  seed=None)
    man = obj.manifold
    B = 10_000
    sigma = obj.sigma_hint
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = man.rand_point(rng)
        oracle = PullbackOracle(obj, x)
        g = oracle.grad_largebatch(B, oracle.zero(), rng)
        gap = np.linalg.norm(g.coords - obj.full_riem_grad(x).coords)
        assert gap <= 4.0 * sigma / np.sqrt(B)


def test_minibatch_unbiased(medium_rayleigh):
    rng = np.random.default_rng(21)
    x = medium_rayleigh.manifold.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    u = medium_rayleigh.manifold.sample_ball(x, 0.2, rng)
    target = oracle.exact_grad(u).coords
    acc = np.zeros_like(target)
    N = 4000
    for _ in range(N):
        batch = medium_rayleigh.sample_minibatch(1, rng)
        acc += oracle.grad_batch(batch, u).coords
    err = np.linalg.norm(acc / N - target)
    scale = max(np.linalg.norm(target), 1.0)
    # Monte-Carlo 1/sqrt(N) rate with a generous constant
    assert err <= 8.0 * scale / np.sqrt(N)


# ------------------------------------------------------------ HVP

def test_hvp_linear_gradient_is_exact():
    obj = make_quadratic_saddle(d=6, gamma=1.0, L_top=2.0, n=8,
                                seed=3, noise_scale=0.0)
    man = obj.manifold
    rng = np.random.default_rng(5)
    x = man.point(np.zeros(6))
    oracle = PullbackOracle(obj, x)
    u = man.tangent(x, rng.standard_normal(6) * 0.1)
    v = man.tangent(x, rng.standard_normal(6))
    got = oracle.hvp(u, v)
    assert np.allclose(got.coords, obj.H @ v.coords, atol=1e-8)


def test_hvp_rayleigh_eigen_direction(small_rayleigh):
    x = small_rayleigh.eigvec(1)
    oracle = oracle_at(small_rayleigh, x)
    v = oracle.tangent(np.array([1.0, 0.0, 0.0]))
    got = oracle.hvp(oracle.zero(), v)
    # Hessian eigenvalue -2(lambda_1 - lambda_2) = -2 along e1
    assert np.allclose(got.coords, -2.0 * v.coords, atol=1e-6)
    assert small_rayleigh.hess_eigval(0, 1) == pytest.approx(-2.0)


def test_hvp_symmetry(medium_rayleigh):
    rng = np.random.default_rng(17)
    man = medium_rayleigh.manifold
    x = man.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    u = man.sample_ball(x, 0.2, rng)
    for _ in range(5):
        v = man.tangent(x, man.project_ambient(x, rng.standard_normal(30)))
        w = man.tangent(x, man.project_ambient(x, rng.standard_normal(30)))
        lhs = oracle.hvp(u, v).coords @ w.coords
        rhs = v.coords @ oracle.hvp(u, w).coords
        assert abs(lhs - rhs) <= 1e-6 * v.norm * w.norm


def test_hvp_matches_analytic_hessian_at_zero(small_rayleigh):
    # second-order retraction: pullback Hessian at 0 equals the Riemannian
    # Hessian; at eigvec(2) the tangent eigenvalues are -2(l_i - l_2)
    x = small_rayleigh.eigvec(2)
    oracle = oracle_at(small_rayleigh, x)
    for i, expect in ((0, -4.0), (1, -2.0)):
        v = oracle.tangent(np.eye(3)[i])
        got = oracle.hvp(oracle.zero(), v)
        assert np.allclose(got.coords, expect * v.coords, atol=1e-4)


def test_hvp_zero_direction(small_rayleigh):
    x = small_rayleigh.eigvec(0)
    oracle = oracle_at(small_rayleigh, x)
    out = oracle.hvp(oracle.zero(), oracle.zero())
    assert np.all(out.coords == 0.0)


# ----------------------------------------------------- query accounting

def test_query_counter_tallies_batch_sizes(medium_rayleigh):
    rng = np.random.default_rng(2)
    x = medium_rayleigh.manifold.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    u = oracle.zero()
    assert oracle.queries == 0
    oracle.grad_minibatch([1, 5, 5], u)
    assert oracle.queries == 3
    oracle.grad_largebatch(40, u, rng)
    assert oracle.queries == 43
    oracle.value(u)
    assert oracle.queries == 43  # values are free


def test_diagnostic_calls_never_touch_optimizer_counter(medium_rayleigh):
    rng = np.random.default_rng(2)
    x = medium_rayleigh.manifold.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    u = oracle.zero()
    v = oracle.tangent(medium_rayleigh.manifold.tangent_basis(x)[:, 0])
    oracle.exact_grad(u)
    oracle.hvp(u, v)
    assert oracle.queries == 0
    assert oracle.diag_queries == 2 * medium_rayleigh.n


# ---------------------------------------------- stiefel pullback gradient

def test_stiefel_pullback_gradient_finite_differences():
    rng = np.random.default_rng(9)
    obj = StiefelTrace(6, 2, 4, rng)
    man = obj.manifold
    x = man.rand_point(rng)
    oracle = PullbackOracle(obj, x)
    u = man.sample_ball(x, 0.25, rng)
    g = oracle.exact_grad(u)
    fd = fd_pullback_grad(oracle, u)
    rel = np.linalg.norm(g.coords - fd) / np.linalg.norm(fd)
    assert rel <= 1e-5


# ------------------------------------------------------ lipschitz probe

def test_estimate_lipschitz_dominates_observed_quotients(medium_rayleigh):
    rng = np.random.default_rng(13)
    man = medium_rayleigh.manifold
    x = man.rand_point(rng)
    oracle = oracle_at(medium_rayleigh, x)
    est = oracle.estimate_lipschitz(np.random.default_rng(0), pairs=200)
    assert est.l_hat > 0 and est.rho_hat >= 0
    assert est.L_hat == pytest.approx(est.l_hat + est.rho_hat * man.D)
    # fresh probe pairs stay under the 1.2x-margin estimate
    D = man.D * 0.9
    for _ in range(30):
        u = man.sample_ball(x, D, rng)
        v = man.sample_ball(x, D, rng)
        du = np.linalg.norm(u.coords - v.coords)
        if du < 1e-9:
            continue
        gu = oracle.exact_grad(u).coords
        gv = oracle.exact_grad(v).coords
        assert np.linalg.norm(gu - gv) / du <= est.L_hat * 1.05


def test_lipschitz_estimate_is_deterministic(medium_rayleigh):
    x = medium_rayleigh.eigvec(0)
    oracle = oracle_at(medium_rayleigh, x)
    a = oracle.estimate_lipschitz(StreamTree(4).child(1).generator())
    b = oracle.estimate_lipschitz(StreamTree(4).child(1).generator())
    assert (a.l_hat, a.rho_hat, a.L_hat) == (b.l_hat, b.rho_hat, b.L_hat)
