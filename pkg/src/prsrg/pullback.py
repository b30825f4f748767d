"""Anchored pullback-objective oracle.

For an anchor x, the pullback of the objective is ``F_hat(u) = F(R_x(u))``
on the tangent space at x. Its gradient is the adjoint differentiated
retraction applied to the Riemannian gradient at the retracted point:

    grad F_hat(u) = T_u* grad F(R_x(u))

so batch pullback gradients are batch means of Riemannian component
gradients pushed through ``T_u*``. The oracle tracks stochastic-gradient
query counts (the complexity currency): ``queries`` for optimizer calls,
``diag_queries`` for finite-difference Hessian-vector products, which only
diagnostics and certification are allowed to use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, ParameterError
from .geometry import Manifold, ManifoldPoint, TangentVector

# Central FD step for Hessian-vector products of the pullback.
HVP_FD_STEP = 1e-4


@dataclass(frozen=True)
class Batch:
    """A sampled component batch.

    ``idx`` holds component indices for finite-sum objectives (``None`` means
    the exhaustive batch, whose mean is evaluated in closed form and is
    deterministic); ``data`` holds freshly drawn samples in streaming mode.
    """

    size: int
    idx: np.ndarray | None = None
    data: np.ndarray | None = None


class FiniteSumObjective:
    """Interface for finite-sum / streaming objectives on a manifold.

    Subclasses provide ``n`` (component count, or None for streaming),
    ``manifold``, ``sigma_hint`` (uniform gradient-deviation bound, or None),
    and the evaluation methods below. The component-gradient mean over the
    exhaustive batch must equal the Riemannian gradient of ``value``.
    """

    n: int | None
    manifold: Manifold
    sigma_hint: float | None

    def value(self, x: ManifoldPoint) -> float:
        raise NotImplementedError

    def full_riem_grad(self, x: ManifoldPoint) -> TangentVector:
        """Exact full (finite-sum) or population (streaming) gradient."""
        raise NotImplementedError

    def batch_riem_grad(self, batch: Batch, x: ManifoldPoint) -> TangentVector:
        raise NotImplementedError

    def component_riem_grad(self, i: int, x: ManifoldPoint) -> TangentVector:
        raise NotImplementedError

    def sample_minibatch(self, b: int, rng: np.random.Generator) -> Batch:
        """b components i.i.d. with replacement (b = n short-circuits to
        the exhaustive batch in finite-sum mode)."""
        raise NotImplementedError

    def sample_largebatch(self, B: int, rng: np.random.Generator) -> Batch:
        """B components without replacement (finite-sum; B = n exhaustive)
        or B fresh draws (streaming)."""
        raise NotImplementedError


@dataclass(frozen=True)
class LipschitzEstimate:
    """Empirical smoothness surrogates: L_hat = l_hat + rho_hat * D."""

    l_hat: float
    rho_hat: float
    L_hat: float


class PullbackOracle:
    """Pullback values, batch gradients, and FD Hessian-vector products at one anchor.

    Immutable after construction except for the query tallies (guarded by the
    interpreter's serialized execution; batches are reduced in a fixed order
    so traces are bit-stable).
    """

    def __init__(self, objective: FiniteSumObjective, anchor: ManifoldPoint,
                 hvp_batch_size: int = 2048):
        self.objective = objective
        self.manifold = objective.manifold
        self.manifold._require_point(anchor)
        self.anchor = anchor
        self.queries = 0
        self.diag_queries = 0
        self._adjoint_cache: dict[bytes, object] = {}
        self._hvp_batch: Batch | None = None
        self._hvp_batch_size = int(hvp_batch_size)

    # -- helpers -------------------------------------------------------------

    def tangent(self, coords) -> TangentVector:
        return self.manifold.tangent(self.anchor, coords)

    def zero(self) -> TangentVector:
        return self.manifold.zero_tangent(self.anchor)

    def retract(self, u: TangentVector) -> ManifoldPoint:
        return self.manifold.retract(self.anchor, u)

    def _adjoint(self, u: TangentVector):
        """w_coords -> T_u*[w] coords; cached per u (the FD Jacobian path is
        the expensive part on manifolds without closed forms)."""
        key = u.coords.tobytes()
        fn = self._adjoint_cache.get(key)
        if fn is None:
            man, anchor = self.manifold, self.anchor
            y = man.retract(anchor, u)

            def fn(w_coords, _y=y, _u=u):
                w = TangentVector(_y, w_coords)
                return man.dretract_adjoint_apply(anchor, _u, w).coords

            if len(self._adjoint_cache) >= 8:
                self._adjoint_cache.pop(next(iter(self._adjoint_cache)))
            self._adjoint_cache[key] = fn
        return fn

    # -- oracle operations -----------------------------------------------------

    def value(self, u: TangentVector) -> float:
        """F_hat(u) = F(R_x(u)). Not a gradient query."""
        self.manifold._require_base(self.anchor, u)
        self.manifold._require_in_ball(u)
        return self.objective.value(self.retract(u))

    def grad_batch(self, batch: Batch, u: TangentVector) -> TangentVector:
        """Batch-mean pullback gradient; counts ``batch.size`` queries."""
        if batch.size < 1:
            raise EmptyBatch("gradient requested over an empty batch")
        self.manifold._require_base(self.anchor, u)
        self.manifold._require_in_ball(u)
        y = self.retract(u)
        g = self.objective.batch_riem_grad(batch, y)
        self.queries += batch.size
        return TangentVector(self.anchor, self._adjoint(u)(g.coords))

    def grad_minibatch(self, I, u: TangentVector) -> TangentVector:
        """Pullback gradient over an explicit index multiset (or Batch)."""
        if isinstance(I, Batch):
            return self.grad_batch(I, u)
        idx = np.asarray(I, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise EmptyBatch("gradient requested over an empty batch")
        return self.grad_batch(Batch(size=int(idx.size), idx=idx), u)

    def grad_largebatch(self, B_size: int, u: TangentVector,
                        rng: np.random.Generator) -> TangentVector:
        """Pullback gradient over B_size components drawn without replacement
        (exact full gradient when B_size = n in finite-sum mode)."""
        batch = self.objective.sample_largebatch(B_size, rng)
        return self.grad_batch(batch, u)

    def exact_grad(self, u: TangentVector) -> TangentVector:
        """Exact full/population pullback gradient. Diagnostic oracle: does
        not touch the query counters."""
        self.manifold._require_base(self.anchor, u)
        self.manifold._require_in_ball(u)
        g = self.objective.full_riem_grad(self.retract(u))
        return TangentVector(self.anchor, self._adjoint(u)(g.coords))

    def _full_batch(self) -> Batch:
        if self.objective.n is not None:
            return Batch(size=int(self.objective.n), idx=None)
        if self._hvp_batch is None:
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence(entropy=0xC0FFEE, spawn_key=(8,))))
            self._hvp_batch = self.objective.sample_largebatch(
                self._hvp_batch_size, rng)
        return self._hvp_batch

    def hvp(self, u: TangentVector, v: TangentVector) -> TangentVector:
        """FD Hessian-vector product of the pullback at u.

        Central differences of the full-batch pullback gradient (a large
        fixed batch in streaming mode), step ``1e-4 * max(1, ||v||)``.
        Diagnostics/certification only: tallied on ``diag_queries``, never on
        the optimizer's ``queries``.
        """
        self.manifold._require_base(self.anchor, u)
        self.manifold._require_base(self.anchor, v)
        self.manifold._require_in_ball(u)
        nv = v.norm
        if nv == 0.0:
            return self.zero()
        batch = self._full_batch()
        s = HVP_FD_STEP * max(1.0, nv)
        step = (s / nv) * v.coords
        up = TangentVector(self.anchor, u.coords + step)
        um = TangentVector(self.anchor, u.coords - step)
        gp = self.objective.batch_riem_grad(batch, self.retract(up))
        gm = self.objective.batch_riem_grad(batch, self.retract(um))
        self.diag_queries += 2 * batch.size
        out = (self._adjoint(up)(gp.coords) - self._adjoint(um)(gm.coords)) \
            * (nv / (2.0 * s))
        proj = self.manifold.project_ambient(self.anchor, out)
        return TangentVector(self.anchor, proj)

    def _exact_hvp(self, u: TangentVector, v: TangentVector) -> TangentVector:
        """FD HVP of the exact pullback gradient (Lipschitz probes)."""
        nv = v.norm
        if nv == 0.0:
            return self.zero()
        s = HVP_FD_STEP * max(1.0, nv)
        step = (s / nv) * v.coords
        gp = self.exact_grad(TangentVector(self.anchor, u.coords + step))
        gm = self.exact_grad(TangentVector(self.anchor, u.coords - step))
        out = (gp.coords - gm.coords) * (nv / (2.0 * s))
        return TangentVector(self.anchor, self.manifold.project_ambient(self.anchor, out))

    def estimate_lipschitz(self, rng: np.random.Generator,
                           pairs: int = 200) -> LipschitzEstimate:
        """Empirical gradient/Hessian Lipschitz surrogates inside the ball.

        Samples random ball pairs (u, v) and sets l_hat, rho_hat to 1.2x the
        largest observed difference quotient of the exact pullback gradient
        and of its FD Hessian action. L_hat = l_hat + rho_hat * D.
        """
        if pairs < 1:
            raise ParameterError("need at least one probe pair")
        man, x = self.manifold, self.anchor
        D = man.ball_radius_D
        # probes stay strictly inside so the FD Hessian offsets cannot poke
        # past the chart boundary
        Dp = D * 0.99 - HVP_FD_STEP * (1.0 + D)
        l_max = 0.0
        r_max = 0.0
        for _ in range(pairs):
            u = man.sample_ball(x, Dp, rng)
            v = man.sample_ball(x, Dp, rng)
            du = float(np.linalg.norm(u.coords - v.coords))
            if du < 1e-12:
                continue
            gu = self.exact_grad(u)
            gv = self.exact_grad(v)
            l_max = max(l_max, float(np.linalg.norm(gu.coords - gv.coords)) / du)
            w = man.sample_ball(x, 1.0, rng) if D >= 1.0 else man.sample_ball(x, D, rng)
            nw = w.norm
            if nw < 1e-12:
                continue
            w = TangentVector(x, w.coords / nw)
            hu = self._exact_hvp(u, w)
            hv = self._exact_hvp(v, w)
            r_max = max(r_max, float(np.linalg.norm(hu.coords - hv.coords)) / du)
        l_hat = 1.2 * l_max
        rho_hat = 1.2 * r_max
        return LipschitzEstimate(l_hat, rho_hat, l_hat + rho_hat * D)


def pullback_value(oracle: PullbackOracle, u: TangentVector) -> float:
    return oracle.value(u)


def pullback_grad_minibatch(oracle: PullbackOracle, I, u: TangentVector) -> TangentVector:
    return oracle.grad_minibatch(I, u)


def pullback_grad_largebatch(oracle: PullbackOracle, B_size: int, u: TangentVector,
                             rng: np.random.Generator) -> TangentVector:
    return oracle.grad_largebatch(B_size, u, rng)


def pullback_hvp(oracle: PullbackOracle, u: TangentVector, v: TangentVector) -> TangentVector:
    return oracle.hvp(u, v)
