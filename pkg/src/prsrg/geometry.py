"""Manifold geometry: points, tangent vectors, second-order retractions,
differentiated retractions and their adjoints, and tangent-ball sampling.

Three embedded manifolds are provided, selected by string id:

* ``sphere:<n>``    — unit sphere in R^n (intrinsic dimension n-1),
  metric-projection retraction ``(x+u)/||x+u||``;
* ``stiefel:<n>x<p>`` — orthonormal n-by-p frames, polar retraction,
  points and tangents stored as flattened row-major vectors;
* ``euclidean:<n>`` — flat space, retraction is vector addition.

All retractions are second order (zero initial acceleration), so pullback
gradients and Hessians agree with their Riemannian counterparts at u = 0.

The differentiated retraction ``T_u = DR_x(u)`` maps T_x M to T_{R_x(u)} M;
its adjoint ``T_u*`` pulls gradients back to the anchor tangent space. The
sphere and Euclidean manifolds use closed forms; the generic fallback builds
a central finite-difference Jacobian in deterministic orthonormal tangent
bases (QR completion of the constraint normal space).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, OutOfBall, ParameterError

# On-manifold / tangency tolerance for validation.
TOL = 1e-10

# Central FD step for the generic differentiated retraction.
DRETRACT_FD_STEP = 1e-6


@dataclass(frozen=True)
class ManifoldPoint:
    """A point on a manifold in ambient embedding coordinates."""

    coords: np.ndarray
    manifold_id: str


@dataclass(frozen=True)
class TangentVector:
    """An ambient-coordinate tangent vector attached to its base point."""

    base: ManifoldPoint
    coords: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))


def _freeze(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


class Manifold:
    """Base class: shared validation, sampling, and FD fallbacks.

    Subclasses set ``dim`` (intrinsic), ``ambient_dim``, and override the
    constraint/tangency/retraction primitives. All operations are pure
    functions of their inputs; random sources are caller-owned.
    """

    manifold_id: str
    dim: int
    ambient_dim: int
    ball_radius_D: float
    c0: float

    def __init__(self, ball_radius_D: float, c0: float):
        if ball_radius_D <= 0:
            raise ParameterError("ball_radius_D must be positive")
        if c0 < 0:
            raise ParameterError("c0 must be nonnegative")
        if c0 > 0 and ball_radius_D > 1.0 / (2.0 * c0) + TOL:
            raise ParameterError(
                f"ball_radius_D={ball_radius_D} exceeds 1/(2*c0)={1.0 / (2.0 * c0)}")
        self.ball_radius_D = float(ball_radius_D)
        self.c0 = float(c0)

    @property
    def D(self) -> float:
        return self.ball_radius_D

    # -- constraint primitives, overridden per manifold --------------------

    def constraint_violation(self, coords: np.ndarray) -> float:
        raise NotImplementedError

    def tangency_violation(self, x: ManifoldPoint, coords: np.ndarray) -> float:
        raise NotImplementedError

    def project_ambient(self, x: ManifoldPoint, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _retract_coords(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _normal_frame(self, x: ManifoldPoint) -> np.ndarray:
        """Orthonormal basis of the normal space, shape (ambient, codim)."""
        raise NotImplementedError

    # -- construction and validation ---------------------------------------

    def point(self, coords) -> ManifoldPoint:
        c = _freeze(coords)
        if c.shape[0] != self.ambient_dim:
            raise ContractViolation(
                f"expected ambient dimension {self.ambient_dim}, got {c.shape[0]}")
        err = self.constraint_violation(c)
        if not err <= TOL:
            raise ContractViolation(
                f"point violates {self.manifold_id} constraint by {err:.3e}")
        return ManifoldPoint(c, self.manifold_id)

    def tangent(self, x: ManifoldPoint, coords) -> TangentVector:
        self._require_point(x)
        c = _freeze(coords)
        if c.shape[0] != self.ambient_dim:
            raise ContractViolation(
                f"expected ambient dimension {self.ambient_dim}, got {c.shape[0]}")
        err = self.tangency_violation(x, c)
        scale = max(1.0, float(np.linalg.norm(c)))
        if not err <= TOL * scale:
            raise ContractViolation(
                f"vector violates tangency at {self.manifold_id} by {err:.3e}")
        return TangentVector(x, c)

    def zero_tangent(self, x: ManifoldPoint) -> TangentVector:
        return TangentVector(x, _freeze(np.zeros(self.ambient_dim)))

    def _require_point(self, x: ManifoldPoint) -> None:
        if x.manifold_id != self.manifold_id:
            raise ContractViolation(
                f"point belongs to {x.manifold_id}, not {self.manifold_id}")

    def _require_base(self, x: ManifoldPoint, u: TangentVector) -> None:
        self._require_point(x)
        if u.base.manifold_id != x.manifold_id or not np.array_equal(
                u.base.coords, x.coords):
            raise ContractViolation("tangent vector is not based at the given point")

    def _require_in_ball(self, u: TangentVector) -> None:
        n = u.norm
        if n > self.ball_radius_D * (1.0 + 1e-12):
            raise OutOfBall(
                f"||u|| = {n:.6e} exceeds ball radius D = {self.ball_radius_D}")

    # -- core operations -----------------------------------------------------

    def retract(self, x: ManifoldPoint, u: TangentVector) -> ManifoldPoint:
        """R_x(u): map a tangent vector onto the manifold."""
        self._require_base(x, u)
        return ManifoldPoint(_freeze(self._retract_coords(x.coords, u.coords)),
                             self.manifold_id)

    def tangent_project(self, x: ManifoldPoint, a) -> TangentVector:
        """Orthogonal projection of an ambient vector onto T_x M."""
        self._require_point(x)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        return TangentVector(x, _freeze(self.project_ambient(x, a)))

    def tangent_basis(self, x: ManifoldPoint) -> np.ndarray:
        """Deterministic orthonormal basis of T_x M, shape (ambient, dim).

        QR completion of the constraint normal space: the complement columns
        of the complete Q factor of the normal frame.
        """
        self._require_point(x)
        N = self._normal_frame(x)
        if N.shape[1] == 0:
            return np.eye(self.ambient_dim)
        Qfull, _ = np.linalg.qr(N, mode="complete")
        return Qfull[:, N.shape[1]:]

    def dretract_apply(self, x: ManifoldPoint, u: TangentVector,
                       v: TangentVector) -> TangentVector:
        """T_u[v]: differential of the retraction at u, applied to v.

        Generic implementation: central finite differences of the retraction,
        step ``1e-6 * max(1, ||u||)``, projected onto the target tangent space.
        """
        self._require_base(x, u)
        self._require_base(x, v)
        self._require_in_ball(u)
        y = self.retract(x, u)
        nv = v.norm
        if nv == 0.0:
            return self.zero_tangent(y)
        h = DRETRACT_FD_STEP * max(1.0, u.norm)
        step = (h / nv) * v.coords
        plus = self._retract_coords(x.coords, u.coords + step)
        minus = self._retract_coords(x.coords, u.coords - step)
        diff = (plus - minus) * (nv / (2.0 * h))
        return TangentVector(y, _freeze(self.project_ambient(y, diff)))

    def dretract_matrix(self, x: ManifoldPoint, u: TangentVector) -> np.ndarray:
        """T_u as a (dim x dim) matrix between the tangent bases at x and R_x(u)."""
        self._require_base(x, u)
        self._require_in_ball(u)
        y = self.retract(x, u)
        Bx = self.tangent_basis(x)
        By = self.tangent_basis(y)
        M = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            col = self.dretract_apply(x, u, TangentVector(x, Bx[:, j]))
            M[:, j] = By.T @ col.coords
        return M

    def dretract_adjoint_apply(self, x: ManifoldPoint, u: TangentVector,
                               w: TangentVector) -> TangentVector:
        """T_u*[w]: adjoint of T_u, pulling w in T_{R_x(u)} M back to T_x M.

        Satisfies <T_u v, w> = <v, T_u* w> for all tangent v at x. Generic
        implementation transposes the finite-difference Jacobian in the
        deterministic tangent bases.
        """
        self._require_base(x, u)
        self._require_in_ball(u)
        y = self.retract(x, u)
        if w.base.manifold_id != self.manifold_id or not np.array_equal(
                w.base.coords, y.coords):
            raise ContractViolation("w must be tangent at R_x(u)")
        M = self.dretract_matrix(x, u)
        Bx = self.tangent_basis(x)
        By = self.tangent_basis(y)
        return TangentVector(x, _freeze(Bx @ (M.T @ (By.T @ w.coords))))

    def dretract_sigma_min(self, x: ManifoldPoint, u: TangentVector) -> float:
        """Smallest singular value of T_u (basis independent)."""
        return float(np.linalg.svd(self.dretract_matrix(x, u), compute_uv=False)[-1])

    def sample_ball(self, x: ManifoldPoint, r: float,
                    rng: np.random.Generator) -> TangentVector:
        """Uniform draw from {u in T_x M : ||u|| <= r}.

        Gaussian direction in the orthonormal tangent basis, scaled by
        r * U^(1/dim). r = 0 consumes no randomness and returns the zero vector.
        """
        self._require_point(x)
        if r < 0:
            raise ParameterError("ball radius must be nonnegative")
        if r == 0.0:
            return self.zero_tangent(x)
        B = self.tangent_basis(x)
        g = rng.standard_normal(self.dim)
        g /= np.linalg.norm(g)
        radius = r * rng.random() ** (1.0 / self.dim)
        return TangentVector(x, _freeze(B @ (radius * g)))

    def rand_point(self, rng: np.random.Generator) -> ManifoldPoint:
        raise NotImplementedError


class Sphere(Manifold):
    """Unit sphere S^{n-1} embedded in R^n."""

    def __init__(self, n: int, ball_radius_D: float = 0.5, c0: float = 1.0):
        if n < 2:
            raise ParameterError("sphere needs ambient dimension >= 2")
        self.manifold_id = f"sphere:{n}"
        self.ambient_dim = int(n)
        self.dim = int(n) - 1
        super().__init__(ball_radius_D, c0)

    def constraint_violation(self, coords):
        return abs(float(np.linalg.norm(coords)) - 1.0)

    def tangency_violation(self, x, coords):
        return abs(float(x.coords @ coords))

    def project_ambient(self, x, a):
        return a - (x.coords @ a) * x.coords

    def _retract_coords(self, x, u):
        w = x + u
        return w / np.linalg.norm(w)

    def _normal_frame(self, x):
        return x.coords.reshape(-1, 1)

    # T_u[v] = (I - yy^T) v / ||x+u||  with y = R_x(u); adjoint swaps the
    # projector to the anchor side. Both are exact, no FD needed.
    def dretract_apply(self, x, u, v):
        self._require_base(x, u)
        self._require_base(x, v)
        self._require_in_ball(u)
        y = self.retract(x, u)
        s = float(np.linalg.norm(x.coords + u.coords))
        out = (v.coords - (y.coords @ v.coords) * y.coords) / s
        return TangentVector(y, _freeze(out))

    def dretract_adjoint_apply(self, x, u, w):
        self._require_base(x, u)
        self._require_in_ball(u)
        y = self.retract(x, u)
        if not np.array_equal(w.base.coords, y.coords):
            raise ContractViolation("w must be tangent at R_x(u)")
        s = float(np.linalg.norm(x.coords + u.coords))
        out = (w.coords - (x.coords @ w.coords) * x.coords) / s
        return TangentVector(x, _freeze(out))

    def rand_point(self, rng):
        g = rng.standard_normal(self.ambient_dim)
        return ManifoldPoint(_freeze(g / np.linalg.norm(g)), self.manifold_id)


class Stiefel(Manifold):
    """Orthonormal frames St(n, p) with the polar retraction.

    Coordinates are row-major flattened n-by-p matrices. The differentiated
    retraction uses the generic finite-difference fallback.
    """

    def __init__(self, n: int, p: int, ball_radius_D: float = 0.5, c0: float = 1.0):
        if not 1 <= p <= n:
            raise ParameterError("stiefel needs 1 <= p <= n")
        self.n = int(n)
        self.p = int(p)
        self.manifold_id = f"stiefel:{n}x{p}"
        self.ambient_dim = self.n * self.p
        self.dim = self.n * self.p - self.p * (self.p + 1) // 2
        super().__init__(ball_radius_D, c0)

    def _mat(self, coords):
        return coords.reshape(self.n, self.p)

    def constraint_violation(self, coords):
        X = self._mat(coords)
        return float(np.abs(X.T @ X - np.eye(self.p)).max())

    def tangency_violation(self, x, coords):
        X = self._mat(x.coords)
        U = self._mat(coords)
        return float(np.abs(X.T @ U + U.T @ X).max())

    def project_ambient(self, x, a):
        X = self._mat(x.coords)
        A = self._mat(a)
        S = X.T @ A
        return (A - X @ ((S + S.T) / 2.0)).reshape(-1)

    def _retract_coords(self, x, u):
        X = self._mat(x)
        U = self._mat(u)
        W = X + U
        # polar factor: W (I + U^T U)^(-1/2); U^T U symmetric PSD
        vals, vecs = np.linalg.eigh(np.eye(self.p) + U.T @ U)
        inv_sqrt = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
        return (W @ inv_sqrt).reshape(-1)

    def _normal_frame(self, x):
        X = self._mat(x.coords)
        q = self.p * (self.p + 1) // 2
        N = np.empty((self.ambient_dim, q))
        col = 0
        for i in range(self.p):
            for j in range(i, self.p):
                S = np.zeros((self.p, self.p))
                S[i, j] = 1.0
                S[j, i] = 1.0
                N[:, col] = (X @ S).reshape(-1)
                col += 1
        return N

    def rand_point(self, rng):
        G = rng.standard_normal((self.n, self.p))
        Q, R = np.linalg.qr(G)
        Q = Q * np.sign(np.diag(R))
        return ManifoldPoint(_freeze(Q.reshape(-1)), self.manifold_id)


class Euclidean(Manifold):
    """Flat R^n; retraction is addition and T_u is the identity."""

    def __init__(self, n: int, ball_radius_D: float = 1e9, c0: float = 0.0):
        if n < 1:
            raise ParameterError("euclidean needs dimension >= 1")
        self.manifold_id = f"euclidean:{n}"
        self.ambient_dim = int(n)
        self.dim = int(n)
        super().__init__(ball_radius_D, c0)

    def constraint_violation(self, coords):
        return 0.0

    def tangency_violation(self, x, coords):
        return 0.0

    def project_ambient(self, x, a):
        return np.array(a, dtype=np.float64)

    def _retract_coords(self, x, u):
        return x + u

    def _normal_frame(self, x):
        return np.empty((self.ambient_dim, 0))

    def dretract_apply(self, x, u, v):
        self._require_base(x, u)
        self._require_base(x, v)
        self._require_in_ball(u)
        y = self.retract(x, u)
        return TangentVector(y, v.coords)

    def dretract_adjoint_apply(self, x, u, w):
        self._require_base(x, u)
        self._require_in_ball(u)
        y = self.retract(x, u)
        if not np.array_equal(w.base.coords, y.coords):
            raise ContractViolation("w must be tangent at R_x(u)")
        return TangentVector(x, w.coords)

    def rand_point(self, rng):
        return ManifoldPoint(_freeze(rng.standard_normal(self.ambient_dim)),
                             self.manifold_id)


def make_manifold(manifold_id: str, ball_radius_D: float | None = None,
                  c0: float | None = None) -> Manifold:
    """Build a manifold from its string id, e.g. ``sphere:50``, ``stiefel:10x3``."""
    try:
        kind, _, size = manifold_id.partition(":")
        if kind == "sphere":
            args: tuple = (int(size),)
            cls = Sphere
        elif kind == "stiefel":
            ns, ps = size.split("x")
            args = (int(ns), int(ps))
            cls = Stiefel
        elif kind == "euclidean":
            args = (int(size),)
            cls = Euclidean
        else:
            raise ValueError(kind)
    except (ValueError, TypeError):
        raise ParameterError(
            f"bad manifold id {manifold_id!r}; expected sphere:<n>, "
            f"stiefel:<n>x<p>, or euclidean:<n>") from None
    kwargs = {}
    if ball_radius_D is not None:
        kwargs["ball_radius_D"] = ball_radius_D
    if c0 is not None:
        kwargs["c0"] = c0
    return cls(*args, **kwargs)
