"""Recursive-gradient descent run inside one tangent-space ball.

The loop descends a pullback objective F_hat = f(R_x(u)) over the ball
B(0, D) in T_x M using a recursively corrected stochastic gradient: every
``m`` steps an anchor gradient is taken on a batch of size ``B_size`` and in
between the estimator is updated as

    v_t = grad F_hat_I(u_t) - grad F_hat_I(u_{t-1}) + v_{t-1}

with I a minibatch of size ``b`` drawn i.i.d. with replacement. Three exits:

* Boundary: the step u_{t-1} - eta * v_{t-1} would leave the ball; the run
  stops exactly on the sphere ||u|| = D at the unique alpha in (0, 1].
* UniformBreak: in unperturbed runs with t < T_max the loop stops after the
  step with probability 1 / (m - k + 1), which makes the stopping index
  uniform on the anchor epoch.
* MaxIter: t reached T_max (this guard wins: the break draw is skipped
  whenever t >= T_max).

Randomness is consumed from position-keyed substreams, one per inner index,
so two runs that share a stream see identical minibatches and break draws at
every t regardless of where either run exits.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional
import warnings

import numpy as np

from .errors import NumericalFailure, OutOfBall, ParameterError
from .geometry import ManifoldPoint, TangentVector
from .pullback import PullbackOracle
from .rng import TAG_ANCHOR, TAG_BATCH, TAG_BREAK, StreamTree
from .trace import TraceRow, TraceSegment


class ExitReason(enum.Enum):
    BOUNDARY = "boundary"
    UNIFORM_BREAK = "uniform_break"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class TssrgParams:
    """Step size, epoch length, batch sizes, ball radius, iteration cap."""

    eta: float
    m: int
    b: int
    B_size: int
    D: float
    T_max: int

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ParameterError(f"eta must be positive, got {self.eta}")
        for name in ("m", "b", "B_size", "T_max"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 1):
                raise ParameterError(f"{name} must be an integer >= 1, got {v!r}")
        if not (self.D > 0 and math.isfinite(self.D)):
            raise ParameterError(f"D must be positive, got {self.D}")
        if self.b < self.m:
            warnings.warn(
                f"minibatch size b={self.b} below epoch length m={self.m}; "
                "the variance bound expects b >= m", stacklevel=2)

    def replaced(self, **kw) -> "TssrgParams":
        d = dict(eta=self.eta, m=self.m, b=self.b, B_size=self.B_size,
                 D=self.D, T_max=self.T_max)
        d.update(kw)
        return TssrgParams(**d)


@dataclass
class TssrgOutcome:
    result: ManifoldPoint
    u_final: TangentVector
    exit: ExitReason
    iterations: int
    segment: TraceSegment


def boundary_alpha(u_prev: np.ndarray, w: np.ndarray, D: float) -> float:
    """Smallest alpha in (0, 1] with ||u_prev - alpha*w|| = D.

    Requires ||u_prev|| < D and ||u_prev - w|| >= D. The quadratic
    a*alpha^2 - 2*uw*alpha + c = 0 (a = ||w||^2, c = ||u_prev||^2 - D^2 < 0)
    then has exactly one positive root; the branch is chosen so the two
    summed terms never cancel.
    """
    a = float(w @ w)
    if a <= 0.0:
        raise ParameterError("boundary crossing requires a nonzero step")
    uw = float(u_prev @ w)
    c = float(u_prev @ u_prev) - D * D
    disc = uw * uw - a * c
    if disc < 0.0:
        raise NumericalFailure("no real boundary crossing", iteration=-1)
    s = math.sqrt(disc)
    if uw >= 0.0:
        alpha = (uw + s) / a
    else:
        alpha = c / (uw - s)
    return min(max(alpha, 0.0), 1.0)


def _require_finite(arr: np.ndarray, what: str, t: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite {what} at inner step {t}",
                               iteration=t)


def tssrg_run(oracle: PullbackOracle, u0: TangentVector, params: TssrgParams,
              stream: StreamTree, *, outer_t: int = 0,
              anchor_grad: Optional[TangentVector] = None,
              record_gaps: bool = False, record_u: bool = False,
              query_offset: int = 0) -> TssrgOutcome:
    """Run one tangent-space descent from u0; perturbed iff ||u0|| > 0.

    ``anchor_grad``, when given, is used as the first anchor gradient v_0
    without drawing or charging a batch (the caller already paid for it at
    the outer gradient check). Trace rows carry ``query_offset`` plus the
    oracle's own counter so cumulative counts survive anchor changes.
    """
    man = oracle.manifold
    obj = oracle.objective
    man._require_base(oracle.anchor, u0)
    nrm = u0.norm
    if nrm > params.D * (1.0 + 1e-12):
        raise OutOfBall(f"u0 norm {nrm} exceeds ball radius {params.D}")
    perturbed = nrm > 0.0

    seg = TraceSegment()
    if record_u:
        seg.u_vecs = []

    def emit(inner_k, u, grad_norm, event, gap=None, du=0.0):
        seg.rows.append(TraceRow(
            outer_t=outer_t, inner_k=inner_k, epoch_type="",
            F_value=oracle.value(u), grad_norm_or_batch=grad_norm,
            estimator_gap=gap, u_norm=u.norm,
            queries_cum=query_offset + oracle.queries, event=event))
        seg.du_norms.append(du)
        if seg.u_vecs is not None:
            seg.u_vecs.append(u.coords.copy())

    def gap_at(u, v):
        if not record_gaps:
            return None
        return float(np.linalg.norm(v.coords - oracle.exact_grad(u).coords))

    u_prev = u0
    if anchor_grad is not None:
        man._require_base(oracle.anchor, anchor_grad)
        v = anchor_grad
    else:
        gen = stream.child(TAG_ANCHOR, 0).generator()
        batch = obj.sample_largebatch(params.B_size, gen)
        v = oracle.grad_batch(batch, u_prev)
    _require_finite(v.coords, "anchor gradient", 0)
    emit(0, u_prev, v.norm, "anchor", gap=gap_at(u_prev, v))

    t = 0
    while True:
        for k in range(1, params.m + 1):
            t += 1
            w = params.eta * v.coords
            u_next = TangentVector(oracle.anchor, u_prev.coords - w)
            _require_finite(u_next.coords, "iterate", t)
            if u_next.norm >= params.D:
                alpha = boundary_alpha(u_prev.coords, w, params.D)
                u_exit = TangentVector(oracle.anchor,
                                       u_prev.coords - alpha * w)
                emit(k, u_exit, v.norm, "boundary",
                     du=alpha * params.eta * v.norm)
                return TssrgOutcome(result=man.retract(oracle.anchor, u_exit),
                                    u_final=u_exit, exit=ExitReason.BOUNDARY,
                                    iterations=t, segment=seg)
            gen = stream.child(TAG_BATCH, t).generator()
            batch = obj.sample_minibatch(params.b, gen)
            g_new = oracle.grad_batch(batch, u_next)
            g_old = oracle.grad_batch(batch, u_prev)
            v = TangentVector(oracle.anchor,
                              g_new.coords - g_old.coords + v.coords)
            _require_finite(v.coords, "gradient estimate", t)
            event = "step"
            if t >= params.T_max:
                event = "max_iter"
            elif not perturbed:
                p = 1.0 / (params.m - k + 1)
                if stream.child(TAG_BREAK, t).generator().random() < p:
                    event = "uniform_break"
            emit(k, u_next, v.norm, event, gap=gap_at(u_next, v),
                 du=float(np.linalg.norm(w)))
            if event == "max_iter":
                return TssrgOutcome(result=man.retract(oracle.anchor, u_next),
                                    u_final=u_next, exit=ExitReason.MAX_ITER,
                                    iterations=t, segment=seg)
            if event == "uniform_break":
                return TssrgOutcome(result=man.retract(oracle.anchor, u_next),
                                    u_final=u_next,
                                    exit=ExitReason.UNIFORM_BREAK,
                                    iterations=t, segment=seg)
            u_prev = u_next
        gen = stream.child(TAG_ANCHOR, t // params.m).generator()
        batch = obj.sample_largebatch(params.B_size, gen)
        v = oracle.grad_batch(batch, u_prev)
        _require_finite(v.coords, "anchor gradient", t)
        emit(0, u_prev, v.norm, "anchor", gap=gap_at(u_prev, v))


def tssrg_run_coupled(oracle: PullbackOracle, u0_a: TangentVector,
                      u0_b: TangentVector, params: TssrgParams,
                      stream: StreamTree, *, record_u: bool = True,
                      record_gaps: bool = False) -> tuple[TssrgOutcome, TssrgOutcome]:
    """Run two sequences from u0_a and u0_b on one randomness tape.

    Both runs read the same position-keyed substreams, so minibatches and
    break draws agree at every inner index; only the starting vectors differ.
    Identical starting vectors therefore give bit-identical outcomes.
    """
    out_a = tssrg_run(oracle, u0_a, params, stream, record_u=record_u,
                      record_gaps=record_gaps)
    out_b = tssrg_run(oracle, u0_b, params, stream, record_u=record_u,
                      record_gaps=record_gaps)
    return out_a, out_b
