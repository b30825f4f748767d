"""Outer loop: alternate descent epochs and perturbed escape episodes.

Each outer iteration anchors a pullback oracle at the current point and
measures a large-batch gradient. A large gradient starts an unperturbed
tangent-space epoch of at most m steps that reuses the measured gradient as
its anchor; a small one makes the point a candidate, which is certified for
(epsilon, delta)-second-order stationarity and, failing that, attacked with
a uniformly drawn tangent perturbation followed by a T_max-step episode.
The run stops at the first certification pass or when the query budget
cannot fund another epoch.

Epochs are labeled with the descent taxonomy: type1_descent (left the
ball), type2_descent (at least half the inner estimator norms stayed above
epsilon/2), useful (quiet epoch whose endpoint passed the next gradient
check), wasted (quiet epoch that did not), escape (perturbed episode).
Quiet epochs are labeled only when the next check arrives; a trailing one
is resolved against the exact full gradient on the diagnostic side.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diagnostics import Certification, certify
from .errors import ContractViolation, ParameterError
from .geometry import Manifold, ManifoldPoint
from .pullback import PullbackOracle
from .rng import TAG_ANCHOR, TAG_OUTER, TAG_PERTURB, StreamTree, master_stream
from .trace import TraceRow
from .tssrg import ExitReason, TssrgParams, tssrg_run

EPOCH_KEYS = ("type1_descent", "type2_descent", "useful", "wasted", "escape")
_STEP_EVENTS = ("step", "uniform_break", "max_iter")

FINITE_SUM = "finite_sum"
ONLINE = "online"


@dataclass(frozen=True)
class SolverConstants:
    """Tunable multipliers for the derived run parameters.

    c_eta scales the step size eta = c_eta / L_hat, c_T the episode length
    T_max = ceil(c_T / delta), c_r the perturbation radius formula, and c_m,
    c_B the online batch sizes m = b = ceil(c_m sigma / eps) and
    B = ceil(c_B sigma^2 / eps^2).
    """

    c_eta: float = 0.1
    c_T: float = 20.0
    c_r: float = 1.0
    c_m: float = 1.0
    c_B: float = 16.0

    def __post_init__(self):
        for name in ("c_eta", "c_T", "c_r", "c_m", "c_B"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ParameterError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class SolverParams:
    tssrg: TssrgParams
    r: float
    epsilon: float
    delta: float
    budget: int
    mode: str

    def __post_init__(self):
        if self.epsilon <= 0 or self.delta <= 0:
            raise ParameterError("epsilon and delta must be positive")
        if self.r < 0:
            raise ParameterError(f"perturbation radius must be >= 0, got {self.r}")
        if self.budget < 0:
            raise ParameterError(f"budget must be >= 0, got {self.budget}")
        if self.mode not in (FINITE_SUM, ONLINE):
            raise ParameterError(f"mode must be finite_sum or online, got "
                                 f"{self.mode!r}")


@dataclass
class SolverReport:
    best_point: ManifoldPoint
    best_F: float
    certified: Optional[Certification]
    certified_point: Optional[ManifoldPoint]
    final_point: ManifoldPoint
    queries_used: int
    diag_queries: int
    epochs: dict[str, int]
    trace: list[TraceRow]
    exit_reason: str  # certified | budget
    outer_iterations: int
    seed: Optional[int] = None

    def as_dict(self) -> dict:
        return {
            "best_F": self.best_F,
            "best_point": self.best_point.coords.tolist(),
            "certified": self.certified.as_dict() if self.certified else None,
            "certified_point": (self.certified_point.coords.tolist()
                                if self.certified_point else None),
            "final_point": self.final_point.coords.tolist(),
            "queries_used": self.queries_used,
            "diag_queries": self.diag_queries,
            "epochs": dict(self.epochs),
            "exit_reason": self.exit_reason,
            "outer_iterations": self.outer_iterations,
            "seed": self.seed,
        }


def derive_params(mode: str, n_or_sigma, epsilon: float, delta: float,
                  L_hat: float, rho_hat: float,
                  constants: SolverConstants | None = None, *,
                  D: float = 0.5, budget: int = 10_000_000,
                  l_hat: float | None = None) -> SolverParams:
    """Turn problem scale and smoothness estimates into run parameters.

    finite_sum: m = b = ceil(sqrt(n)), B = n. online: m = b =
    ceil(c_m sigma / eps), B = ceil(c_B sigma^2 / eps^2). Both modes:
    eta = c_eta / L_hat, T_max = ceil(c_T / delta), r = c_r * min of
    delta^3/(rho_hat^2 eps) and sqrt(delta^3/(rho_hat^2 L_hat)), capped at
    the ball radius D (the cap binds when rho_hat is tiny, e.g. exactly
    quadratic objectives).
    """
    cons = constants if constants is not None else SolverConstants()
    if epsilon <= 0 or delta <= 0:
        raise ParameterError("epsilon and delta must be positive")
    if L_hat <= 0 or not math.isfinite(L_hat):
        raise ParameterError(f"L_hat must be positive, got {L_hat}")
    if rho_hat < 0 or not math.isfinite(rho_hat):
        raise ParameterError(f"rho_hat must be >= 0, got {rho_hat}")
    if D <= 0:
        raise ParameterError(f"ball radius D must be positive, got {D}")
    ell = l_hat if l_hat is not None else L_hat
    if delta > ell:
        warnings.warn(
            f"delta={delta} exceeds the gradient Lipschitz estimate {ell}; "
            "every small-gradient point already satisfies the Hessian "
            "clause", stacklevel=2)
    if mode == FINITE_SUM:
        n = n_or_sigma
        if n != int(n) or int(n) < 1:
            raise ParameterError(f"finite_sum needs a positive integer n, "
                                 f"got {n_or_sigma!r}")
        n = int(n)
        m = b = math.ceil(math.sqrt(n))
        B = n
    elif mode == ONLINE:
        sigma = float(n_or_sigma)
        if not (sigma > 0 and math.isfinite(sigma)):
            raise ParameterError(f"online needs sigma > 0, got {n_or_sigma!r}")
        m = b = math.ceil(cons.c_m * sigma / epsilon)
        B = math.ceil(cons.c_B * sigma * sigma / (epsilon * epsilon))
    else:
        raise ParameterError(f"mode must be finite_sum or online, got {mode!r}")
    eta = cons.c_eta / L_hat
    T_max = math.ceil(cons.c_T / delta)
    if rho_hat > 0:
        r = cons.c_r * min(delta ** 3 / (rho_hat ** 2 * epsilon),
                           math.sqrt(delta ** 3 / (rho_hat ** 2 * L_hat)))
        r = min(r, D)
    else:
        r = D
    tss = TssrgParams(eta=eta, m=m, b=b, B_size=B, D=D, T_max=T_max)
    return SolverParams(tssrg=tss, r=r, epsilon=epsilon, delta=delta,
                        budget=budget, mode=mode)


def small_grad_check(oracle: PullbackOracle, x, B_size: int, epsilon: float,
                     rng) -> tuple[bool, "TangentVector"]:
    """Large-batch gradient at the origin of T_x M and its epsilon test."""
    if epsilon <= 0:
        raise ParameterError("epsilon must be positive")
    if x is not None:
        oracle.manifold._require_point(x)
        if not np.array_equal(x.coords, oracle.anchor.coords):
            raise ContractViolation("check point differs from oracle anchor")
    zero = oracle.manifold.zero_tangent(oracle.anchor)
    g = oracle.grad_largebatch(B_size, zero, rng)
    return bool(g.norm <= epsilon), g


def _affordable_T(remaining: int, B: int, b: int, m: int,
                  first_anchor_paid: bool) -> int:
    """Largest inner-step count T whose worst-case query cost fits.

    cost(T) = [B unless the first anchor was already paid for]
              + B * floor((T-1)/m)   (re-anchors)
              + 2 b T                (two minibatch gradients per step).
    """
    a0 = 0 if first_anchor_paid else B

    def cost(T: int) -> int:
        return a0 + B * ((T - 1) // m) + 2 * b * T

    if remaining < cost(1):
        return 0
    lo, hi = 1, 2
    while cost(hi) <= remaining:
        lo = hi
        hi *= 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if cost(mid) <= remaining:
            lo = mid
        else:
            hi = mid
    return lo


def _half_rule_large(rows, epsilon: float) -> bool:
    """True when at least half the inner estimator norms exceed epsilon/2."""
    norms = [r.grad_norm_or_batch for r in rows if r.event in _STEP_EVENTS]
    if not norms:
        return False
    large = sum(1 for v in norms if v > epsilon / 2.0)
    return 2 * large >= len(norms)


def prsrg_run(objective, manifold: Manifold, x0: ManifoldPoint,
              params: SolverParams, rng, *, l_hat: float | None = None,
              certify_candidates: bool = True,
              record_gaps: bool = False) -> SolverReport:
    """Run the full solver from x0 under a strict query budget.

    ``rng`` is a 64-bit seed or a StreamTree; all randomness descends from
    it through position-keyed substreams. Certification cost (exact
    gradients, Hessian products) is tracked separately in diag_queries and
    never counts against the budget.
    """
    if manifold.manifold_id != objective.manifold.manifold_id:
        raise ContractViolation(
            f"manifold {manifold.manifold_id} does not match objective's "
            f"{objective.manifold.manifold_id}")
    manifold._require_point(x0)
    if params.tssrg.D > manifold.D * (1.0 + 1e-12):
        raise ContractViolation(
            f"run ball radius {params.tssrg.D} exceeds the manifold chart "
            f"radius {manifold.D}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    stream = master_stream(int(rng)) if seed is not None else rng
    if not isinstance(stream, StreamTree):
        raise ParameterError("rng must be a 64-bit seed or a StreamTree")

    B = params.tssrg.B_size
    b = params.tssrg.b
    m = params.tssrg.m
    rows_all: list[TraceRow] = []
    counts = dict.fromkeys(EPOCH_KEYS, 0)
    total_q = 0
    diag_q = 0
    x = x0
    best_x, best_F = x0, float(objective.value(x0))
    certified: Optional[Certification] = None
    certified_point: Optional[ManifoldPoint] = None
    exit_reason = "budget"
    pending: Optional[list[TraceRow]] = None
    outer_t = 0

    while total_q + B + 2 * b <= params.budget:
        oracle = PullbackOracle(objective, x)
        ostream = stream.child(TAG_OUTER, outer_t)
        ok_small, g = small_grad_check(
            oracle, None, B, params.epsilon,
            ostream.child(TAG_ANCHOR, 0).generator())
        gnorm = g.norm
        if pending is not None:
            label = "useful" if ok_small else "wasted"
            for row in pending:
                row.epoch_type = label
            counts[label] += 1
            pending = None
        if ok_small:
            check_row = TraceRow(
                outer_t=outer_t, inner_k=0, epoch_type="wasted",
                F_value=float(objective.value(x)), grad_norm_or_batch=gnorm,
                estimator_gap=None, u_norm=0.0,
                queries_cum=total_q + oracle.queries, event="grad_check")
            rows_all.append(check_row)
            if certify_candidates:
                cert = certify(oracle, None, params.epsilon, params.delta,
                               l_hat=l_hat)
                if cert.passed:
                    check_row.epoch_type = "useful"
                    certified = cert
                    certified_point = x
                    exit_reason = "certified"
                    total_q += oracle.queries
                    diag_q += oracle.diag_queries
                    break
            radius = min(params.r, params.tssrg.D)
            remaining = params.budget - total_q - oracle.queries
            T_run = min(params.tssrg.T_max,
                        _affordable_T(remaining, B, b, m, False))
            if T_run < 1:
                total_q += oracle.queries
                diag_q += oracle.diag_queries
                break
            check_row.epoch_type = "escape"
            u0 = manifold.sample_ball(
                x, radius, ostream.child(TAG_PERTURB).generator())
            out = tssrg_run(oracle, u0, params.tssrg.replaced(T_max=T_run),
                            ostream, outer_t=outer_t, record_gaps=record_gaps,
                            query_offset=total_q)
            for row in out.segment.rows:
                row.epoch_type = "escape"
            rows_all.extend(out.segment.rows)
            counts["escape"] += 1
        else:
            remaining = params.budget - total_q - oracle.queries
            T_run = min(m, _affordable_T(remaining, B, b, m, True))
            out = tssrg_run(oracle, manifold.zero_tangent(x),
                            params.tssrg.replaced(T_max=T_run), ostream,
                            outer_t=outer_t, anchor_grad=g,
                            record_gaps=record_gaps, query_offset=total_q)
            rows_all.extend(out.segment.rows)
            if out.exit == ExitReason.BOUNDARY:
                for row in out.segment.rows:
                    row.epoch_type = "type1_descent"
                counts["type1_descent"] += 1
            elif _half_rule_large(out.segment.rows, params.epsilon):
                for row in out.segment.rows:
                    row.epoch_type = "type2_descent"
                counts["type2_descent"] += 1
            else:
                pending = out.segment.rows
        x = out.result
        total_q += oracle.queries
        diag_q += oracle.diag_queries
        fx = float(objective.value(x))
        if fx < best_F:
            best_F, best_x = fx, x
        outer_t += 1

    if pending is not None:
        # trailing quiet epoch: settle it against the exact full gradient
        tail_oracle = PullbackOracle(objective, x)
        gtail = tail_oracle.exact_grad(manifold.zero_tangent(x))
        label = "useful" if gtail.norm <= params.epsilon else "wasted"
        for row in pending:
            row.epoch_type = label
        counts[label] += 1

    if total_q > params.budget:
        raise ContractViolation(
            f"query accounting bug: used {total_q} of {params.budget}")
    return SolverReport(best_point=best_x, best_F=best_F, certified=certified,
                        certified_point=certified_point, final_point=x,
                        queries_used=total_q, diag_queries=diag_q,
                        epochs=counts, trace=rows_all,
                        exit_reason=exit_reason, outer_iterations=outer_t,
                        seed=seed)


def auto_solve(objective, x0: ManifoldPoint, epsilon: float, delta: float,
               budget: int, rng, *, mode: str | None = None,
               constants: SolverConstants | None = None,
               lipschitz_pairs: int = 200,
               record_gaps: bool = False) -> tuple[SolverReport, SolverParams]:
    """Estimate smoothness at x0, derive parameters, and run the solver."""
    from .rng import TAG_DIAG

    seed = rng if isinstance(rng, (int, np.integer)) else None
    stream = master_stream(int(rng)) if seed is not None else rng
    man = objective.manifold
    probe = PullbackOracle(objective, x0)
    est = probe.estimate_lipschitz(stream.child(TAG_DIAG).generator(),
                                   pairs=lipschitz_pairs)
    if mode is None:
        mode = FINITE_SUM if objective.n is not None else ONLINE
    if mode == FINITE_SUM:
        scale = objective.n
    else:
        if objective.sigma_hint is None:
            raise ParameterError("online mode needs a sigma estimate")
        scale = objective.sigma_hint
    params = derive_params(mode, scale, epsilon, delta, est.L_hat,
                           est.rho_hat, constants, D=man.D, budget=budget,
                           l_hat=est.l_hat)
    report = prsrg_run(objective, man, x0, params, stream,
                       l_hat=est.l_hat, record_gaps=record_gaps)
    if seed is not None:
        report.seed = int(seed)
    return report, params
