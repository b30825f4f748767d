"""Experiment configuration, runners, sweeps, and the kernel benchmark.

Configs are INI files (configparser dialect) with sections [experiment],
[problem], [solver], [constants], [baseline], [couple], [sweep]. Every run
is a pure function of (config, seed): all randomness descends from the seed
through position-keyed substreams, so reruns and thread-count changes
reproduce traces byte for byte.

Spectrum grammar: a comma list of terms, each either a float literal or
``linspace:a:b:k`` (k evenly spaced values from a to b inclusive), e.g.
``2.0,1.0,linspace:0.9:0.1:98``.

Option names are case-sensitive: ``b`` (step minibatch) and ``B`` (anchor
batch) are different [solver] keys.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .baselines import BaselineConfig, baseline_run
from .diagnostics import certify, stuck_region_experiment
from .errors import ParameterError, SchemaError
from .geometry import Manifold, ManifoldPoint
from .problems import (load_matrix, make_data_rayleigh, make_quadratic_saddle,
                       make_rayleigh, make_streaming_rayleigh)
from .pullback import PullbackOracle
from .rng import TAG_DIAG, TAG_INIT, master_stream
from .solver import (FINITE_SUM, ONLINE, SolverConstants, SolverParams,
                     derive_params, prsrg_run)
from .trace import write_trace

ALGOS = ("prsrg", "prgd", "rsgd", "rsrg_unperturbed")
PROBLEM_KINDS = ("rayleigh", "quadratic_saddle", "streaming_rayleigh",
                 "data_rayleigh")

_SOLVER_OVERRIDE_KEYS = ("eta", "m", "b", "B", "T_max", "r", "D")


def parse_spectrum(text: str) -> np.ndarray:
    """Expand the compact spectrum grammar into a float array."""
    vals: list[float] = []
    for term in text.split(","):
        term = term.strip()
        if not term:
            continue
        if term.startswith("linspace:"):
            parts = term.split(":")
            if len(parts) != 4:
                raise ParameterError(
                    f"spectrum term {term!r}: want linspace:a:b:k")
            try:
                a, b, k = float(parts[1]), float(parts[2]), int(parts[3])
            except ValueError as exc:
                raise ParameterError(f"spectrum term {term!r}: {exc}") from exc
            if k < 1:
                raise ParameterError(f"spectrum term {term!r}: k must be >= 1")
            vals.extend(np.linspace(a, b, k).tolist())
        else:
            try:
                vals.append(float(term))
            except ValueError as exc:
                raise ParameterError(
                    f"spectrum term {term!r} is not a number") from exc
    if not vals:
        raise ParameterError("spectrum is empty")
    return np.asarray(vals, dtype=np.float64)


def format_spectrum(arr) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(arr))


@dataclass(frozen=True)
class ProblemSpec:
    manifold: str = "sphere:100"
    kind: str = "rayleigh"
    n: int | None = 1000
    spectrum: str = "2.0,1.0,linspace:0.9:0.1:98"
    noise_scale: float = 0.5
    rotation_seed: int | None = None
    gamma: float = 1.0
    L_top: float = 2.0
    sigma_radius: float = 2.0
    data: str | None = None
    start: str = "random"


@dataclass(frozen=True)
class CoupleSpec:
    nu: float = 0.1
    trials: int = 50
    c2: float = 1.0
    c3: float = 10.0
    rho_hat: float | None = None


@dataclass(frozen=True)
class SweepSpec:
    n_values: tuple[int, ...] = ()
    seeds: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    budget: int = 1_000_000
    out: str | None = None
    algo: str = "prsrg"
    record_gaps: bool = False
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    epsilon: float = 1e-3
    delta: float = 0.1
    mode: str | None = None
    overrides: tuple[tuple[str, float], ...] = ()
    constants: SolverConstants = field(default_factory=SolverConstants)
    baseline_eta: float = 0.1
    baseline_r: float = 0.01
    baseline_escape_steps: int = 20
    baseline_batch: int = 8
    couple: CoupleSpec = field(default_factory=CoupleSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ParameterError(f"[experiment] algo must be one of {ALGOS}, "
                                 f"got {self.algo!r}")
        if self.problem.kind not in PROBLEM_KINDS:
            raise ParameterError(
                f"[problem] kind must be one of {PROBLEM_KINDS}, got "
                f"{self.problem.kind!r}")
        if self.budget < 0:
            raise ParameterError("[experiment] budget must be >= 0")
        for key, _ in self.overrides:
            if key not in _SOLVER_OVERRIDE_KEYS:
                raise ParameterError(f"[solver] unknown override {key!r}")


def _get(parser, section, key, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if conv is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # solver keys b and B are distinct sizes
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        # configparser errors carry line numbers for syntax problems
        raise ParameterError(f"config parse error: {exc}") from exc

    prob = ProblemSpec(
        manifold=_get(parser, "problem", "manifold", str, "sphere:100"),
        kind=_get(parser, "problem", "kind", str, "rayleigh"),
        n=_get(parser, "problem", "n", int, 1000),
        spectrum=_get(parser, "problem", "spectrum", str,
                      "2.0,1.0,linspace:0.9:0.1:98"),
        noise_scale=_get(parser, "problem", "noise_scale", float, 0.5),
        rotation_seed=_get(parser, "problem", "rotation_seed", int, None),
        gamma=_get(parser, "problem", "gamma", float, 1.0),
        L_top=_get(parser, "problem", "L_top", float, 2.0),
        sigma_radius=_get(parser, "problem", "sigma_radius", float, 2.0),
        data=_get(parser, "problem", "data", str, None),
        start=_get(parser, "problem", "start", str, "random"),
    )
    overrides = []
    for key in _SOLVER_OVERRIDE_KEYS:
        v = _get(parser, "solver", key, float, None)
        if v is not None:
            overrides.append((key, float(v)))
    cons = SolverConstants(
        c_eta=_get(parser, "constants", "c_eta", float, 0.1),
        c_T=_get(parser, "constants", "c_T", float, 20.0),
        c_r=_get(parser, "constants", "c_r", float, 1.0),
        c_m=_get(parser, "constants", "c_m", float, 1.0),
        c_B=_get(parser, "constants", "c_B", float, 16.0),
    )
    couple = CoupleSpec(
        nu=_get(parser, "couple", "nu", float, 0.1),
        trials=_get(parser, "couple", "trials", int, 50),
        c2=_get(parser, "couple", "c2", float, 1.0),
        c3=_get(parser, "couple", "c3", float, 10.0),
        rho_hat=_get(parser, "couple", "rho_hat", float, None),
    )
    n_raw = _get(parser, "sweep", "n", str, "")
    n_values = tuple(int(s) for s in n_raw.split(",") if s.strip()) if n_raw else ()
    sweep = SweepSpec(n_values=n_values,
                      seeds=_get(parser, "sweep", "seeds", int, 1))
    return ExperimentConfig(
        seed=_get(parser, "experiment", "seed", int, 0),
        budget=_get(parser, "experiment", "budget", int, 1_000_000),
        out=_get(parser, "experiment", "out", str, None),
        algo=_get(parser, "experiment", "algo", str, "prsrg"),
        record_gaps=_get(parser, "experiment", "record_gaps", bool, False),
        problem=prob, epsilon=_get(parser, "solver", "epsilon", float, 1e-3),
        delta=_get(parser, "solver", "delta", float, 0.1),
        mode=_get(parser, "solver", "mode", str, None),
        overrides=tuple(overrides), constants=cons, couple=couple,
        sweep=sweep,
        baseline_eta=_get(parser, "baseline", "eta", float, 0.1),
        baseline_r=_get(parser, "baseline", "r", float, 0.01),
        baseline_escape_steps=_get(parser, "baseline", "escape_steps", int, 20),
        baseline_batch=_get(parser, "baseline", "batch", int, 8),
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize a config; parse_config(dump_config(c)) == c."""
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    p["experiment"] = {
        "seed": str(cfg.seed), "budget": str(cfg.budget),
        "algo": cfg.algo, "record_gaps": str(cfg.record_gaps).lower(),
    }
    if cfg.out is not None:
        p["experiment"]["out"] = cfg.out
    prob = cfg.problem
    p["problem"] = {
        "manifold": prob.manifold, "kind": prob.kind,
        "spectrum": prob.spectrum, "noise_scale": repr(prob.noise_scale),
        "gamma": repr(prob.gamma), "L_top": repr(prob.L_top),
        "sigma_radius": repr(prob.sigma_radius), "start": prob.start,
    }
    if prob.n is not None:
        p["problem"]["n"] = str(prob.n)
    if prob.rotation_seed is not None:
        p["problem"]["rotation_seed"] = str(prob.rotation_seed)
    if prob.data is not None:
        p["problem"]["data"] = prob.data
    p["solver"] = {"epsilon": repr(cfg.epsilon), "delta": repr(cfg.delta)}
    if cfg.mode is not None:
        p["solver"]["mode"] = cfg.mode
    for key, val in cfg.overrides:
        p["solver"][key] = repr(val)
    c = cfg.constants
    p["constants"] = {"c_eta": repr(c.c_eta), "c_T": repr(c.c_T),
                      "c_r": repr(c.c_r), "c_m": repr(c.c_m),
                      "c_B": repr(c.c_B)}
    p["baseline"] = {"eta": repr(cfg.baseline_eta), "r": repr(cfg.baseline_r),
                     "escape_steps": str(cfg.baseline_escape_steps),
                     "batch": str(cfg.baseline_batch)}
    p["couple"] = {"nu": repr(cfg.couple.nu), "trials": str(cfg.couple.trials),
                   "c2": repr(cfg.couple.c2), "c3": repr(cfg.couple.c3)}
    if cfg.couple.rho_hat is not None:
        p["couple"]["rho_hat"] = repr(cfg.couple.rho_hat)
    if cfg.sweep.n_values:
        p["sweep"] = {"n": ",".join(str(v) for v in cfg.sweep.n_values),
                      "seeds": str(cfg.sweep.seeds)}
    buf = io.StringIO()
    p.write(buf)
    return buf.getvalue()


def build_problem(cfg: ExperimentConfig):
    prob = cfg.problem
    spectrum = parse_spectrum(prob.spectrum)
    if prob.kind == "rayleigh":
        if prob.n is None:
            raise ParameterError("[problem] rayleigh needs n")
        obj = make_rayleigh(d=spectrum.size, n=prob.n, spectrum=spectrum,
                            noise_scale=prob.noise_scale,
                            seed=prob.rotation_seed)
        if prob.manifold != obj.manifold.manifold_id:
            raise ParameterError(
                f"[problem] manifold {prob.manifold} does not match the "
                f"rayleigh dimension {spectrum.size}")
        return obj
    if prob.kind == "quadratic_saddle":
        if prob.n is None:
            raise ParameterError("[problem] quadratic_saddle needs n")
        return make_quadratic_saddle(d=spectrum.size, gamma=prob.gamma,
                                     L_top=prob.L_top, n=prob.n,
                                     seed=prob.rotation_seed,
                                     noise_scale=prob.noise_scale,
                                     sigma_radius=prob.sigma_radius)
    if prob.kind == "streaming_rayleigh":
        return make_streaming_rayleigh(d=spectrum.size, spectrum=spectrum,
                                       seed=prob.rotation_seed)
    if prob.kind == "data_rayleigh":
        if prob.data is None:
            raise ParameterError("[problem] data_rayleigh needs data = <path>")
        return make_data_rayleigh(load_matrix(prob.data))
    raise ParameterError(f"[problem] unknown kind {prob.kind!r}")


def resolve_start(cfg: ExperimentConfig, objective, stream) -> ManifoldPoint:
    """Name -> point: eN / eig:N / zero / random / coords:... / file:..."""
    man = objective.manifold
    name = cfg.problem.start.strip()
    if name == "random":
        return man.rand_point(stream.child(TAG_INIT).generator())
    if name == "zero":
        return man.point(np.zeros(man.ambient_dim))
    if name.startswith("eig:") or (name.startswith("e") and name[1:].isdigit()):
        j = int(name.split(":")[1]) if ":" in name else int(name[1:]) - 1
        if not hasattr(objective, "eigvec"):
            raise ParameterError(f"[problem] start {name!r} needs a spectrum "
                                 "problem")
        return objective.eigvec(j)
    if name.startswith("coords:"):
        vals = np.array([float(s) for s in name[7:].split(",")])
        return man.point(vals)
    if name.startswith("file:"):
        return load_point(man, name[5:])
    raise ParameterError(f"[problem] unknown start {name!r}")


def load_point(man: Manifold, path) -> ManifoldPoint:
    """Read a point's ambient coordinates from .mat or text and validate."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"point file not found: {path}")
    if path.suffix == ".mat":
        arr = load_matrix(path)
    else:
        try:
            arr = np.loadtxt(path, delimiter=",", ndmin=1)
        except ValueError:
            try:
                arr = np.loadtxt(path, ndmin=1)
            except ValueError as exc:
                raise SchemaError(f"cannot parse point file {path}: {exc}") from exc
    return man.point(np.asarray(arr, dtype=np.float64).ravel())


def _apply_overrides(params: SolverParams, overrides) -> SolverParams:
    tss = params.tssrg
    tkw = {}
    pkw = {}
    for key, val in overrides:
        if key in ("eta", "D"):
            tkw[key] = float(val)
        elif key in ("m", "b"):
            tkw[key] = int(val)
        elif key == "B":
            tkw["B_size"] = int(val)
        elif key == "T_max":
            tkw["T_max"] = int(val)
        elif key == "r":
            pkw["r"] = float(val)
    if tkw:
        tss = tss.replaced(**tkw)
    return dataclasses.replace(params, tssrg=tss, **pkw)


def resolve_params(cfg: ExperimentConfig, objective, x0,
                   stream) -> tuple[SolverParams, float | None, object]:
    """Estimate smoothness, derive run parameters, apply config overrides.

    Returns (params, l_hat, lipschitz_estimate).
    """
    man = objective.manifold
    probe = PullbackOracle(objective, x0)
    est = probe.estimate_lipschitz(stream.child(TAG_DIAG).generator())
    mode = cfg.mode
    if mode is None:
        mode = FINITE_SUM if objective.n is not None else ONLINE
    if mode == FINITE_SUM:
        if objective.n is None:
            raise ParameterError("[solver] finite_sum mode needs a finite sum")
        scale = objective.n
    else:
        if objective.sigma_hint is None:
            raise ParameterError("[solver] online mode needs a sigma estimate")
        scale = objective.sigma_hint
    params = derive_params(mode, scale, cfg.epsilon, cfg.delta, est.L_hat,
                           est.rho_hat, cfg.constants, D=man.D,
                           budget=cfg.budget, l_hat=est.l_hat)
    params = _apply_overrides(params, cfg.overrides)
    return params, est.l_hat, est


def run_experiment(cfg: ExperimentConfig, *, out: str | None = None):
    """Execute the configured algorithm; write trace/report when out is set.

    Returns (report, params_or_None). Artifacts: <out>.trace.csv and
    <out>.report.json.
    """
    stream = master_stream(cfg.seed)
    objective = build_problem(cfg)
    man = objective.manifold
    x0 = resolve_start(cfg, objective, stream)
    params = None
    if cfg.algo == "prsrg":
        params, l_hat, _ = resolve_params(cfg, objective, x0, stream)
        report = prsrg_run(objective, man, x0, params, stream, l_hat=l_hat,
                           record_gaps=cfg.record_gaps)
        report.seed = cfg.seed
    elif cfg.algo == "rsrg_unperturbed":
        params, l_hat, _ = resolve_params(cfg, objective, x0, stream)
        params = dataclasses.replace(params, r=0.0)
        report = prsrg_run(objective, man, x0, params, stream, l_hat=l_hat,
                           record_gaps=cfg.record_gaps)
        report.seed = cfg.seed
    else:
        bcfg = BaselineConfig(kind=cfg.algo, eta=cfg.baseline_eta,
                              r=cfg.baseline_r,
                              escape_steps=cfg.baseline_escape_steps,
                              batch=cfg.baseline_batch)
        report = baseline_run(objective, man, x0, bcfg, cfg.epsilon,
                              cfg.delta, cfg.budget, stream)
        report.seed = cfg.seed
    target = out if out is not None else cfg.out
    if target is not None:
        write_artifacts(target, cfg, report, params)
    return report, params


def params_dict(params: SolverParams | None) -> dict | None:
    if params is None:
        return None
    t = params.tssrg
    return {"eta": t.eta, "m": t.m, "b": t.b, "B": t.B_size, "D": t.D,
            "T_max": t.T_max, "r": params.r, "epsilon": params.epsilon,
            "delta": params.delta, "budget": params.budget,
            "mode": params.mode}


def write_artifacts(prefix, cfg: ExperimentConfig, report, params) -> tuple[Path, Path]:
    prefix = Path(prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    trace_path = prefix.with_suffix(".trace.csv")
    report_path = prefix.with_suffix(".report.json")
    write_trace(trace_path, report.trace)
    payload = {"config": dump_config(cfg), "params": params_dict(params),
               "report": report.as_dict()}
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True)
                           + "\n")
    return trace_path, report_path


def worker_count() -> int:
    raw = os.environ.get("PRSRG_THREADS", "1")
    try:
        k = int(raw)
    except ValueError:
        raise ParameterError(f"PRSRG_THREADS must be an integer, got {raw!r}")
    return max(k, 1)


def run_sweep(cfg: ExperimentConfig, out_dir) -> list[dict]:
    """Run the n x seed grid; one trace/report pair per cell, plus summary.

    Cell (n, i) runs the base config with problem size n and seed
    base_seed + i, entirely independent of scheduling: results are written
    per cell and the summary is assembled in sorted order, so any
    PRSRG_THREADS value produces identical bytes.
    """
    if not cfg.sweep.n_values:
        raise ParameterError("[sweep] n is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(n, i) for n in cfg.sweep.n_values
             for i in range(cfg.sweep.seeds)]

    def run_cell(cell):
        n, i = cell
        ccfg = dataclasses.replace(
            cfg, seed=cfg.seed + i, out=None,
            problem=dataclasses.replace(cfg.problem, n=n),
            sweep=SweepSpec())
        prefix = out_dir / f"n{n}_s{cfg.seed + i}"
        report, params = run_experiment(ccfg, out=str(prefix))
        return {"n": n, "seed": cfg.seed + i,
                "exit_reason": report.exit_reason,
                "queries_used": report.queries_used,
                "best_F": report.best_F,
                "certified": report.certified is not None
                             and report.certified.passed}

    workers = min(worker_count(), len(cells))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    results.sort(key=lambda row: (row["n"], row["seed"]))
    lines = ["n,seed,exit_reason,queries_used,best_F,certified"]
    for row in results:
        lines.append(f"{row['n']},{row['seed']},{row['exit_reason']},"
                     f"{row['queries_used']},{row['best_F']!r},"
                     f"{str(row['certified']).lower()}")
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    return results


def run_couple(cfg: ExperimentConfig, *, out: str | None = None) -> dict:
    """Stuck-region experiment at the configured anchor point."""
    stream = master_stream(cfg.seed)
    objective = build_problem(cfg)
    x0 = resolve_start(cfg, objective, stream)
    params, l_hat, est = resolve_params(cfg, objective, x0, stream)
    rho = cfg.couple.rho_hat if cfg.couple.rho_hat is not None else est.rho_hat
    if rho <= 0:
        raise ParameterError("[couple] rho_hat must be positive; the "
                             "curvature estimate was zero, set it explicitly")
    oracle = PullbackOracle(objective, x0)
    stats = stuck_region_experiment(
        oracle, params, cfg.couple.nu, cfg.couple.trials,
        stream, rho_hat=rho, c2=cfg.couple.c2, c3=cfg.couple.c3,
        l_hat=l_hat)
    payload = stats.as_dict()
    payload["params"] = params_dict(params)
    target = out if out is not None else cfg.out
    if target is not None:
        path = Path(target).with_suffix(".couple.json")
        if path.parent != Path("."):
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def run_certify(cfg: ExperimentConfig, point_path, *,
                out: str | None = None) -> dict:
    """Certify a stored point against the configured problem."""
    objective = build_problem(cfg)
    x = load_point(objective.manifold, point_path)
    oracle = PullbackOracle(objective, x)
    stream = master_stream(cfg.seed)
    est = oracle.estimate_lipschitz(stream.child(TAG_DIAG).generator())
    cert = certify(oracle, x, cfg.epsilon, cfg.delta, l_hat=est.l_hat)
    payload = cert.as_dict()
    target = out if out is not None else cfg.out
    if target is not None:
        path = Path(target).with_suffix(".cert.json")
        if path.parent != Path("."):
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def run_bench(sizes=((1000, 100),), reps: int = 20) -> dict:
    """Time each reduction kernel under every available backend.

    Returns {kernel: {backend: best_ns_per_call}} over ``reps`` calls per
    (n, d) size, taking the fastest rep to suppress jitter.
    """
    rng = np.random.default_rng(0)
    out: dict[str, dict[str, float]] = {}
    for n, d in sizes:
        P = rng.standard_normal((n, d))
        Q = rng.standard_normal((n, d))
        A = rng.standard_normal((n, d))
        y = rng.standard_normal(d)
        idx = rng.integers(0, n, size=max(n // 8, 1)).astype(np.int64)
        cases = {
            "paired_rank2_mean": lambda f: f(P, Q, idx, y),
            "rows_rank1_mean": lambda f: f(A, y),
        }
        for kernel, call in cases.items():
            label = f"{kernel}[n={n},d={d}]"
            out[label] = {}
            for backend, fn in _kernels.backend_variants(kernel).items():
                call(fn)  # warm up (jit compile)
                best = math.inf
                for _ in range(reps):
                    t0 = time.perf_counter_ns()
                    call(fn)
                    best = min(best, time.perf_counter_ns() - t0)
                out[label][backend] = best
    return out
