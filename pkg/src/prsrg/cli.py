"""Command-line entry points.

Subcommands: run (optimize per config), certify (check a stored point),
couple (stuck-region experiment), sweep (n x seed grid), bench (kernel
backend timings). Exit codes: 0 success, 2 config/point validation error,
3 couple anchor is not a saddle, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import _kernels
from .errors import ContractViolation, ParameterError, SchemaError
from .harness import (ALGOS, dump_config, load_config, run_bench, run_certify,
                      run_couple, run_experiment, run_sweep)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_BAD_INPUT = 2
EXIT_NOT_SADDLE = 3


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="prsrg",
        description="Perturbed Riemannian stochastic recursive gradient "
                    "solver and its experiment harness")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="INI experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override [experiment] seed")
        p.add_argument("--out", default=None,
                       help="override output path prefix")
        p.add_argument("--budget", type=int, default=None,
                       help="override [experiment] budget")

    p_run = sub.add_parser("run", help="run the configured optimizer")
    common(p_run)
    p_run.add_argument("--algo", choices=ALGOS, default=None,
                       help="override [experiment] algo")

    p_cert = sub.add_parser("certify", help="certify a stored point")
    common(p_cert)
    p_cert.add_argument("--point", required=True,
                        help="point coordinates (.mat, .csv, or whitespace "
                             "text)")

    p_couple = sub.add_parser("couple",
                              help="coupled-perturbation saddle experiment")
    common(p_couple)

    p_sweep = sub.add_parser("sweep", help="run the [sweep] grid")
    common(p_sweep)

    p_bench = sub.add_parser("bench", help="time kernel backends")
    p_bench.add_argument("--out", default=None, help="write timings JSON")
    p_bench.add_argument("--n", type=int, default=1000)
    p_bench.add_argument("--d", type=int, default=100)
    p_bench.add_argument("--reps", type=int, default=20)

    p_cfg = sub.add_parser("print-config",
                           help="parse a config and echo its canonical form")
    p_cfg.add_argument("--config", required=True)
    return ap


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "budget", None) is not None:
        cfg = dataclasses.replace(cfg, budget=args.budget)
    if getattr(args, "algo", None) is not None:
        cfg = dataclasses.replace(cfg, algo=args.algo)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load(args)
            report, _ = run_experiment(cfg, out=args.out)
            line = {"exit_reason": report.exit_reason,
                    "queries_used": report.queries_used,
                    "best_F": report.best_F,
                    "certified": report.certified is not None
                                 and report.certified.passed}
            print(json.dumps(line, sort_keys=True))
            return EXIT_OK
        if args.command == "certify":
            cfg = _load(args)
            payload = run_certify(cfg, args.point, out=args.out)
            print(json.dumps(payload, sort_keys=True))
            return EXIT_OK
        if args.command == "couple":
            cfg = _load(args)
            try:
                payload = run_couple(cfg, out=args.out)
            except ContractViolation as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_NOT_SADDLE
            print(json.dumps(payload, sort_keys=True))
            return EXIT_OK
        if args.command == "sweep":
            cfg = _load(args)
            out_dir = args.out if args.out is not None else (cfg.out or "sweep")
            rows = run_sweep(cfg, out_dir)
            print(json.dumps({"cells": len(rows), "out": str(out_dir)},
                             sort_keys=True))
            return EXIT_OK
        if args.command == "bench":
            timings = run_bench(sizes=((args.n, args.d),), reps=args.reps)
            lines = [f"active backend: {_kernels.backend_name()}"]
            for kernel, rows in timings.items():
                for backend, ns in rows.items():
                    lines.append(f"{kernel} {backend}: {ns / 1e3:.1f} us")
            text = "\n".join(lines)
            print(text)
            if args.out:
                from pathlib import Path
                Path(args.out).write_text(
                    json.dumps(timings, indent=2, sort_keys=True) + "\n")
            return EXIT_OK
        if args.command == "print-config":
            cfg = load_config(args.config)
            print(dump_config(cfg), end="")
            return EXIT_OK
        raise AssertionError(f"unhandled command {args.command}")
    except (ParameterError, SchemaError, ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
