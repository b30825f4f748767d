"""Config grammar, experiment runners, artifacts, sweeps, and the CLI."""

import json

import numpy as np
import pytest

from prsrg.cli import EXIT_BAD_INPUT, EXIT_NOT_SADDLE, EXIT_OK, main
from prsrg.errors import ContractViolation, ParameterError, SchemaError
from prsrg.harness import (CoupleSpec, ExperimentConfig, ProblemSpec,
                           SweepSpec, build_problem, dump_config,
                           format_spectrum, load_point, parse_config,
                           parse_spectrum, resolve_params, resolve_start,
                           run_experiment, run_sweep, worker_count)
from prsrg.rng import master_stream
from prsrg.solver import SolverConstants
from prsrg.trace import COLUMNS, TraceRow, read_trace, rows_to_csv, write_trace

SMALL_RUN = """\
[experiment]
seed = 7
budget = 6000

[problem]
manifold = sphere:3
kind = rayleigh
n = 30
spectrum = 2.0,1.0,0.0
noise_scale = 0.2

[solver]
epsilon = 0.05
delta = 0.5
"""

CLEAN_CERT = """\
[experiment]
seed = 3

[problem]
manifold = sphere:3
kind = rayleigh
n = 20
spectrum = 2.0,1.0,0.0
noise_scale = 0.0

[solver]
epsilon = 0.001
delta = 0.5
"""

QUAD_COUPLE = """\
[experiment]
seed = 3
budget = 10000

[problem]
kind = quadratic_saddle
n = 16
spectrum = linspace:1.0:1.0:6
gamma = 1.0
L_top = 2.0
noise_scale = 0.0
start = zero

[solver]
epsilon = 0.05
delta = 0.25

[couple]
trials = 0
rho_hat = 1.0
"""

SWEEP_RUN = """\
[experiment]
seed = 11
budget = 2500

[problem]
manifold = sphere:3
kind = rayleigh
n = 30
spectrum = 2.0,1.0,0.0
noise_scale = 0.2

[solver]
epsilon = 0.05
delta = 0.5

[sweep]
n = 8,12
seeds = 2
"""


# ---------------------------------------------------------------- spectrum

def test_parse_spectrum_grammar():
    assert parse_spectrum("1.5").tolist() == [1.5]
    np.testing.assert_array_equal(parse_spectrum(" 2.0, 1.0 ,0.5 "),
                                  [2.0, 1.0, 0.5])
    out = parse_spectrum("2.0,1.0,linspace:0.9:0.1:98")
    assert out.size == 100
    np.testing.assert_array_equal(out[:2], [2.0, 1.0])
    np.testing.assert_array_equal(out[2:], np.linspace(0.9, 0.1, 98))
    # a one-point linspace collapses to its left endpoint
    assert parse_spectrum("linspace:3.0:7.0:1").tolist() == [3.0]


def test_parse_spectrum_errors():
    with pytest.raises(ParameterError):
        parse_spectrum("")
    with pytest.raises(ParameterError):
        parse_spectrum("abc")
    with pytest.raises(ParameterError):
        parse_spectrum("linspace:1:2")
    with pytest.raises(ParameterError):
        parse_spectrum("linspace:a:b:3")
    with pytest.raises(ParameterError):
        parse_spectrum("linspace:1:2:0")


def test_format_spectrum_roundtrip():
    arr = np.array([2.0, 1.0, 1 / 3, 1e-17, 0.1])
    np.testing.assert_array_equal(parse_spectrum(format_spectrum(arr)), arr)


# ------------------------------------------------------------------ config

def test_config_defaults_and_roundtrip():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_config_roundtrip_every_section():
    cfg = ExperimentConfig(
        seed=11, budget=1234, out="runs/exp", algo="prgd", record_gaps=True,
        problem=ProblemSpec(manifold="sphere:5", kind="rayleigh", n=40,
                            spectrum="2.0,1.0,linspace:0.9:0.5:3",
                            noise_scale=0.3, rotation_seed=4, start="e2"),
        epsilon=0.01, delta=0.2, mode="finite_sum",
        overrides=(("eta", 0.05), ("m", 4.0), ("B", 16.0)),
        constants=SolverConstants(c_eta=0.2, c_T=10.0, c_r=0.5, c_m=2.0,
                                  c_B=8.0),
        couple=CoupleSpec(nu=0.2, trials=7, c2=2.0, c3=5.0, rho_hat=1.5),
        sweep=SweepSpec(n_values=(8, 16), seeds=3),
        baseline_eta=0.2, baseline_r=0.02, baseline_escape_steps=5,
        baseline_batch=4)
    assert parse_config(dump_config(cfg)) == cfg


def test_config_validation_errors():
    with pytest.raises(ParameterError):
        parse_config("[experiment]\nalgo = sgd\n")
    with pytest.raises(ParameterError):
        parse_config("[problem]\nkind = rosenbrock\n")
    with pytest.raises(ParameterError):
        parse_config("[experiment]\nbudget = -1\n")
    with pytest.raises(ParameterError):
        parse_config("[experiment]\nseed = abc\n")
    with pytest.raises(ParameterError):
        parse_config("no section header\n")
    with pytest.raises(ParameterError):
        ExperimentConfig(overrides=(("zeta", 1.0),))


def test_build_problem_validation():
    cfg = parse_config(SMALL_RUN)
    bad = ExperimentConfig(problem=ProblemSpec(manifold="sphere:50",
                                               kind="rayleigh", n=30,
                                               spectrum="2.0,1.0,0.0"))
    with pytest.raises(ParameterError, match="does not match"):
        build_problem(bad)
    with pytest.raises(ParameterError, match="needs data"):
        build_problem(ExperimentConfig(
            problem=ProblemSpec(kind="data_rayleigh", data=None)))
    obj = build_problem(cfg)
    assert obj.n == 30
    assert obj.manifold.manifold_id == "sphere:3"


# ------------------------------------------------------------ start points

def test_resolve_start_grammar(tmp_path):
    cfg = parse_config(SMALL_RUN)
    obj = build_problem(cfg)

    def at(name):
        c = ExperimentConfig(problem=ProblemSpec(
            manifold="sphere:3", kind="rayleigh", n=30,
            spectrum="2.0,1.0,0.0", noise_scale=0.2, start=name))
        return resolve_start(c, obj, master_stream(7))

    a = at("random")
    b = at("random")
    np.testing.assert_array_equal(a.coords, b.coords)  # same stream, same point
    np.testing.assert_array_equal(at("e2").coords, obj.eigvec(1).coords)
    np.testing.assert_array_equal(at("eig:0").coords, obj.eigvec(0).coords)
    np.testing.assert_array_equal(at("coords:1,0,0").coords, [1.0, 0.0, 0.0])

    pt = tmp_path / "pt.csv"
    pt.write_text("0.0,1.0,0.0\n")
    np.testing.assert_array_equal(at(f"file:{pt}").coords, [0.0, 1.0, 0.0])

    with pytest.raises(ParameterError, match="unknown start"):
        at("northpole")

    # zero only makes sense on a linear manifold; eN needs a spectrum problem
    qcfg = parse_config(QUAD_COUPLE)
    qobj = build_problem(qcfg)
    z = resolve_start(qcfg, qobj, master_stream(0))
    np.testing.assert_array_equal(z.coords, np.zeros(6))
    with pytest.raises(ParameterError, match="spectrum problem"):
        resolve_start(ExperimentConfig(problem=ProblemSpec(
            kind="quadratic_saddle", start="e1")), qobj, master_stream(0))


def test_load_point_formats(tmp_path):
    cfg = parse_config(SMALL_RUN)
    man = build_problem(cfg).manifold

    csvf = tmp_path / "p.csv"
    csvf.write_text("1.0,0.0,0.0\n")
    np.testing.assert_array_equal(load_point(man, csvf).coords, [1, 0, 0])

    txt = tmp_path / "p.txt"
    txt.write_text("0.0\n0.0\n1.0\n")
    np.testing.assert_array_equal(load_point(man, txt).coords, [0, 0, 1])

    with pytest.raises(SchemaError, match="not found"):
        load_point(man, tmp_path / "missing.csv")
    bad = tmp_path / "bad.txt"
    bad.write_text("hello world\n")
    with pytest.raises(SchemaError):
        load_point(man, bad)
    off = tmp_path / "off.csv"
    off.write_text("2.0,0.0,0.0\n")  # norm 2, not on the sphere
    with pytest.raises(ContractViolation):
        load_point(man, off)


# --------------------------------------------------------------- overrides

def test_solver_overrides_reach_params():
    text = SMALL_RUN + ("eta = 0.05\nm = 4\nb = 4\nB = 16\nT_max = 9\n"
                        "r = 0.001\nD = 0.4\n")
    cfg = parse_config(text)
    obj = build_problem(cfg)
    stream = master_stream(cfg.seed)
    x0 = resolve_start(cfg, obj, stream)
    params, l_hat, est = resolve_params(cfg, obj, x0, stream)
    t = params.tssrg
    assert (t.eta, t.m, t.b, t.B_size, t.T_max, t.D) == (0.05, 4, 4, 16, 9, 0.4)
    assert isinstance(t.m, int) and isinstance(t.B_size, int)
    assert params.r == 0.001
    assert params.budget == cfg.budget
    assert l_hat == est.l_hat > 0


# --------------------------------------------------------------- artifacts

def test_run_experiment_writes_artifacts(tmp_path):
    cfg = parse_config(SMALL_RUN)
    prefix = tmp_path / "exp"
    report, params = run_experiment(cfg, out=str(prefix))

    trace_path = prefix.with_suffix(".trace.csv")
    report_path = prefix.with_suffix(".report.json")
    assert trace_path.exists() and report_path.exists()
    assert trace_path.read_text() == rows_to_csv(report.trace)

    payload = json.loads(report_path.read_text())
    assert set(payload) == {"config", "params", "report"}
    assert parse_config(payload["config"]) == cfg
    t = params.tssrg
    assert payload["params"]["m"] == t.m
    assert payload["params"]["B"] == t.B_size
    assert payload["report"] == report.as_dict()
    assert payload["report"]["queries_used"] <= cfg.budget
    assert payload["report"]["seed"] == 7


def test_run_experiment_budget_zero_vacuous():
    cfg = parse_config(SMALL_RUN.replace("budget = 6000", "budget = 0"))
    report, _ = run_experiment(cfg)
    assert report.queries_used == 0
    assert report.certified is None
    assert report.trace == []
    assert report.exit_reason == "budget"


def test_rerun_is_byte_identical(tmp_path):
    cfg = parse_config(SMALL_RUN)
    run_experiment(cfg, out=str(tmp_path / "a"))
    run_experiment(cfg, out=str(tmp_path / "b"))
    assert ((tmp_path / "a.trace.csv").read_bytes()
            == (tmp_path / "b.trace.csv").read_bytes())
    assert ((tmp_path / "a.report.json").read_bytes()
            == (tmp_path / "b.report.json").read_bytes())

    import dataclasses
    other = dataclasses.replace(cfg, seed=8)
    run_experiment(other, out=str(tmp_path / "c"))
    assert ((tmp_path / "a.trace.csv").read_bytes()
            != (tmp_path / "c.trace.csv").read_bytes())


# ------------------------------------------------------------------- sweep

def test_sweep_grid_and_thread_invariance(tmp_path, monkeypatch):
    cfg = parse_config(SWEEP_RUN)
    d1 = tmp_path / "serial"
    monkeypatch.setenv("PRSRG_THREADS", "1")
    rows = run_sweep(cfg, d1)
    assert len(rows) == 4
    assert [(r["n"], r["seed"]) for r in rows] == [(8, 11), (8, 12),
                                                   (12, 11), (12, 12)]
    for n, s in [(8, 11), (8, 12), (12, 11), (12, 12)]:
        assert (d1 / f"n{n}_s{s}.trace.csv").exists()
        assert (d1 / f"n{n}_s{s}.report.json").exists()
    summary = (d1 / "summary.csv").read_text().splitlines()
    assert summary[0] == "n,seed,exit_reason,queries_used,best_F,certified"
    assert len(summary) == 5
    assert [line.split(",")[0] for line in summary[1:]] == ["8", "8", "12", "12"]

    d2 = tmp_path / "threaded"
    monkeypatch.setenv("PRSRG_THREADS", "4")
    run_sweep(cfg, d2)
    assert (d1 / "summary.csv").read_bytes() == (d2 / "summary.csv").read_bytes()
    for n, s in [(8, 11), (8, 12), (12, 11), (12, 12)]:
        name = f"n{n}_s{s}.trace.csv"
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_sweep_requires_n_values(tmp_path):
    with pytest.raises(ParameterError, match="sweep"):
        run_sweep(parse_config(SMALL_RUN), tmp_path / "x")


def test_worker_count(monkeypatch):
    monkeypatch.delenv("PRSRG_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("PRSRG_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("PRSRG_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("PRSRG_THREADS", "many")
    with pytest.raises(ParameterError):
        worker_count()


# --------------------------------------------------------------- trace CSV

def test_trace_csv_roundtrip(tmp_path):
    rows = [
        TraceRow(0, 0, "type1_descent", 1 / 3, 0.1, None, 0.0, 30, "anchor"),
        TraceRow(0, 1, "type1_descent", 0.25, 1e-17, 0.125, 0.3, 42, "step"),
        TraceRow(0, 2, "type1_descent", -0.5, 2.0, None, 0.5, 42, "boundary"),
    ]
    path = tmp_path / "t.trace.csv"
    write_trace(path, rows)
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(COLUMNS)
    assert read_trace(path) == rows

    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(SchemaError, match="header"):
        read_trace(bad)


# --------------------------------------------------------------------- CLI

def test_cli_run_and_print_config(tmp_path, capsys):
    cfgfile = tmp_path / "run.ini"
    cfgfile.write_text(SMALL_RUN)
    prefix = tmp_path / "out" / "exp"
    rc = main(["run", "--config", str(cfgfile), "--out", str(prefix),
               "--budget", "2000"])
    assert rc == EXIT_OK
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(line) == {"exit_reason", "queries_used", "best_F", "certified"}
    assert line["queries_used"] <= 2000
    assert prefix.with_suffix(".trace.csv").exists()

    rc = main(["print-config", "--config", str(cfgfile)])
    assert rc == EXIT_OK
    assert parse_config(capsys.readouterr().out) == parse_config(SMALL_RUN)


def test_cli_run_twice_byte_identical(tmp_path, capsys):
    cfgfile = tmp_path / "run.ini"
    cfgfile.write_text(SMALL_RUN)
    assert main(["run", "--config", str(cfgfile),
                 "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", "--config", str(cfgfile),
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    capsys.readouterr()
    assert ((tmp_path / "a.trace.csv").read_bytes()
            == (tmp_path / "b.trace.csv").read_bytes())


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == EXIT_BAD_INPUT

    badcfg = tmp_path / "bad.ini"
    badcfg.write_text("[experiment]\nalgo = sgd\n")
    assert main(["run", "--config", str(badcfg)]) == EXIT_BAD_INPUT

    certcfg = tmp_path / "cert.ini"
    certcfg.write_text(CLEAN_CERT)
    badpt = tmp_path / "pt.txt"
    badpt.write_text("not a number\n")
    assert main(["certify", "--config", str(certcfg),
                 "--point", str(badpt)]) == EXIT_BAD_INPUT

    # a minimizer anchor is rejected by the coupled experiment
    minim = tmp_path / "min.ini"
    minim.write_text(SMALL_RUN.replace("noise_scale = 0.2",
                                       "noise_scale = 0.2\nstart = e1")
                     + "\n[couple]\ntrials = 2\nrho_hat = 1.0\n")
    capsys.readouterr()
    assert main(["couple", "--config", str(minim)]) == EXIT_NOT_SADDLE
    assert "saddle" in capsys.readouterr().err


def test_cli_certify(tmp_path, capsys):
    cfgfile = tmp_path / "cert.ini"
    cfgfile.write_text(CLEAN_CERT)
    obj = build_problem(parse_config(CLEAN_CERT))

    v1 = tmp_path / "v1.csv"
    np.savetxt(v1, obj.eigvec(0).coords.reshape(1, -1), delimiter=",")
    rc = main(["certify", "--config", str(cfgfile), "--point", str(v1),
               "--out", str(tmp_path / "v1")])
    assert rc == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["passed"] is True
    assert json.loads((tmp_path / "v1.cert.json").read_text()) == payload

    e2 = tmp_path / "e2.csv"
    np.savetxt(e2, obj.eigvec(1).coords.reshape(1, -1), delimiter=",")
    assert main(["certify", "--config", str(cfgfile),
                 "--point", str(e2)]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["passed"] is False
    assert abs(payload["lambda_min_estimate"] + 2.0) < 0.01


def test_cli_couple_trials_zero(tmp_path, capsys):
    cfgfile = tmp_path / "couple.ini"
    cfgfile.write_text(QUAD_COUPLE)
    rc = main(["couple", "--config", str(cfgfile),
               "--out", str(tmp_path / "c")])
    assert rc == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["trials"] == 0
    assert payload["deviation_times"] == []
    assert abs(payload["lambda_min"] + 1.0) < 1e-4
    assert payload["params"]["mode"] == "finite_sum"
    assert (tmp_path / "c.couple.json").exists()


def test_cli_bench(tmp_path, capsys):
    out = tmp_path / "bench.json"
    rc = main(["bench", "--n", "64", "--d", "8", "--reps", "2",
               "--out", str(out)])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "active backend:" in text
    timings = json.loads(out.read_text())
    assert "paired_rank2_mean[n=64,d=8]" in timings
    assert "rows_rank1_mean[n=64,d=8]" in timings
    for rows in timings.values():
        assert all(ns > 0 for ns in rows.values())


def test_cli_sweep(tmp_path, capsys):
    cfgfile = tmp_path / "sweep.ini"
    cfgfile.write_text(SWEEP_RUN.replace("seeds = 2", "seeds = 1"))
    out_dir = tmp_path / "grid"
    rc = main(["sweep", "--config", str(cfgfile), "--out", str(out_dir)])
    assert rc == EXIT_OK
    line = json.loads(capsys.readouterr().out)
    assert line["cells"] == 2
    assert (out_dir / "summary.csv").exists()
