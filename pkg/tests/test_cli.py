import json
import os
import subprocess
import sys

import pytest

from stochks import cli
from stochks.harness import OUTPUT_ENV

TINY = """
[run]
n = 64
dt = 1e-3
T = 0.02
seed_root = 7

[sweep]
N_list = [64, 200]
M = 2

[field]
kind = "constant"
sigma = { scale = 0.5 }

[initial]
cov = 0.5

[numerics]
kernel_resolution = 128

[output]
stride = 10
"""


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _run(*args, env=None):
    full = dict(os.environ)
    full.pop(OUTPUT_ENV, None)
    full.update(env or {})
    return subprocess.run([sys.executable, "-m", "stochks.cli", *args], capture_output=True,
                          text=True, env=full, timeout=600)


def test_validate_kernel(capsys):
    assert cli.main(["validate-kernel", "--epsilon", "0.2", "--dim", "3", "--quiet"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["mollifier_mass_error"]) <= 1e-8


def test_validate_assumptions(config, capsys):
    assert cli.main(["--config", str(config), "validate-assumptions"]) == 0
    assert json.loads(capsys.readouterr().out)["pass"]


def test_config_rejection_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nn = 16\nmystery = 1\n[sweep]\nepsilon = 0.5\nN_list=[100]\n")
    assert cli.main(["couple", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "mystery" in err and "does not resolve" in err
    assert cli.main(["couple"]) == 2


def test_io_failure_exit_code(config, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert cli.main(["solve-spde", "--config", str(config), "--out", str(blocker / "x"),
                     "--quiet"]) == 4


def test_blowup_exit_code(config, tmp_path, monkeypatch):
    import stochks.spde as spde

    real = spde.solve_path

    def flagged(*a, **kw):
        res = real(*a, **kw)
        res.blowup, res.blowup_time = True, 0.01
        return res

    monkeypatch.setattr(spde, "solve_path", flagged)
    assert cli.main(["solve-spde", "--config", str(config), "--out", str(tmp_path),
                     "--quiet"]) == 3


def test_single_run_subcommands(config, tmp_path):
    out = tmp_path / "o"
    common = ["--config", str(config), "--out", str(out), "--quiet"]
    assert cli.main(["solve-spde", *common]) == 0
    assert cli.main(["solve-spde", "--mode", "regularized", "--N", "64", *common]) == 0
    assert cli.main(["simulate-particles", "--N", "50", *common]) == 0
    assert cli.main(["couple", "--N", "64", "--replica", "1", *common]) == 0
    header = (out / "couple.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["t", "coupling_error"] and header[-1] == "conditional_density_L1"
    assert (out / "norm_trace_exact.csv").exists() and (out / "norm_trace_regularized.csv").exists()
    assert (out / "particles_timeseries.csv").exists()


def test_env_override_and_report(config, tmp_path, capsys):
    env_dir = tmp_path / "env_out"
    os.environ[OUTPUT_ENV] = str(env_dir)
    try:
        assert cli.main(["converge", "--config", str(config), "--out", str(tmp_path / "ignored"),
                         "--quiet"]) == 0
    finally:
        del os.environ[OUTPUT_ENV]
    assert (env_dir / "report.json").exists() and not (tmp_path / "ignored").exists()
    capsys.readouterr()
    assert cli.main(["report", str(env_dir), "--quiet"]) == 0
    printed = json.loads(capsys.readouterr().out)
    stored = json.loads((env_dir / "report.json").read_text())["report"]
    assert printed["aggregates"] == stored["aggregates"]


def test_reports_identical_across_thread_counts(config, tmp_path):
    reports = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        proc = _run("converge", "--config", str(config), "--out", str(out), "--threads",
                    str(threads), "--quiet", env={"NUMBA_NUM_THREADS": str(threads)})
        assert proc.returncode == 0, proc.stderr
        body = json.loads((out / "report.json").read_text())
        reports.append(json.dumps(body["report"], sort_keys=True))
        assert (out / "summary.csv").exists()
    assert reports[0] == reports[1]
    assert (tmp_path / "t1" / "summary.csv").read_bytes() == \
        (tmp_path / "t4" / "summary.csv").read_bytes()
