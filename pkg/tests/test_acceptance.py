"""Acceptance criteria 1-13, each at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line (collected again in the
pytest terminal summary). Criterion 10's full sweep takes about an hour on one
core; it is evaluated from ``results/sweep_d2/report.json``, which
``stochks converge --config configs/sweep_d2.toml --out results/sweep_d2``
writes, or rerun in place when STOCHKS_ACCEPTANCE_FULL=1.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
from conftest import record_criterion

from stochks.coupling import run_coupled
from stochks.fields import make_field, sample_increments
from stochks.grid import Grid, minimum_image
from stochks.harness import (cached_kernel_table, emit_report, fit_power_law, parse_config,
                             run_convergence_sweep)
from stochks.kernel import (MollifierSpec, bessel_potential,
                            fourier_inversion_potential, kernel_report)
from stochks.particles import InitialDensity, ParticleEnsemble, pairwise_drift
from stochks.spde import regularization_gap, solve_path

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
FULL_REPORT = ROOT / "results" / "sweep_d2" / "report.json"
TEST_EPS = (0.4, 0.2, 0.1, 0.05)


def _gaussian(grid, var, shift=0.0):
    d = minimum_image(grid.coords - shift, grid.box)
    v = np.exp(-np.sum(d ** 2, axis=-1) / (2 * var))
    return v / grid.integrate(v)


def _rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# --- shared grid runs (criteria 4-7) ---------------------------------------------------

HEAT = dict(n=256, box=8.0, T=0.5, dt=2.5e-4, var0=0.5)


@pytest.fixture(scope="module")
def heat_run():
    g = Grid(HEAT["n"], 2, HEAT["box"])
    fld = make_field({"kind": "constant"}, dim=2)
    steps = round(HEAT["T"] / HEAT["dt"])
    rho0 = InitialDensity("gaussian", 2, cov=HEAT["var0"]).on_grid(g)
    res = solve_path(rho0, fld, sample_increments(1, 0, steps, HEAT["dt"], 2), HEAT["T"],
                     HEAT["dt"], 0.0)
    return g, res


@pytest.fixture(scope="module")
def translation_runs():
    g = Grid(HEAT["n"], 2, HEAT["box"])
    fld = make_field({"kind": "constant", "sigma": {"scale": 0.5}}, dim=2)
    steps = round(HEAT["T"] / HEAT["dt"])
    rho0 = InitialDensity("gaussian", 2, cov=HEAT["var0"]).on_grid(g)
    out = []
    for seed in range(101, 106):
        w = sample_increments(seed, 0, steps, HEAT["dt"], 2)
        out.append((w, solve_path(rho0, fld, w, HEAT["T"], HEAT["dt"], 0.0)))
    return g, out


@pytest.fixture(scope="module")
def gap_runs():
    cfg = parse_config(CONFIGS / "gap_d2.toml")
    fld = cfg.make_field()
    w = sample_increments(cfg.seed_root, 0, cfg.steps, cfg.dt, fld.noise_dim)
    rho0 = cfg.make_initial().on_grid(cfg.grid)
    stride = cfg.snapshot_stride
    exact = solve_path(rho0, fld, w, cfg.T, cfg.dt, cfg.chi, snapshot_stride=stride)
    regs = {}
    for eps in (0.4, 0.2, 0.1):
        table = cached_kernel_table(eps, 2, cfg.kernel_resolution)
        regs[eps] = solve_path(rho0, fld, w, cfg.T, cfg.dt, cfg.chi, "regularized", table,
                               snapshot_stride=stride)
    return exact, regs


# --- criteria ---------------------------------------------------------------------------


def test_c01_kernel_scaling(criterion):
    exps = {d: kernel_report(cached_kernel_table(0.2, d))["fitted_exponent"] for d in (2, 3)}
    ok = all(abs(exps[d] - (1 - d)) <= 0.15 for d in (2, 3))
    criterion(1, ok, "kernel scaling exponents " + ", ".join(
        f"d={d}: {e:.4f} (target {1 - d})" for d, e in exps.items()))
    assert ok


def _shipped_epsilons():
    eps = {(e, d) for e in TEST_EPS for d in (2, 3)}
    for path in sorted(CONFIGS.glob("*.toml")):
        cfg = parse_config(path)
        eps |= {(e, cfg.dim) for e in cfg.eps_by_N.values()}
    return sorted(eps)


def test_c02_mollifier_mass(criterion):
    errs = [abs(MollifierSpec(e, d).mass() - 1.0) for e, d in _shipped_epsilons()]
    ok = max(errs) <= 1e-8
    criterion(2, ok, f"max |mass - 1| = {max(errs):.2e} over {len(errs)} (eps, d) pairs")
    assert ok


def test_c03_closed_form_kernel(criterion):
    r = np.linspace(0.05, 5.0, 50)
    oracle3 = np.array([fourier_inversion_potential(v) for v in r])
    err3 = float(np.max(np.abs(bessel_potential(r, 3) / oracle3 - 1)))
    r2 = np.concatenate([r, np.geomspace(1e-4, 30.0, 50)])
    oracle2 = np.array([float(mpmath.besselk(0, v)) / (2 * math.pi) for v in r2])
    err2 = float(np.max(np.abs(bessel_potential(r2, 2) / oracle2 - 1)))
    ok = err3 <= 1e-6 and err2 <= 1e-8
    criterion(3, ok, f"d=3 vs Fourier inversion rel {err3:.2e} (<= 1e-6); "
                     f"d=2 vs K0 oracle rel {err2:.2e} (<= 1e-8)")
    assert ok


def test_c04_mass_conservation(criterion, heat_run, translation_runs, gap_runs):
    paths = [heat_run[1]] + [r for _, r in translation_runs[1]]
    paths += [gap_runs[0]] + list(gap_runs[1].values())
    total, step = 0.0, 0.0
    for p in paths:
        mass = np.array(p.trace.l1_mass)
        total = max(total, float(np.max(np.abs(mass - 1))))
        step = max(step, float(np.max(np.abs(np.diff(mass)))))
    ok = total <= 1e-6 and step <= 1e-12
    criterion(4, ok, f"{len(paths)} runs: max |mass - 1| = {total:.2e} (<= 1e-6), "
                     f"max per-step change {step:.2e} (<= 1e-12)")
    assert ok


def test_c05_heat_oracle(criterion, heat_run):
    g, res = heat_run
    err = _rel_l2(res.final.values, _gaussian(g, HEAT["var0"] + 2 * HEAT["T"]))
    ok = err <= 1e-3
    criterion(5, ok, f"heat oracle relative L2 {err:.3e} (<= 1e-3) at n=256")
    assert ok


def test_c06_common_noise_translation(criterion, translation_runs):
    g, runs = translation_runs
    errs = []
    for w, res in runs:
        shift = 0.5 * w.values()[-1]
        errs.append(_rel_l2(res.final.values, _gaussian(g, HEAT["var0"] + 2 * HEAT["T"], shift)))
    ok = max(errs) <= 1e-2
    criterion(6, ok, "translated heat oracle relative L2 per path "
                     + ", ".join(f"{e:.2e}" for e in errs) + " (<= 1e-2)")
    assert ok


def test_c07_regularization_gap(criterion, gap_runs):
    exact, regs = gap_runs
    eps = sorted(regs, reverse=True)
    gaps = [regularization_gap(regs[e].snapshots, exact.snapshots) for e in eps]
    slope = np.polyfit(np.log(eps), np.log(gaps), 1)[0]
    decreasing = all(a > b for a, b in zip(gaps, gaps[1:]))
    ok = decreasing and slope >= 0.8
    criterion(7, ok, "sup-time L4 gaps " + ", ".join(f"eps={e}: {v:.3e}" for e, v in
                                                     zip(eps, gaps))
              + f"; slope {slope:.3f} (>= 0.8)")
    assert ok


def test_c08_cell_list_equivalence(criterion):
    rng = np.random.default_rng(20240608)
    worst = 0.0
    box = 32.0  # three or more cells per axis, so the cell list is really exercised
    for k in range(100):
        d = 2 + k % 2
        table = cached_kernel_table(0.5, d)
        N = int(rng.integers(2, 257))
        ens = ParticleEnsemble(rng.uniform(-box, box, (N, d)), box=box)
        # clusters as well as uniform clouds
        if k % 3 == 0:
            ens.positions[:] = rng.normal(0, 2.0, (N, d))
        cells = pairwise_drift(ens, table, 1.0, "cells")
        brute = pairwise_drift(ens, table, 1.0, "brute")
        worst = max(worst, float(np.max(np.abs(cells - brute))))
    ok = worst <= 1e-12
    criterion(8, ok, f"cells vs brute force max difference {worst:.2e} over 100 configurations")
    assert ok


def test_c09_synchronous_null(criterion):
    cfg = parse_config(CONFIGS / "smoke_d2.toml", {"run.chi": 0.0})
    N = 512
    run = run_coupled(N=N, table=cached_kernel_table(cfg.epsilon_for(N), 2),
                      field=cfg.make_field(), initial=cfg.make_initial(), grid=cfg.grid,
                      T=cfg.T, dt=cfg.dt, chi=0.0, seed_root=cfg.seed_root, stride=10)
    worst = max(run.coupling)
    ok = worst <= 1e-12 and len(run.times) == cfg.steps // 10 + 1
    criterion(9, ok, f"chi=0 coupled run: max coupling error {worst:.1e} over "
                     f"{len(run.times)} checkpoints")
    assert ok


def _strictly_decreasing(aggs, getter):
    vals = [getter(aggs[k]) for k in sorted(aggs, key=int)]
    return all(a > b for a, b in zip(vals, vals[1:])), vals


def test_c10_mean_field_rate_smoke(criterion, tmp_path):
    cfg = parse_config(CONFIGS / "smoke_d2.toml")
    t0 = time.time()
    report = run_convergence_sweep(cfg)
    minutes = (time.time() - t0) / 60
    emit_report(report, tmp_path)
    dec, means = _strictly_decreasing(report.aggregates, lambda a: a["coupling_mean"])
    slope = report.fits["coupling"]["slope"]
    ok = dec and slope <= -0.3 and minutes < 20
    criterion("10s", ok, f"smoke sweep N=[128, 512], M=5: means {means[0]:.3e} > "
                         f"{means[1]:.3e}, slope {slope:.3f} (<= -0.3), {minutes:.1f} min")
    assert ok


def _full_report():
    if os.environ.get("STOCHKS_ACCEPTANCE_FULL") == "1":
        return run_convergence_sweep(parse_config(CONFIGS / "sweep_d2.toml")).to_dict()
    if not FULL_REPORT.exists():
        return None
    stored = json.loads(FULL_REPORT.read_text())["report"]
    # the stored file must come from the shipped config, not an edited one
    echo = json.loads(json.dumps(parse_config(CONFIGS / "sweep_d2.toml").echo()))
    stored_cfg = {k: v for k, v in stored["config"].items() if k != "caveat"}
    for section in ("run", "sweep", "field", "initial", "numerics"):
        assert stored_cfg[section] == echo[section], f"stored report differs in [{section}]"
    return stored


@pytest.fixture(scope="module")
def full_report():
    rep = _full_report()
    if rep is None:
        record_criterion(10, False, f"NOT RUN: {FULL_REPORT.relative_to(ROOT)} missing")
        pytest.skip("full sweep report missing; run `stochks converge --config "
                    "configs/sweep_d2.toml --out results/sweep_d2`")
    return rep


def test_c10_mean_field_rate_full(criterion, full_report):
    aggs = full_report["aggregates"]
    dec, means = _strictly_decreasing(aggs, lambda a: a["coupling_mean"])
    fit = full_report["fits"]["coupling"]
    used = [aggs[k]["used"] for k in sorted(aggs, key=int)]
    ok = dec and fit["slope"] <= -0.5 and math.isfinite(fit["stderr"])
    criterion(10, ok, "full sweep N=[256, 1024, 4096], M=20: means "
                      + " > ".join(f"{m:.3e}" for m in means)
                      + f"; slope {fit['slope']:.3f} +- {fit['stderr']:.3f} (<= -0.5); "
                        f"replicas used {used}; excluded {full_report['fits']['excluded_paths']}")
    assert ok


def test_c11_weak_convergence(criterion, full_report):
    aggs = full_report["aggregates"]
    names = sorted(next(iter(aggs.values()))["weak"])
    parts, ok = [], True
    for name in names:
        dec, vals = _strictly_decreasing(aggs, lambda a: a["weak"][name]["mean"])
        ok &= dec
        parts.append(f"{name}: " + " > ".join(f"{v:.2e}" for v in vals))
    criterion("11a", ok, "full sweep replica-mean weak errors " + "; ".join(parts))
    assert ok


def test_c11_weak_rate_iid_case(criterion):
    cfg = parse_config(CONFIGS / "weak_null_d2.toml")
    report = run_convergence_sweep(cfg)
    aggs = report.aggregates
    slopes = {}
    for name in sorted(next(iter(aggs.values()))["weak"]):
        Ns = sorted(int(k) for k in aggs)
        fit = fit_power_law(Ns, [aggs[str(N)]["weak"][name]["mean"] for N in Ns],
                            [aggs[str(N)]["weak"][name]["stderr"] for N in Ns])
        slopes[name] = (fit.slope, fit.stderr)
    ok = all(abs(s + 1) <= 0.15 for s, _ in slopes.values())
    criterion("11b", ok, "chi=0, sigma=0 weak-error slopes " + ", ".join(
        f"{k}: {s:.3f} +- {e:.3f}" for k, (s, e) in slopes.items()) + " (target -1 +- 0.15)")
    assert ok


def test_c12_conditional_density(criterion):
    cfg = parse_config(CONFIGS / "conditional_d2.toml")
    report = run_convergence_sweep(cfg)
    pooled = [report.pooled[str(N)] for N in sorted(cfg.N_list)]
    assert all("density_L1" in p for p in pooled), pooled
    dists = [p["density_L1"] for p in pooled]
    counts = [p["pooled_count"] for p in pooled]
    ok = (min(counts) >= 10_000 and max(dists) <= 0.15 and dists[1] < dists[0]
          and counts[1] == 4 * counts[0])
    criterion(12, ok, "pooled KDE vs RSPDE L1 " + ", ".join(
        f"{c} particles: {d:.4f}" for c, d in zip(counts, dists)) + " (<= 0.15, decreasing)")
    assert ok


def test_c13_thread_determinism(criterion, tmp_path):
    env = dict(os.environ)
    env.pop("STOCHKS_OUT", None)
    blobs = []
    for threads in (1, 4):
        out = tmp_path / f"threads{threads}"
        env["NUMBA_NUM_THREADS"] = str(threads)
        proc = subprocess.run([sys.executable, "-m", "stochks.cli", "converge", "--config",
                               str(CONFIGS / "determinism_d2.toml"), "--out", str(out),
                               "--threads", str(threads), "--quiet"],
                              capture_output=True, text=True, env=env, timeout=1800)
        assert proc.returncode == 0, proc.stderr
        text = (out / "report.json").read_text()
        body = json.loads(text)
        assert set(body) == {"metadata", "report"}
        # the report block serialized exactly as written, timestamp block removed
        blobs.append(text[text.index('"report"'):].encode()
                     + b"".join(p.read_bytes() for p in sorted(out.glob("*.csv"))))
    ok = blobs[0] == blobs[1]
    criterion(13, ok, f"report.json (timestamp block excluded) and CSVs byte-identical "
                      f"for 1 and 4 threads ({len(blobs[0])} bytes)")
    assert ok
