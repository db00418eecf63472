"""Configuration, convergence sweeps, rate fitting and report files.

A run configuration is a TOML file with the sections below; every key not
given is filled with its default and echoed back in the parsed config.

    [run]       dim, box, n, dt, T, chi, seed_root
    [sweep]     N_list, M, delta, epsilon ("auto" or a number), shared_w
    [field]     kind, nu.*, sigma.*   (see fields.make_field)
    [initial]   kind, mean, cov, means, covs, weights
    [numerics]  method, interp_order, kernel_resolution, bandwidth, validation_samples
    [output]    dir, stride, snapshot_stride
"""

import copy
import datetime
import functools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__

OUTPUT_ENV = "STOCHKS_OUT"

DEFAULTS = {
    "run": {"dim": 2, "box": 8.0, "n": None, "dt": 2.5e-4, "T": 0.5, "chi": 1.0,
            "seed_root": 20240601},
    "sweep": {"N_list": [256, 1024, 4096], "M": 20, "delta": 0.4, "epsilon": "auto",
              "shared_w": False},
    "field": {"kind": "constant"},
    "initial": {"kind": "gaussian", "mean": None, "cov": 1.0, "means": None, "covs": None,
                "weights": None},
    "numerics": {"method": "auto", "interp_order": 1, "kernel_resolution": 512,
                 "bandwidth": "silverman", "validation_samples": 1024},
    "output": {"dir": "out", "stride": 100, "snapshot_stride": 0},
}
DEFAULT_GRID = {2: 256, 3: 64}


class ConfigError(ValueError):
    """Config rejection; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))


class FitError(ValueError):
    pass


@functools.lru_cache(maxsize=32)
def cached_kernel_table(epsilon, dim, resolution=512):
    from .kernel import build_kernel_table
    return build_kernel_table(epsilon, dim, resolution)


def auto_epsilon(N, delta, dim):
    """eps with eps^{-d} = delta ln N."""
    return (delta * math.log(N)) ** (-1.0 / dim)


# --- configuration ----------------------------------------------------------------


@dataclass
class RunConfig:
    dim: int
    box: float
    n: int
    dt: float
    T: float
    chi: float
    seed_root: int
    N_list: list
    M: int
    delta: float
    epsilon: object
    shared_w: bool
    field_spec: dict
    initial_spec: dict
    method: str
    interp_order: int
    kernel_resolution: int
    bandwidth: object
    validation_samples: int
    out_dir: str
    stride: int
    snapshot_stride: int
    # derived
    eps_by_N: dict = field(default_factory=dict)
    steps: int = 0
    dx: float = 0.0
    stability: dict = field(default_factory=dict)
    source: str = None

    @property
    def grid(self):
        from .grid import Grid
        return Grid(self.n, self.dim, self.box)

    def make_field(self):
        from .fields import make_field
        return make_field(self.field_spec, dim=self.dim, box=self.box, horizon=self.T,
                          samples=self.validation_samples)

    def make_initial(self):
        from .particles import InitialDensity
        spec = {k: v for k, v in self.initial_spec.items() if v is not None}
        for key in ("mean",):
            if key in spec:
                spec[key] = tuple(spec[key])
        for key in ("means", "covs", "weights"):
            if key in spec:
                spec[key] = tuple(tuple(v) if isinstance(v, list) else v for v in spec[key])
        return InitialDensity(dim=self.dim, **spec)

    def epsilon_for(self, N):
        return self.eps_by_N[int(N)]

    def echo(self):
        """Every setting (defaults included) as a plain, JSON-ready mapping."""
        return {
            "run": {"dim": self.dim, "box": self.box, "n": self.n, "dt": self.dt, "T": self.T,
                    "chi": self.chi, "seed_root": self.seed_root},
            "sweep": {"N_list": list(self.N_list), "M": self.M, "delta": self.delta,
                      "epsilon": self.epsilon, "shared_w": self.shared_w},
            "field": copy.deepcopy(self.field_spec),
            "initial": copy.deepcopy(self.initial_spec),
            "numerics": {"method": self.method, "interp_order": self.interp_order,
                         "kernel_resolution": self.kernel_resolution,
                         "bandwidth": self.bandwidth,
                         "validation_samples": self.validation_samples},
            "output": {"dir": self.out_dir, "stride": self.stride,
                       "snapshot_stride": self.snapshot_stride},
            "derived": {"epsilon_by_N": {str(k): v for k, v in sorted(self.eps_by_N.items())},
                        "steps": self.steps, "dx": self.dx, "stability": self.stability},
        }


def _merge(raw, problems):
    merged = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            problems.append(f"unknown section [{section}]")
            continue
        if not isinstance(body, dict):
            problems.append(f"[{section}] must be a table")
            continue
        if section == "field":  # free-form, checked by make_field
            merged[section] = copy.deepcopy(body)
            merged[section].setdefault("kind", "constant")
            continue
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                problems.append(f"unknown key {section}.{key}")
            else:
                merged[section][key] = value
    return merged


def config_from_dict(raw, source=None, overrides=None):
    """Validate a raw mapping (as read from TOML) into a RunConfig."""
    problems = []
    merged = _merge(raw, problems)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        merged[section][key] = value
    run, sweep, num, out = merged["run"], merged["sweep"], merged["numerics"], merged["output"]

    def number(section, key, kind=float, positive=True):
        value = merged[section][key]
        try:
            if isinstance(value, bool):
                raise TypeError
            value = kind(value)
            if kind is int and value != merged[section][key]:
                raise TypeError
        except (TypeError, ValueError):
            problems.append(f"{section}.{key} must be {'an integer' if kind is int else 'a number'}"
                            f", got {merged[section][key]!r}")
            return None
        if positive and not value > 0:
            problems.append(f"{section}.{key} must be positive, got {value}")
            return None
        return value

    dim = number("run", "dim", int)
    if dim is not None and dim not in (2, 3):
        problems.append(f"run.dim must be 2 or 3, got {dim}")
        dim = None
    if run["n"] is None and dim is not None:
        run["n"] = DEFAULT_GRID[dim]
    box = number("run", "box")
    n = number("run", "n", int) if run["n"] is not None else None
    if n is not None and (n < 8 or n % 2):
        problems.append(f"run.n must be an even integer >= 8, got {n}")
    dt = number("run", "dt")
    T = number("run", "T")
    chi = number("run", "chi", positive=False)
    seed_root = number("run", "seed_root", int, positive=False)
    if seed_root is not None and not 0 <= seed_root < 2 ** 63:
        problems.append("run.seed_root must lie in [0, 2^63)")
    steps = 0
    if dt and T:
        ratio = T / dt
        steps = int(round(ratio))
        if abs(ratio - steps) > 1e-9 * max(1.0, ratio) or steps < 1:
            problems.append(f"run.T / run.dt = {ratio:g} must be a positive integer")

    N_list = sweep["N_list"]
    if not isinstance(N_list, list) or any(isinstance(v, bool) or not isinstance(v, int) or v < 2
                                           for v in N_list):
        problems.append(f"sweep.N_list must be a list of integers >= 2, got {N_list!r}")
        N_list = []
    elif len(set(N_list)) != len(N_list):
        problems.append("sweep.N_list has duplicate entries")
    M = number("sweep", "M", int)
    delta = number("sweep", "delta")
    if delta is not None and not delta < 1:
        problems.append(f"sweep.delta must lie in (0, 1), got {delta}")
    eps = sweep["epsilon"]
    if eps != "auto":
        if isinstance(eps, bool) or not isinstance(eps, (int, float)) or not eps > 0:
            problems.append(f"sweep.epsilon must be 'auto' or a positive number, got {eps!r}")
            eps = None
        else:
            eps = float(eps)
    if not isinstance(sweep["shared_w"], bool):
        problems.append("sweep.shared_w must be true or false")

    if num["method"] not in ("auto", "cells", "pairs", "brute"):
        problems.append(f"numerics.method must be auto|cells|pairs|brute, got {num['method']!r}")
    if num["interp_order"] not in (1, 3):
        problems.append(f"numerics.interp_order must be 1 (multilinear) or 3 (cubic), "
                        f"got {num['interp_order']!r}")
    res = number("numerics", "kernel_resolution", int)
    if not (num["bandwidth"] == "silverman" or (isinstance(num["bandwidth"], (int, float))
                                                and not isinstance(num["bandwidth"], bool)
                                                and num["bandwidth"] > 0)):
        problems.append("numerics.bandwidth must be 'silverman' or a positive number")
    number("numerics", "validation_samples", int)
    stride = number("output", "stride", int)
    snap = number("output", "snapshot_stride", int, positive=False)
    if not isinstance(out["dir"], str):
        problems.append("output.dir must be a string")

    eps_by_N = {}
    if dim and delta and eps is not None:
        for N in N_list:
            eps_by_N[N] = auto_epsilon(N, delta, dim) if eps == "auto" else eps
    dx = 2.0 * box / n if box and n else 0.0
    for N, e in eps_by_N.items():
        if dx and e < 2.0 * dx:
            problems.append(f"epsilon={e:.4g} for N={N} is below 2 dx = {2 * dx:.4g}: the grid "
                            f"does not resolve the mollified kernel (refine run.n or shrink run.box)")

    cfg = None
    stability = {}
    if not problems:
        cfg = RunConfig(
            dim=dim, box=box, n=n, dt=dt, T=T, chi=chi, seed_root=seed_root,
            N_list=list(N_list), M=M, delta=delta, epsilon=eps, shared_w=sweep["shared_w"],
            field_spec=merged["field"], initial_spec=merged["initial"], method=num["method"],
            interp_order=num["interp_order"], kernel_resolution=res,
            bandwidth=num["bandwidth"], validation_samples=num["validation_samples"],
            out_dir=out["dir"], stride=stride, snapshot_stride=snap, eps_by_N=eps_by_N,
            steps=steps, dx=dx, source=str(source) if source else None)
        stability = _check_stability(cfg, problems)
        cfg.stability = stability
    if problems:
        raise ConfigError(problems)
    return cfg


def _check_stability(cfg, problems):
    """Materialize the step limits of both solvers; append violations to ``problems``."""
    from .fields import FieldValidationError
    from .particles import max_stable_dt
    from .spde import SPDESolver

    out = {}
    try:
        fld = cfg.make_field()
    except (FieldValidationError, ValueError, KeyError, TypeError) as exc:
        problems.append(f"field: {exc}")
        return out
    try:
        rho0 = cfg.make_initial().on_grid(cfg.grid)
    except (ValueError, TypeError) as exc:
        problems.append(f"initial: {exc}")
        return out
    for N, eps in sorted(cfg.eps_by_N.items()):
        table = cached_kernel_table(eps, cfg.dim, cfg.kernel_resolution)
        limit = max_stable_dt(table, cfg.chi)
        out[f"particles_N{N}"] = limit if math.isfinite(limit) else None
        if cfg.dt > limit:
            problems.append(f"dt={cfg.dt:g} violates the particle step guard dt chi max|F| <= "
                            f"0.1 eps (limit {limit:.3g} for N={N})")
    solver = SPDESolver(cfg.grid, fld, cfg.chi, "exact")
    limit = solver.max_stable_dt(rho0)
    out["spde"] = limit if math.isfinite(limit) else None
    if cfg.dt > limit:
        problems.append(f"dt={cfg.dt:g} violates the grid step limit {limit:.3g} "
                        f"(explicit flux, noise and variable-diffusion terms, safety "
                        f"factor 0.5, evaluated on the initial density)")
    return out


def parse_config(path, overrides=None):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return config_from_dict(raw, source=path, overrides=overrides)


# --- rate fitting -------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    stderr: float
    intercept_stderr: float
    n_points: int

    def to_dict(self):
        return asdict(self)


def fit_rate(x, y, weights=None):
    """Weighted least-squares line y = slope x + intercept with standard errors.

    ``x``, ``y`` are already logarithms. The standard errors use the weighted
    residual variance; with two points they are undefined (nan).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError("x and y must be 1-d arrays of equal length")
    if x.size < 2:
        raise FitError(f"need at least 2 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite input")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != x.shape or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise FitError("weights must be positive and finite")
    xm = np.sum(w * x) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    if sxx <= 1e-14 * max(1.0, np.sum(w * x * x)):
        raise FitError("degenerate design: all x values coincide")
    ym = np.sum(w * y) / np.sum(w)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    if x.size > 2:
        resid = y - (slope * x + intercept)
        s2 = np.sum(w * resid ** 2) / (x.size - 2)
        se = math.sqrt(s2 / sxx)
        se_int = math.sqrt(s2 * (1.0 / np.sum(w) + xm ** 2 / sxx))
    else:
        se = se_int = math.nan
    return RateFit(float(slope), float(intercept), se, se_int, int(x.size))


def fit_power_law(N, err, stderr=None):
    """Fit err ~ C N^slope in log-log; weights are inverse squared stderr of log(err)."""
    err = np.asarray(err, dtype=float)
    if np.any(~(err > 0)):
        raise FitError("errors must be positive to take logarithms")
    weights = None
    if stderr is not None:
        rel = np.asarray(stderr, dtype=float) / err
        if np.all(rel > 0):
            weights = 1.0 / rel ** 2
    return fit_rate(np.log(np.asarray(N, dtype=float)), np.log(err), weights)


# --- sweeps ---------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    config: dict
    records: list
    aggregates: dict
    fits: dict
    seeds: dict
    version: str = __version__
    pooled: dict = field(default_factory=dict)  # shared-W conditional-density checks per N

    def to_dict(self):
        return {"version": self.version, "config": self.config, "seeds": self.seeds,
                "records": self.records, "aggregates": self.aggregates, "fits": self.fits,
                "pooled": self.pooled}

    @classmethod
    def from_dict(cls, data):
        return cls(config=data["config"], records=data["records"],
                   aggregates=data["aggregates"], fits=data["fits"], seeds=data["seeds"],
                   version=data["version"], pooled=data.get("pooled", {}))


def _record(run, N, replica, error=None):
    rec = {"N": N, "replica": replica, "epsilon": run.epsilon if run else None,
           "seeds": run.layout.to_dict() if run else None, "failed": error is not None,
           "error": error}
    if run is not None:
        rec.update({
            "blowup": run.blowup,
            "blowup_time": run.blowup_time,
            "sup_coupling_error": run.sup_coupling,
            "final_coupling_error": run.coupling[-1],
            "weak_error_T": {k: v[-1] for k, v in run.weak.items()},
            "weak_error_sup": run.sup_weak(),
            "regularization_gap": max(run.gap),
            "conditional_density_L1_T": run.density_l1[-1],
            "triangle_ok": run.triangle_ok,
            "boundary_mass": run.boundary_mass,
            "per_particle_error_T": run.per_particle[-1].tolist(),
        })
    return rec


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
    return float(v.mean()), se


def aggregate(records, N_list):
    """Replica means and standard errors per N; a deterministic fold over sorted keys."""
    out = {}
    for N in sorted(N_list):
        recs = sorted((r for r in records if r["N"] == N), key=lambda r: r["replica"])
        ok = [r for r in recs if not r["failed"] and not r["blowup"]]
        agg = {"epsilon": recs[0]["epsilon"] if recs else None, "replicas": len(recs),
               "used": len(ok), "failed": sum(r["failed"] for r in recs),
               "flagged": sum((not r["failed"]) and r["blowup"] for r in recs)}
        agg["coupling_mean"], agg["coupling_stderr"] = _mean_se(
            [r["sup_coupling_error"] for r in ok])
        agg["gap_mean"], agg["gap_stderr"] = _mean_se([r["regularization_gap"] for r in ok])
        agg["density_L1_mean"], _ = _mean_se([r["conditional_density_L1_T"] for r in ok])
        names = sorted(ok[0]["weak_error_T"]) if ok else []
        agg["weak"] = {}
        for name in names:
            m, s = _mean_se([r["weak_error_T"][name] for r in ok])
            agg["weak"][name] = {"mean": m, "stderr": s}
        if ok:
            per = np.mean([r["per_particle_error_T"] for r in ok], axis=0)
            agg["sup_particle_mean_T"] = float(per.max())
        else:
            agg["sup_particle_mean_T"] = None
        agg["triangle_ok"] = all(r["triangle_ok"] for r in ok)
        out[str(N)] = agg
    return out


def fit_aggregates(aggregates):
    """log-log fits against N for the coupling error and each weak error."""
    Ns = [int(k) for k in aggregates if aggregates[k]["used"] > 0]
    fits = {"excluded_paths": sum(a["failed"] + a["flagged"] for a in aggregates.values())}
    if len(Ns) < 2:
        return fits

    def one(means, ses):
        if all(m == 0 for m in means):
            return {"degenerate": "all replica means are exactly zero; there is no rate to fit"}
        try:
            se = None if any(s is None for s in ses) else ses
            return fit_power_law(Ns, means, se).to_dict()
        except FitError as exc:
            return {"error": str(exc)}

    a = [aggregates[str(N)] for N in Ns]
    fits["coupling"] = one([x["coupling_mean"] for x in a], [x["coupling_stderr"] for x in a])
    fits["weak"] = {name: one([x["weak"][name]["mean"] for x in a],
                              [x["weak"][name]["stderr"] for x in a])
                    for name in sorted(a[0]["weak"])}
    return fits


def run_convergence_sweep(cfg, progress=None, exact_cache=None):
    """All (N, replica) coupled runs of the config, aggregated and fitted."""
    from .coupling import exact_reference, run_coupled
    from .particles import IntegrationError

    fld = cfg.make_field()
    initial = cfg.make_initial()
    grid = cfg.grid
    # the exact SPDE is the same for every replica when it does not see W
    # (sigma = 0) or when all replicas share W: solve it once
    shared = None
    if _sigma_vanishes(fld) or cfg.shared_w:
        from .fields import sample_increments
        key = (cfg.seed_root, cfg.dt, cfg.T, cfg.stride)
        if exact_cache is not None and key in exact_cache:
            shared = exact_cache[key]
        else:
            w = sample_increments(cfg.seed_root, 0, cfg.steps, cfg.dt, fld.noise_dim)
            shared, blow = exact_reference(initial.on_grid(grid), fld, w, cfg.T, cfg.dt,
                                           cfg.chi, cfg.stride)
            if blow is not None:
                shared = None
            elif exact_cache is not None:
                exact_cache[key] = shared

    records = []
    pooled = {}
    for N in cfg.N_list:
        table = cached_kernel_table(cfg.epsilon_for(N), cfg.dim, cfg.kernel_resolution)
        fails = 0
        finals = []
        for m in range(cfg.M):
            try:
                run = run_coupled(N=N, table=table, field=fld, initial=initial, grid=grid,
                                  T=cfg.T, dt=cfg.dt, chi=cfg.chi, seed_root=cfg.seed_root,
                                  replica=m, shared_w=cfg.shared_w, stride=cfg.stride,
                                  interp_order=cfg.interp_order, method=cfg.method,
                                  exact_snapshots=shared, keep_final=cfg.shared_w)
                records.append(_record(run, N, m))
                if cfg.shared_w and not run.blowup:
                    finals.append(run)
                    run.X = None  # only Y and rho^eps are pooled
            except (IntegrationError, FloatingPointError, ValueError) as exc:
                fails += 1
                records.append(_record(None, N, m, error=f"{type(exc).__name__}: {exc}"))
            if progress:
                progress(N, m, records[-1])
        if fails > cfg.M / 2:
            raise RuntimeError(f"sweep aborted: {fails} of {cfg.M} replicas failed at N={N}")
        if cfg.shared_w:
            pooled[str(N)] = _pooled_check(cfg, finals)
    report = build_report(cfg, records)
    report.pooled = pooled
    return report


def _pooled_check(cfg, runs):
    """KDE of the pooled Y particles of all shared-W replicas against rho^eps_T."""
    from .coupling import conditional_density_check

    out = {"replicas": len(runs), "pooled_count": sum(r.N for r in runs)}
    if not runs:
        out["error"] = "no replica finished"
        return out
    rho = runs[0].rho_eps
    for r in runs[1:]:  # same W and eps: the grid paths must agree bit for bit
        if not np.array_equal(r.rho_eps.values, rho.values):
            out["error"] = "replicas disagree on rho^eps; W was not shared"
            return out
    try:
        out["density_L1"] = conditional_density_check(
            [r.Y for r in runs], rho, rho.t, bandwidth=cfg.bandwidth,
            w_keys=[r.layout.w_key for r in runs])
    except ValueError as exc:
        out["error"] = str(exc)
    return out


def _sigma_vanishes(fld):
    if fld.kind == "constant":
        return not np.any(fld.params["sigma"])
    if fld.kind == "shear":
        return fld.params["base"] == 0 and fld.params["amplitude"] == 0
    return False


def build_report(cfg, records):
    aggregates = aggregate(records, cfg.N_list)
    fits = fit_aggregates(aggregates)
    seeds = {"seed_root": cfg.seed_root, "shared_w": cfg.shared_w,
             "replica_seeds": {f"{r['N']}/{r['replica']}": r["seeds"] for r in records}}
    caveat = (f"delta={cfg.delta}: the mean-field rate is N^(-(1 - C delta)) up to logarithms "
              f"with an unknown constant C; slopes are one-sided checks")
    config = cfg.echo()
    config["caveat"] = caveat
    return ConvergenceReport(config=config, records=records, aggregates=aggregates, fits=fits,
                             seeds=seeds)


# --- report files -------------------------------------------------------------------


def resolve_out_dir(cli_value=None, cfg=None):
    """Output directory: environment override, then --out, then the config."""
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    if cli_value:
        return Path(cli_value)
    return Path(cfg.out_dir if cfg else "out")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def emit_report(report, out_dir):
    """Write report.json, summary.csv and plotdata_*.csv; returns the written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        body = {"metadata": {"timestamp": datetime.datetime.now(datetime.timezone.utc)
                             .isoformat(timespec="seconds")},
                "report": report.to_dict()}
        p = out_dir / "report.json"
        p.write_text(_dump(body))
        paths.append(p)

        aggs = report.aggregates
        names = sorted(next(iter(aggs.values()))["weak"]) if aggs else []
        header = ["N", "epsilon", "used", "flagged", "failed", "coupling_mean",
                  "coupling_stderr", "gap_mean", "density_L1_mean"]
        for n in names:
            header += [f"weak_{n}_mean", f"weak_{n}_stderr"]
        lines = [",".join(header)]
        for key in sorted(aggs, key=int):
            a = aggs[key]
            row = [key, a["epsilon"], a["used"], a["flagged"], a["failed"], a["coupling_mean"],
                   a["coupling_stderr"], a["gap_mean"], a["density_L1_mean"]]
            for n in names:
                row += [a["weak"][n]["mean"], a["weak"][n]["stderr"]]
            lines.append(",".join(_fmt(v) for v in row))
        p = out_dir / "summary.csv"
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)

        series = {"coupling": ("coupling_mean", "coupling_stderr", None)}
        for n in names:
            series[f"weak_{n}"] = ("mean", "stderr", n)
        for label, (mk, sk, sub) in series.items():
            rows = ["log_N,log_error,log_error_stderr"]
            for key in sorted(aggs, key=int):
                a = aggs[key] if sub is None else aggs[key]["weak"][sub]
                m, s = a[mk], a[sk]
                if m is None or not m > 0:
                    continue
                rows.append(",".join(_fmt(v) for v in (
                    math.log(int(key)), math.log(m), (s / m) if s is not None else None)))
            p = out_dir / f"plotdata_{label}.csv"
            p.write_text("\n".join(rows) + "\n")
            paths.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_report(path):
    """Read report.json back into a ConvergenceReport (metadata block dropped)."""
    with open(path) as fh:
        data = json.load(fh)
    return ConvergenceReport.from_dict(data["report"])
