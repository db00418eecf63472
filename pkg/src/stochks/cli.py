"""Command-line entry point: ``stochks <subcommand> --config run.toml``.

Exit codes: 0 success, 2 configuration rejected, 3 numerical blow-up in a
single (non-sweep) run, 4 I/O failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .harness import (ConfigError, auto_epsilon, cached_kernel_table, emit_report, load_report,
                      parse_config, resolve_out_dir)

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_IO = 0, 2, 3, 4
GLOBAL_DEFAULTS = {"config": None, "out": None, "seed": None, "threads": None, "quiet": False}

log = logging.getLogger("stochks")


def _load(args, need=True):
    if args.config is None:
        if need:
            raise ConfigError(["--config is required for this subcommand"])
        return None
    overrides = {"run.seed_root": args.seed} if args.seed is not None else None
    return parse_config(args.config, overrides)


def _single_N(args, cfg):
    N = args.N if args.N is not None else (cfg.N_list[0] if cfg.N_list else None)
    if N is None:
        raise ConfigError(["no particle count: pass --N or give sweep.N_list"])
    if N not in cfg.eps_by_N:
        eps = auto_epsilon(N, cfg.delta, cfg.dim) if cfg.epsilon == "auto" else cfg.epsilon
        if eps < 2 * cfg.dx:
            raise ConfigError([f"epsilon={eps:.4g} for N={N} is below 2 dx = {2 * cfg.dx:.4g}"])
        cfg.eps_by_N[N] = eps
    return N


def _out(args, cfg):
    path = resolve_out_dir(args.out, cfg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_validate_kernel(args):
    from .kernel import kernel_report
    cfg = _load(args, need=False)
    dim = args.dim or (cfg.dim if cfg else 2)
    if args.epsilon is not None:
        eps = args.epsilon
    elif cfg is not None and cfg.N_list:
        eps = cfg.epsilon_for(cfg.N_list[0])
    else:
        eps = 0.2
    table = cached_kernel_table(eps, dim, cfg.kernel_resolution if cfg else 512)
    report = kernel_report(table)
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out or cfg is not None:
        out = _out(args, cfg)
        table.save(out / f"kernel_d{dim}_eps{eps:.6g}.bin")
    return EXIT_OK


def cmd_validate_assumptions(args):
    from .fields import assumption1_report, make_field
    cfg = _load(args)
    fld = make_field(cfg.field_spec, dim=cfg.dim, box=cfg.box, horizon=cfg.T, validate=False)
    report = assumption1_report(fld, m=args.m, samples=cfg.validation_samples, box=cfg.box,
                                horizon=cfg.T)
    print(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK if report["pass"] else EXIT_CONFIG


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def cmd_simulate_particles(args):
    from .fields import StreamBank, sample_increments
    from .io import write_snapshot
    from .particles import IntegrationError, integrate, moments, sample_initial

    cfg = _load(args)
    N = _single_N(args, cfg)
    eps = cfg.epsilon_for(N)
    table = cached_kernel_table(eps, cfg.dim, cfg.kernel_resolution)
    fld = cfg.make_field()
    ens = sample_initial(cfg.make_initial(), N, cfg.seed_root, cfg.box, eps)
    w = sample_increments(cfg.seed_root, 0, cfg.steps, cfg.dt, fld.noise_dim)
    bank = StreamBank(cfg.seed_root, ens.stream_ids, cfg.dt, fld.noise_dim)
    out = _out(args, cfg)
    snaps = []

    def snapshot(e):
        if cfg.snapshot_stride:
            p = out / f"particles_{len(snaps):05d}.bin"
            write_snapshot(p, e.positions, e.t, eps, cfg.box)
            snaps.append(p)
        return None

    # snapshots ride on the observer stride when requested
    stride = cfg.snapshot_stride or cfg.stride
    try:
        _, recs = integrate(ens, table, fld, w, bank, cfg.T, cfg.dt, cfg.chi,
                            observers={"m": moments, "s": snapshot}, stride=stride,
                            method=cfg.method)
    except IntegrationError as exc:
        log.error("%s", exc)
        return EXIT_BLOWUP
    d = cfg.dim
    cols = (["t"] + [f"mean_x{k + 1}" for k in range(d)] + [f"second_moment_x{k + 1}" for k in range(d)]
            + ["min_pair_distance", "mass_outside_radius"])
    lines = [",".join(cols)]
    for r in recs:
        m = r["m"]
        row = [m["t"], *m["mean"], *m["second_moment"], m["min_pair_distance"],
               m["mass_outside_radius"]]
        lines.append(",".join(repr(float(v)) for v in row))
    (out / "particles_timeseries.csv").write_text("\n".join(lines) + "\n")
    log.info("wrote %s", out / "particles_timeseries.csv")
    return EXIT_OK


def cmd_solve_spde(args):
    from .fields import sample_increments
    from .io import write_density_snapshot
    from .spde import solve_path

    cfg = _load(args)
    fld = cfg.make_field()
    table = None
    eps = 0.0
    if args.mode == "regularized":
        N = _single_N(args, cfg)
        eps = cfg.epsilon_for(N)
        table = cached_kernel_table(eps, cfg.dim, cfg.kernel_resolution)
    w = sample_increments(cfg.seed_root, 0, cfg.steps, cfg.dt, fld.noise_dim)
    rho0 = cfg.make_initial().on_grid(cfg.grid)
    res = solve_path(rho0, fld, w, cfg.T, cfg.dt, cfg.chi, args.mode, table,
                     snapshot_stride=cfg.snapshot_stride)
    out = _out(args, cfg)
    res.trace.to_csv(out / f"norm_trace_{args.mode}.csv")
    for k, snap in enumerate(res.snapshots):
        write_density_snapshot(out / f"density_{args.mode}_{k:05d}.bin", snap.values, snap.t,
                               eps, cfg.box)
    if res.blowup:
        log.error("blow-up at t=%.6g", res.blowup_time)
        return EXIT_BLOWUP
    return EXIT_OK


def cmd_couple(args):
    from .coupling import run_coupled
    from .particles import IntegrationError

    cfg = _load(args)
    N = _single_N(args, cfg)
    table = cached_kernel_table(cfg.epsilon_for(N), cfg.dim, cfg.kernel_resolution)
    try:
        run = run_coupled(N=N, table=table, field=cfg.make_field(), initial=cfg.make_initial(),
                          grid=cfg.grid, T=cfg.T, dt=cfg.dt, chi=cfg.chi,
                          seed_root=cfg.seed_root, replica=args.replica,
                          shared_w=cfg.shared_w, stride=cfg.stride,
                          interp_order=cfg.interp_order, method=cfg.method)
    except IntegrationError as exc:
        log.error("%s", exc)
        return EXIT_BLOWUP
    out = _out(args, cfg)
    run.to_csv(out / "couple.csv")
    log.info("sup coupling error %.6g", run.sup_coupling)
    if run.blowup:
        log.error("blow-up at t=%.6g", run.blowup_time)
        return EXIT_BLOWUP
    return EXIT_OK


def cmd_converge(args):
    from .harness import run_convergence_sweep
    cfg = _load(args)

    def progress(N, m, rec):
        log.info("N=%d replica=%d sup coupling=%s", N, m, rec.get("sup_coupling_error"))

    report = run_convergence_sweep(cfg, progress=progress)
    out = resolve_out_dir(args.out, cfg)
    for p in emit_report(report, out):
        log.info("wrote %s", p)
    fit = report.fits.get("coupling")
    if fit and "slope" in fit:
        log.info("coupling slope %.3f (stderr %.3g)", fit["slope"], fit["stderr"])
    return EXIT_OK


def cmd_report(args):
    from .harness import aggregate, fit_aggregates
    src = Path(args.source)
    if src.is_dir():
        src = src / "report.json"
    report = load_report(src)
    N_list = report.config["sweep"]["N_list"]
    report.aggregates = aggregate(report.records, N_list)
    report.fits = fit_aggregates(report.aggregates)
    print(json.dumps({"aggregates": report.aggregates, "fits": report.fits}, indent=1,
                     sort_keys=True))
    if args.out or args.config:
        emit_report(report, resolve_out_dir(args.out, None))
    return EXIT_OK


def build_parser():
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given in front of it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output directory (overridden by $STOCHKS_OUT)")
    common.add_argument("--seed", type=int, help="override run.seed_root")
    common.add_argument("--threads", type=int, help="worker threads for the particle loops")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    p = argparse.ArgumentParser(prog="stochks", parents=[common],
                                description="stochastic Keller-Segel simulation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-kernel", parents=[common], help="kernel table diagnostics")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--dim", type=int, choices=(2, 3))
    s.set_defaults(func=cmd_validate_kernel)

    s = sub.add_parser("validate-assumptions", parents=[common], help="check the coefficient field")
    s.add_argument("--m", type=int, default=3, help="regularity order")
    s.set_defaults(func=cmd_validate_assumptions)

    s = sub.add_parser("simulate-particles", parents=[common], help="integrate the particle system")
    s.add_argument("--N", type=int)
    s.set_defaults(func=cmd_simulate_particles)

    s = sub.add_parser("solve-spde", parents=[common], help="solve the grid equation")
    s.add_argument("--mode", choices=("exact", "regularized"), default="exact")
    s.add_argument("--N", type=int, help="particle count that fixes eps(N) in regularized mode")
    s.set_defaults(func=cmd_solve_spde)

    s = sub.add_parser("couple", parents=[common], help="one coupled particle/mean-field run")
    s.add_argument("--N", type=int)
    s.add_argument("--replica", type=int, default=0)
    s.set_defaults(func=cmd_couple)

    s = sub.add_parser("converge", parents=[common], help="convergence sweep over N")
    s.set_defaults(func=cmd_converge)

    s = sub.add_parser("report", parents=[common], help="re-aggregate an existing report")
    s.add_argument("source", help="report.json or the directory holding it")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    # filled in afterwards: parser-level defaults would leak into the actions
    # shared with the subparsers and clobber flags given before the subcommand
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.threads:
        import numba
        numba.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
