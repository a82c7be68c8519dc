"""Command-line entry point: forward, gradient, optimize, validate."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .adjoint import GradientReport, adjoint_dsmc_gradient
from .config import ConfigError, RunConfig, load_config
from .forward import moments_csv, read_log, run_forward, write_log

log = logging.getLogger("boltzadj")

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2


def _threads(args) -> int | None:
    value = args.threads if args.threads is not None else os.environ.get("BOLTZ_ADJ_THREADS")
    if value in (None, ""):
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {value!r}")
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_forward(cfg: RunConfig, args) -> int:
    sim = cfg.sim_config(args.seed)
    run = run_forward(sim)
    out = _out_dir(args)
    (out / "moments.csv").write_text(moments_csv(run.moment_history, sim.dt))
    write_log(run.log, out / "collisions.log")
    np.save(out / "final_ensemble.npy", run.final_ensemble.velocities)
    log.info("forward run written to %s", out)
    return EXIT_OK


def _gradient_report(cfg: RunConfig, args) -> GradientReport:
    sim = cfg.sim_config(args.seed)
    obj = cfg.objective()
    method = cfg.method()
    axes = list(method["axes"])
    name = method["name"]
    extras: dict = {}
    if name == "fd":
        from .validation import fd_gradient

        values = []
        fd_extra = {"delta_alpha": method["delta_alpha"], "crn": method["crn"], "Ms": method["Ms"], "e_FD": [], "e_rand": [], "delta_opt": [], "error": []}
        for a in axes:
            rep = fd_gradient(sim, obj, a, method["delta_alpha"], method["Ms"], crn=method["crn"], stencil_step=method.get("stencil_step"))
            values.append(rep.value)
            fd_extra["e_FD"].append(rep.e_fd)
            fd_extra["e_rand"].append(rep.e_rand)
            fd_extra["delta_opt"].append(rep.delta_opt if np.isfinite(rep.delta_opt) else None)
            fd_extra["error"].append(rep.value_error)
        extras.update(fd_extra)
        return GradientReport(obj.name, axes, values, "fd", sim.N, sim.seed, extras)

    if name == "continuous_grid":
        if not obj.is_moment:
            raise ConfigError(f"the continuous_grid method supports moment objectives only, got {obj.kind}")
        from .grid_adjoint import DensityRecorder, VelocityGrid, final_gamma, gradient_grid, run_grid_adjoint

        n, quad = cfg.grid()
        grid = VelocityGrid.for_params(n, sim.params)
        rec = DensityRecorder(grid)
        run = run_forward(sim, record_history=False, observer=rec)
        gF = final_gamma([obj], run.final_ensemble.velocities, grid)
        g0 = run_grid_adjoint(gF, rec.densities, grid, quad, sim.dt, sim.mu)
        values = gradient_grid(g0, sim.params, grid, axes)[0]
        extras.update({"n_grid": n, "n_phi": quad.n_phi, "n_theta": quad.n_theta, "dropped": int(max(rec.dropped))})
        return GradientReport(obj.name, axes, list(values), "continuous_grid", sim.N, sim.seed, extras)

    run = run_forward(sim, record_history=False)
    if name == "continuous_particle":
        from .particle_adjoint import particle_gradient

        values = particle_gradient(run, [obj], axes)[0]
        return GradientReport(obj.name, axes, list(values), "continuous_particle", sim.N, sim.seed)
    values = adjoint_dsmc_gradient(run, [obj], axes)[0]
    return GradientReport(obj.name, axes, list(values), "adjoint_dsmc", sim.N, sim.seed)


def cmd_gradient(cfg: RunConfig, args) -> int:
    report = _gradient_report(cfg, args)
    text = report.to_json()
    print(text)
    if args.out:
        (_out_dir(args) / "gradient.json").write_text(text + "\n")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, args) -> int:
    from .optimize import DSMCProblem, steepest_descent

    free, alpha0, opts = cfg.optimize(args.seed)
    sim = cfg.sim_config(args.seed)
    problem = DSMCProblem(sim, cfg.objective(), free)
    hist = steepest_descent(problem, alpha0, opts)
    out = _out_dir(args)
    (out / "history.csv").write_text(hist.to_csv())
    (out / "history.json").write_text(hist.to_json() + "\n")
    print(json.dumps({"final_alpha": dict(zip(hist.names, map(float, hist.final_alpha))), "final_J": float(hist.J[-1]), "iterations": len(hist.records) - 1}))
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    from .validation import results_json, run_validation

    if args.log:
        path = Path(args.log)
        if not path.is_file():
            print(f"error: collision log file not found: {path}", file=sys.stderr)
            return EXIT_USAGE
        try:
            clog = read_log(path)
            for rec in clog.steps:
                rec.check_indices(clog.N)
        except (ValueError, IndexError) as exc:
            print(f"error: bad collision log {path}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    sim = cfg.sim_config(args.seed)
    try:
        settings = cfg.validate_settings()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    results = run_validation(sim, settings, cfg.objective())
    for r in results:
        print(r.line())
    if args.out:
        (_out_dir(args) / "validation.json").write_text(results_json(results) + "\n")
    failed = [r for r in results if not r.passed]
    return EXIT_TOLERANCE if failed else EXIT_OK


COMMANDS = {"forward": cmd_forward, "gradient": cmd_gradient, "optimize": cmd_optimize, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boltz-adj", description="DSMC forward runs and adjoint gradients")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run configuration")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("forward", parents=[common], help="run DSMC and write moments, log and final state")
    sub.add_parser("gradient", parents=[common], help="print a gradient report as JSON")
    sub.add_parser("optimize", parents=[common], help="steepest descent on the configured objective")
    v = sub.add_parser("validate", parents=[common], help="run the validation suites")
    v.add_argument("--log", default=None, help="collision log file to check")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        threads = _threads(args)
        if threads:
            from .grid_adjoint import set_threads

            set_threads(threads)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
