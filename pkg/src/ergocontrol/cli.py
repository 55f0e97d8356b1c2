"""Command line entry point: ``solve``, ``simulate``, ``verify`` and ``closed-form``.

Exit codes: 0 success, 1 verification check failed, 2 invalid configuration,
3 solver failure, 4 simulation blow-up.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import control, simulate, solvers
from .config import ConfigError, RunConfig, load_config, scalar_field, write_csv

log = logging.getLogger("ergocontrol")

EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_SIM = 1, 2, 3, 4
DENSITY_L1_TOL = 0.05


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items() if _jsonable(v) is not None}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int, bool, str)) or value is None:
        return value.item() if isinstance(value, np.generic) else value
    if isinstance(value, np.ndarray) and value.ndim == 0:
        return float(value)
    return None  # arrays are written to CSV, not JSON


def _dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def write_solution(out: Path, cfg: RunConfig, result: solvers.SolveResult) -> None:
    disc = cfg.disc
    nodes = disc.grid.nodes
    header = ["node"] + [f"theta_{k}" for k in range(disc.m)] + ["rho", "potential"]
    header += [f"u_{k}" for k in range(disc.m)] + [f"J_{k}" for k in range(disc.m)]
    cols = [np.arange(disc.n)] + [nodes[:, k] for k in range(disc.m)] + [result.rho, result.potential]
    cols += [result.u[:, k] for k in range(disc.m)] + [result.J[:, k] for k in range(disc.m)]
    write_csv(out / "solution.csv", header, cols)
    spec = cfg.spec
    payload = {
        "variant": spec.variant,
        "mu": result.mu if np.isfinite(result.mu) else None,
        "cost": result.cost.as_dict(),
        "residuals": result.residuals,
        "iterations": result.iterations,
        "tolerances": {"tol": spec.tol, "newton_tol": spec.newton_tol,
                       "eig_maxiter": spec.eig_maxiter, "newton_maxiter": spec.newton_maxiter},
        "extras": result.extras,
        "versions": _versions(),
        "config": cfg.raw,
    }
    _dump(out / "diagnostics.json", payload)


def write_simulation(out: Path, cfg: RunConfig, stats: simulate.TrajectoryStats,
                     result: solvers.SolveResult, checks: dict | None = None) -> None:
    disc, m = cfg.disc, cfg.disc.m
    centers = [stats.bin_centers[:, k] for k in range(m)]
    analytic = simulate.interpolate_nodal(disc.grid.shape, result.rho, stats.bin_centers)
    write_csv(out / "histogram.csv", [f"theta_{k}" for k in range(m)] + ["density", "analytic", "bin_volume"],
              centers + [stats.density, analytic, stats.bin_volume])
    J_ref = simulate.interpolate_nodal(disc.grid.shape, disc.to_nodes(result.J), stats.bin_centers)
    write_csv(out / "current.csv",
              [f"theta_{k}" for k in range(m)] + [f"J_{k}" for k in range(m)] + [f"analytic_{k}" for k in range(m)],
              centers + [stats.current[:, k] for k in range(m)] + [J_ref[:, k] for k in range(m)])
    cost, cost_se = simulate.pathwise_cost(stats)
    summary = {
        "T_accumulated": stats.T_acc,
        "n_traj": stats.n_traj,
        "cost": cost.as_dict(),
        "cost_stderr": cost_se,
        "winding": {str(k): dict(zip(("rate", "stderr"), simulate.winding_rate(stats, k))) for k in range(m)},
        "gauge_correction": dict(zip(("mean", "stderr"), simulate.gauge_correction(stats))),
        "config": dataclasses.asdict(cfg.sim),
    }
    if checks is not None:
        summary["checks"] = checks
        summary["within_3sigma"] = all(c["within_3sigma"] for c in checks.values())
    _dump(out / "mc_summary.json", summary)


def _sigma_check(estimate, stderr, target, atol: float = 1e-8) -> dict:
    # atol covers quantities that are zero up to discretisation error and have no variance
    within = abs(estimate - target) <= 3.0 * stderr + atol
    return {"estimate": estimate, "stderr": stderr, "target": target, "within_3sigma": bool(within)}


def compare(cfg: RunConfig, stats: simulate.TrajectoryStats, result: solvers.SolveResult) -> dict:
    """Monte Carlo estimates against the solver's analytic values."""
    disc, spec = cfg.disc, cfg.spec
    l1 = simulate.density_l1_error(stats, disc, result.rho)
    checks = {"density_l1": {"estimate": l1, "threshold": DENSITY_L1_TOL, "within_3sigma": bool(l1 < DENSITY_L1_TOL)}}
    cost, cost_se = simulate.pathwise_cost(stats)
    checks["cost"] = _sigma_check(cost.total, cost_se["total"], result.cost.total)
    if spec.variant == solvers.UNCONSTRAINED:
        checks["cost_eigenvalue"] = _sigma_check(cost.total, cost_se["total"], -result.mu / spec.lam)
    flat = disc.grid.kind == "circle" or np.allclose(disc.metric.g, disc.metric.g[0])
    if flat:
        for k in range(disc.m):
            if disc.m == 1:
                A_h = solvers.harmonic_gauge(disc, [(0.0, 1.0)])
            else:
                A_h = solvers.harmonic_gauge(disc, tuple(np.eye(2, dtype=int)[k]))
            rate, se = simulate.winding_rate(stats, k)
            checks[f"winding_{k}"] = _sigma_check(rate, se, control.flux(disc, A_h, result.J))
    return checks


def _solve(cfg: RunConfig) -> solvers.SolveResult:
    return solvers.solve(cfg.spec)


def cmd_solve(cfg, out):
    result = _solve(cfg)
    write_solution(out, cfg, result)
    return 0


def cmd_simulate(cfg, out, with_checks=False):
    if cfg.sim is None:
        raise ConfigError([("simulation", "a simulation block is required")])
    result = _solve(cfg)
    write_solution(out, cfg, result)
    stats = simulate.simulate(cfg.disc, cfg.spec, result.u, cfg.sim)
    checks = compare(cfg, stats, result) if with_checks else None
    write_simulation(out, cfg, stats, result, checks)
    if with_checks and not all(c["within_3sigma"] for c in checks.values()):
        return EXIT_CHECK
    return 0


def cmd_closed_form(cfg, out):
    disc, spec = cfg.disc, cfg.spec
    if disc.grid.kind != "circle" or not np.allclose(disc.metric.g, 1.0):
        raise ConfigError([("manifold", "the closed form is available on the flat circle only")])
    if spec.variant != solvers.FIXED_DENSITY:
        raise ConfigError([("problem.variant", "closed-form needs a fixed_density problem")])
    k = float(cfg.closed_form.get("k", 1.0))
    phi = solvers.circle_fixed_density_closed_form(spec.rho, k, spec.lam)
    U = np.zeros(disc.n)
    if "U" in cfg.closed_form:
        U = scalar_field(disc, cfg.closed_form["U"], cfg.base_dir)
    oracle = -(np.log(spec.rho) + U - phi) / (2.0 * spec.lam)
    oracle -= oracle.mean()
    result = solvers.solve_fixed_density(spec)
    write_csv(out / "closed_form.csv", ["theta", "rho", "phi", "Phi_closed_form", "Phi_solver"],
              [disc.grid.nodes[:, 0], spec.rho, phi, oracle, result.potential])
    _dump(out / "diagnostics.json", {"k": k, "max_abs_difference": float(np.max(np.abs(oracle - result.potential))),
                                     "versions": _versions(), "config": cfg.raw})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ergocontrol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "simulate", "verify", "closed-form"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    try:
        cfg = load_config(args.config, seed=args.seed, threads=args.threads)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "verify":
            return cmd_simulate(cfg, out, with_checks=True)
        return cmd_closed_form(cfg, out)
    except ConfigError as exc:
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "error.json", {"kind": "config", "errors": [{"field": k, "message": v} for k, v in exc.errors]})
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except solvers.SolverError as exc:
        _dump(out / "error.json", {"kind": "solver", "message": str(exc), "history": exc.history})
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except simulate.SimulationError as exc:
        _dump(out / "error.json", {"kind": "simulation", "message": str(exc), "step": exc.step})
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
