"""JSON run configuration: manifold, field presets, problem variant, simulation block.

Scalar field presets
    ``{"preset": "zero"}``, ``{"preset": "constant", "value": c}``,
    ``{"preset": "cos" | "sin", "amplitude": a, "frequency": k, "axis": i, "offset": c}``,
    ``{"preset": "csv", "path": p}``, ``{"preset": "sum", "terms": [...]}``.
    Any scalar spec may carry ``"normalize": true`` to rescale it to unit integral.
One-form presets
    ``zero``, ``{"preset": "constant_one_form", "c": [c0, c1]}``,
    ``{"preset": "gradient_of", "U": <scalar spec>, "scale": s}`` (discrete ``s dU``),
    ``{"preset": "harmonic", "cycle": [[angle, mult], ...] | [p, q]}``,
    ``{"preset": "components", "components": [<scalar spec>, ...]}`` (sampled at edge midpoints),
    ``csv`` and ``sum`` as above.
Metric presets
    ``flat``; ``{"preset": "warped", "base": b, "amplitude": a}`` giving
    ``(b + a cos theta)^2`` on the circle and ``(b + a cos theta1 cos theta2)^2 I`` on the torus;
    ``{"preset": "csv", "path": p}`` with ``m*m`` value columns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Discretization, GeometryError, build_grid, discretize
from .simulate import SimConfig
from .solvers import FIXED_CURRENT, FIXED_DENSITY, VARIANTS, ProblemSpec, harmonic_gauge


class ConfigError(ValueError):
    """Invalid run configuration; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.errors))


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    disc: Discretization
    spec: ProblemSpec
    sim: SimConfig | None = None
    closed_form: dict = field(default_factory=dict)


# -- CSV ------------------------------------------------------------------------------


def read_field_csv(path: Path, shape: tuple[int, ...], ncols: int) -> np.ndarray:
    """Read ``index columns + ncols value columns``; rows may come in any order."""
    text = Path(path).read_text().splitlines()
    rows = [line for line in text if line.strip()]
    try:
        float(rows[0].split(",")[0])
    except ValueError:
        rows = rows[1:]
    data = np.array([[float(v) for v in line.split(",")] for line in rows], dtype=float)
    m = len(shape)
    if data.ndim != 2 or data.shape[1] != m + ncols:
        raise ConfigError([(str(path), f"expected {m} index and {ncols} value columns")])
    idx = data[:, :m].astype(int)
    flat = np.ravel_multi_index(tuple(idx.T), shape, mode="raise") if m > 1 else idx[:, 0]
    n = int(np.prod(shape))
    if data.shape[0] != n or len(np.unique(flat)) != n or flat.min() < 0 or flat.max() >= n:
        raise ConfigError([(str(path), f"rows do not cover the {n} grid nodes exactly once")])
    out = np.empty((n, ncols))
    out[flat] = data[:, m:]
    return out


def write_csv(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17e")


# -- presets ----------------------------------------------------------------------------


def _resolve(base_dir: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


def scalar_field(disc: Discretization, spec, base_dir: Path, points=None) -> np.ndarray:
    pts = disc.grid.nodes if points is None else points
    if isinstance(spec, (int, float)):
        return np.full(len(pts), float(spec))
    name = spec.get("preset")
    if name == "zero":
        out = np.zeros(len(pts))
    elif name == "constant":
        out = np.full(len(pts), float(spec["value"]))
    elif name in ("cos", "sin"):
        axis = int(spec.get("axis", 0))
        if not 0 <= axis < disc.m:
            raise ConfigError([("axis", f"axis {axis} out of range")])
        fn = np.cos if name == "cos" else np.sin
        out = float(spec.get("offset", 0.0)) + float(spec.get("amplitude", 1.0)) * fn(
            float(spec.get("frequency", 1.0)) * pts[:, axis]
        )
    elif name == "sum":
        out = sum(scalar_field(disc, t, base_dir, points) for t in spec["terms"])
    elif name == "csv":
        if points is not None:
            raise ConfigError([("preset", "csv fields cannot be resampled at edge midpoints")])
        out = read_field_csv(_resolve(base_dir, spec["path"]), disc.grid.shape, 1)[:, 0]
    else:
        raise ConfigError([("preset", f"unknown scalar preset {name!r}")])
    if spec.get("normalize"):
        out = out / disc.integrate(out)
    return out


def one_form(disc: Discretization, spec, base_dir: Path) -> np.ndarray:
    if isinstance(spec, (int, float)):
        return np.full((disc.n, disc.m), float(spec))
    name = spec.get("preset")
    if name == "zero":
        return np.zeros((disc.n, disc.m))
    if name == "constant_one_form":
        c = np.atleast_1d(np.asarray(spec["c"], dtype=float))
        if c.size == 1:
            c = np.repeat(c, disc.m)
        if c.size != disc.m:
            raise ConfigError([("c", f"need {disc.m} components")])
        return np.tile(c, (disc.n, 1))
    if name == "gradient_of":
        U = scalar_field(disc, spec["U"], base_dir)
        return float(spec.get("scale", 1.0)) * disc.d0(U)
    if name == "harmonic":
        cycle = spec.get("cycle", [])
        if disc.grid.kind == "circle":
            cycle = [tuple(c) for c in cycle]
        return harmonic_gauge(disc, cycle)
    if name == "components":
        comps = spec["components"]
        if len(comps) != disc.m:
            raise ConfigError([("components", f"need {disc.m} components")])
        return np.column_stack(
            [scalar_field(disc, c, base_dir, disc.grid.edge_midpoints(k)) for k, c in enumerate(comps)]
        )
    if name == "sum":
        return sum(one_form(disc, t, base_dir) for t in spec["terms"])
    if name == "csv":
        return read_field_csv(_resolve(base_dir, spec["path"]), disc.grid.shape, disc.m)
    raise ConfigError([("preset", f"unknown one-form preset {name!r}")])


def metric_samples(kind: str, spec, base_dir: Path, shape):
    if spec is None or spec == "flat" or spec.get("preset") == "flat":
        return None
    name = spec.get("preset")
    if name == "warped":
        b, a = float(spec.get("base", 2.0)), float(spec.get("amplitude", 1.0))
        if kind == "circle":
            return lambda x: (b + a * np.cos(x[:, 0])) ** 2
        return lambda x: ((b + a * np.cos(x[:, 0]) * np.cos(x[:, 1])) ** 2)[:, None, None] * np.eye(2)
    if name == "csv":
        m = len(shape)
        vals = read_field_csv(_resolve(base_dir, spec["path"]), tuple(shape), m * m)
        return vals.reshape(-1, m, m)
    raise ConfigError([("metric", f"unknown metric preset {name!r}")])


# -- whole config ---------------------------------------------------------------------------


def load_config(path, *, seed: int | None = None, threads: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([("config", str(exc))]) from exc
    return parse_config(raw, path.parent, seed=seed, threads=threads)


def parse_config(raw: dict, base_dir: Path = Path("."), *, seed=None, threads=None) -> RunConfig:
    errors = []
    manifold = raw.get("manifold")
    if not isinstance(manifold, dict):
        raise ConfigError([("manifold", "missing manifold block")])
    kind = manifold.get("kind")
    sizes = manifold.get("sizes")
    lam = raw.get("lambda")
    if not isinstance(lam, (int, float)) or not lam > 0:
        errors.append(("lambda", f"must be a positive number, got {lam!r}"))
    problem = raw.get("problem", {"variant": "unconstrained"})
    variant = problem.get("variant") if isinstance(problem, dict) else None
    if variant not in VARIANTS:
        errors.append(("problem.variant", f"must be exactly one of {VARIANTS}, got {variant!r}"))
    if errors:
        raise ConfigError(errors)
    try:
        shape = [sizes] if isinstance(sizes, int) else list(sizes)
        grid, metric = build_grid(kind, shape, metric_samples(kind, manifold.get("metric"), base_dir, shape))
    except (GeometryError, TypeError) as exc:
        raise ConfigError([("manifold", str(exc))]) from exc
    disc = discretize(grid, metric)

    def field_or_error(name, fn, spec):
        try:
            return fn(disc, spec, base_dir)
        except (KeyError, TypeError, OSError, GeometryError) as exc:
            errors.append((name, f"invalid field specification: {exc}"))
        except ConfigError as exc:
            errors.extend((f"{name}.{k}", v) for k, v in exc.errors)
        except Exception as exc:  # noqa: BLE001 - report any preset failure as a config error
            errors.append((name, str(exc)))
        return None

    V = field_or_error("V", scalar_field, raw.get("V", {"preset": "zero"}))
    f = field_or_error("f", one_form, raw.get("f", {"preset": "zero"}))
    A = field_or_error("A", one_form, raw.get("A", {"preset": "zero"}))
    rho = J = None
    if variant == FIXED_DENSITY:
        if "rho" not in problem:
            errors.append(("problem.rho", "fixed_density needs a density"))
        else:
            rho = field_or_error("problem.rho", scalar_field, {**problem["rho"], "normalize": True})
    if variant == FIXED_CURRENT:
        if "J" not in problem:
            errors.append(("problem.J", "fixed_current needs a current"))
        else:
            J = field_or_error("problem.J", one_form, problem["J"])
    if errors:
        raise ConfigError(errors)
    solver = raw.get("solver", {})
    try:
        spec = ProblemSpec(disc, float(lam), V, f, A, variant=variant, rho=rho, J=J,
                           **{k: solver[k] for k in ("tol", "newton_tol", "eig_maxiter", "newton_maxiter") if k in solver})
    except (ValueError, TypeError) as exc:
        raise ConfigError([("problem", str(exc))]) from exc
    sim = None
    if "simulation" in raw:
        block = dict(raw["simulation"])
        if seed is not None:
            block["seed"] = seed
        if threads is not None:
            block["threads"] = threads
        try:
            sim = SimConfig(**block)
        except (ValueError, TypeError) as exc:
            raise ConfigError([("simulation", str(exc))]) from exc
    return RunConfig(raw, base_dir, disc, spec, sim, dict(raw.get("closed_form", {})))
