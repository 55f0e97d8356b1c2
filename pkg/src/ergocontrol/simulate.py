"""Euler-Maruyama simulation of the controlled diffusion with ergodic accumulators.

The Ito drift is ``g^{ij} b_j - g^{jk} Gamma^i_{jk} / 2`` and the noise factor the
symmetric square root of ``g^{ij}``, so the simulated generator is
``Lap/2 + <b, d .>``.  Fields are averaged from edges to nodes and interpolated
linearly (periodically) between nodes.  After the burn-in every step adds to:

* the occupation histogram (left point),
* the binned current (increment assigned to the bin of the step midpoint),
* state and control cost (left point),
* the gauge line integral, both midpoint (Stratonovich) and left point (Ito),
* winding counters (net wraps per axis).

Scalar accumulators are kept per batch for batch-means standard errors.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .control import CostBreakdown
from .geometry import Discretization

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
CHUNK = 1 << 20

# batch accumulator columns
STATE, CONTROL, GAUGE_STRAT, GAUGE_ITO, WIND0 = range(5)


class SimulationError(RuntimeError):
    """The trajectory left the finite range (blow-up)."""

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    T: float = 1e4
    burn_in: float | None = None
    seed: int = 0
    x0: tuple | None = None
    bins: int = 100
    n_traj: int = 1
    n_batches: int = 20
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T < 100 * self.dt:
            raise ValueError(f"horizon T={self.T} must be at least 100 dt")
        if self.bins < 16:
            raise ValueError(f"need at least 16 bins per axis, got {self.bins}")
        if self.n_traj < 1:
            raise ValueError("need at least one trajectory")
        if self.n_batches < 2:
            raise ValueError("need at least two batches for standard errors")
        if self.burn_in is not None and not 0 <= self.burn_in < self.T:
            raise ValueError("burn-in must lie in [0, T)")

    @property
    def burn(self) -> float:
        return 0.05 * self.T if self.burn_in is None else float(self.burn_in)


@dataclass(frozen=True)
class TrajectoryStats:
    kind: str
    bins: int
    T_acc: float  # accumulated time per trajectory
    n_traj: int
    density: np.ndarray  # (bins**m,), w.r.t. the Riemannian volume
    current: np.ndarray  # (bins**m, m), covariant
    current_contra: np.ndarray
    bin_centers: np.ndarray  # (bins**m, m)
    bin_volume: np.ndarray  # coordinate volume times sqrt|g| per bin
    batches: np.ndarray  # (n_traj * n_batches, 5 + m) per-unit-time batch means
    lam: float
    extras: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.current.shape[1]


# -- interpolation -------------------------------------------------------------------


def interpolate_nodal(shape, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Periodic (bi)linear interpolation of nodal values at angle ``points``."""
    shape = tuple(shape)
    m = len(shape)
    values = np.asarray(values, dtype=float)
    tail = values.shape[1:]
    grid_vals = values.reshape(shape + tail)
    points = np.atleast_2d(points)
    base, frac = [], []
    for k, n in enumerate(shape):
        s = np.mod(points[:, k], TWO_PI) * n / TWO_PI
        i = np.floor(s).astype(int)
        base.append(i % n)
        frac.append(s - i)
    out = np.zeros((points.shape[0],) + tail)
    for corner in range(2**m):
        idx, w = [], np.ones(points.shape[0])
        for k in range(m):
            bit = (corner >> k) & 1
            idx.append((base[k] + bit) % shape[k])
            w = w * (frac[k] if bit else 1.0 - frac[k])
        out += w.reshape((-1,) + (1,) * len(tail)) * grid_vals[tuple(idx)]
    return out


# -- compiled kernel ------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _interp(table, shape, x, col0, ncol, out):
    m = shape.shape[0]
    for c in range(ncol):
        out[c] = 0.0
    for corner in range(1 << m):
        w = 1.0
        flat = 0
        for k in range(m):
            n = shape[k]
            s = x[k] * n / (2.0 * math.pi)
            i = int(math.floor(s))
            t = s - i
            bit = (corner >> k) & 1
            j = (i + bit) % n
            if j < 0:
                j += n
            w *= t if bit else 1.0 - t
            flat = flat * n + j
        for c in range(ncol):
            out[c] += w * table[flat, col0 + c]


@numba.njit(cache=True, nogil=True)
def _bin_index(x, bins, m):
    flat = 0
    for k in range(m):
        b = int(x[k] * bins / (2.0 * math.pi))
        if b >= bins:
            b = bins - 1
        if b < 0:
            b = 0
        flat = flat * bins + b
    return flat


@numba.njit(cache=True, nogil=True)
def _run_chunk(x, noise, dt, table, shape, step0, burn_steps, batch_len, n_batches,
               bins, hist, cur, batches):
    """Advance ``x`` (in place) through ``len(noise)`` steps; return -1 or the failing step."""
    m = shape.shape[0]
    # table columns: drift (m) | sigma (m*m) | A (m) | V | control cost
    c_sig = m
    c_A = m + m * m
    c_V = c_A + m
    ncol = c_V + 2
    vals = np.empty(ncol)
    amid = np.empty(m)
    dx = np.empty(m)
    mid = np.empty(m)
    sqdt = math.sqrt(dt)
    for s in range(noise.shape[0]):
        step = step0 + s
        _interp(table, shape, x, 0, ncol, vals)
        for i in range(m):
            acc = vals[i] * dt
            for j in range(m):
                acc += vals[c_sig + i * m + j] * sqdt * noise[s, j]
            dx[i] = acc
            mid[i] = x[i] + 0.5 * acc
        ok = True
        for i in range(m):
            if not math.isfinite(dx[i]):
                ok = False
        if not ok:
            return step
        for i in range(m):
            mid[i] = mid[i] - 2.0 * math.pi * math.floor(mid[i] / (2.0 * math.pi))
        record = step >= burn_steps
        if record:
            b = (step - burn_steps) // batch_len
            if b >= n_batches:
                b = n_batches - 1
            hb = _bin_index(x, bins, m)
            hist[hb] += dt
            mb = _bin_index(mid, bins, m)
            _interp(table, shape, mid, c_A, m, amid)
            strat = 0.0
            ito = 0.0
            for i in range(m):
                cur[mb, i] += dx[i]
                strat += amid[i] * dx[i]
                ito += vals[c_A + i] * dx[i]
            batches[b, 0] += vals[c_V] * dt
            batches[b, 1] += vals[c_V + 1] * dt
            batches[b, 2] += strat
            batches[b, 3] += ito
        for i in range(m):
            xn = x[i] + dx[i]
            k = math.floor(xn / (2.0 * math.pi))
            x[i] = xn - 2.0 * math.pi * k
            if x[i] >= 2.0 * math.pi:  # rounding at the upper edge
                x[i] -= 2.0 * math.pi
                k += 1
            if record:
                batches[b, 4 + i] += k
    return -1


# -- driver ----------------------------------------------------------------------------


def _spd_sqrt(mats: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mats)
    return np.einsum("nij,nj,nkj->nik", v, np.sqrt(w), v)


def _field_table(disc: Discretization, lam: float, b, u, A, V) -> np.ndarray:
    metric = disc.metric
    b_nodes = disc.to_nodes(b)
    trace = np.einsum("njk,nijk->ni", metric.ginv, metric.christoffel)
    drift = np.einsum("nij,nj->ni", metric.ginv, b_nodes) - 0.5 * trace
    sigma = _spd_sqrt(metric.ginv).reshape(disc.n, -1)
    A_nodes = disc.to_nodes(A)
    u_nodes = disc.to_nodes(u)
    ctrl = np.einsum("ni,nij,nj->n", u_nodes, metric.ginv, u_nodes) / (2.0 * lam)
    return np.ascontiguousarray(np.column_stack([drift, sigma, A_nodes, disc.scalar(V), ctrl]))


def _trajectory(table, shape, cfg: SimConfig, index: int, x0):
    m = len(shape)
    n_steps = int(round(cfg.T / cfg.dt))
    burn_steps = int(round(cfg.burn / cfg.dt))
    batch_len = max(1, (n_steps - burn_steps) // cfg.n_batches)
    nb = cfg.bins**m
    hist = np.zeros(nb)
    cur = np.zeros((nb, m))
    batches = np.zeros((cfg.n_batches, 4 + m))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, index])))
    x = np.array(x0, dtype=float) % TWO_PI
    shape_arr = np.asarray(shape, dtype=np.int64)
    step = 0
    while step < n_steps:
        k = min(CHUNK, n_steps - step)
        noise = rng.standard_normal((k, m))
        bad = _run_chunk(x, noise, cfg.dt, table, shape_arr, step, burn_steps, batch_len,
                         cfg.n_batches, cfg.bins, hist, cur, batches)
        if bad >= 0:
            raise SimulationError(f"non-finite state at step {bad} of trajectory {index}", bad)
        step += k
    # per-batch time for normalisation
    acc_steps = n_steps - burn_steps
    lengths = np.full(cfg.n_batches, batch_len, dtype=float)
    lengths[-1] = acc_steps - batch_len * (cfg.n_batches - 1)
    return hist, cur, batches / (lengths[:, None] * cfg.dt), acc_steps * cfg.dt


def simulate(disc: Discretization, spec, u, cfg: SimConfig) -> TrajectoryStats:
    """Simulate under control ``u`` for the problem data ``spec`` (``lam, V, f, A``)."""
    u = disc.unflat(disc.flat(u))
    if not np.all(np.isfinite(u)):
        raise ValueError("control contains non-finite values")
    b = disc.unflat(disc.flat(spec.f)) + u
    table = _field_table(disc, spec.lam, b, u, spec.A, spec.V)
    shape = disc.grid.shape
    m = len(shape)
    max_drift = float(np.max(np.abs(table[:, :m])))
    if cfg.dt * max_drift > float(disc.grid.spacing.min()):
        warnings.warn(f"dt * max drift = {cfg.dt * max_drift:.3g} exceeds the grid spacing",
                      RuntimeWarning, stacklevel=2)
    x0 = np.zeros(m) if cfg.x0 is None else np.broadcast_to(np.asarray(cfg.x0, dtype=float), (m,))

    def run(i):
        return _trajectory(table, shape, cfg, i, x0)

    if cfg.threads > 1 and cfg.n_traj > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(run, range(cfg.n_traj)))
    else:
        parts = [run(i) for i in range(cfg.n_traj)]

    # deterministic merge in trajectory order
    hist = sum(p[0] for p in parts)
    cur = sum(p[1] for p in parts)
    batches = np.concatenate([p[2] for p in parts])
    T_acc = parts[0][3]
    return _finish(disc, cfg, spec.lam, hist, cur, batches, T_acc)


def _finish(disc, cfg, lam, hist, cur, batches, T_acc) -> TrajectoryStats:
    shape = disc.grid.shape
    m = len(shape)
    width = TWO_PI / cfg.bins
    axis = (np.arange(cfg.bins) + 0.5) * width
    mesh = np.meshgrid(*([axis] * m), indexing="ij")
    centers = np.stack([c.ravel() for c in mesh], axis=-1)
    sqrtg = interpolate_nodal(shape, disc.metric.sqrtg, centers)
    g = interpolate_nodal(shape, disc.metric.g.reshape(disc.n, -1), centers).reshape(-1, m, m)
    bin_volume = sqrtg * width**m
    total_time = T_acc * cfg.n_traj
    density = hist / hist.sum() / bin_volume
    contra = cur / (total_time * bin_volume[:, None])
    covariant = np.einsum("nij,nj->ni", g, contra)
    return TrajectoryStats(
        kind=disc.grid.kind, bins=cfg.bins, T_acc=T_acc, n_traj=cfg.n_traj,
        density=density, current=covariant, current_contra=contra,
        bin_centers=centers, bin_volume=bin_volume, batches=batches, lam=lam,
    )


# -- estimators ------------------------------------------------------------------------


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size))


def empirical_current(stats: TrajectoryStats) -> np.ndarray:
    """Binned covariant current, shape ``(bins**m, m)``."""
    return stats.current


def winding_rate(stats: TrajectoryStats, generator_index: int) -> tuple[float, float]:
    """Net signed wraps per unit time around the given generator, with standard error."""
    if not 0 <= generator_index < stats.dim:
        raise ValueError(f"{stats.kind} has no generator {generator_index}")
    return _mean_se(stats.batches[:, WIND0 + generator_index])


def pathwise_cost(stats: TrajectoryStats) -> tuple[CostBreakdown, dict]:
    """Time-average cost (Stratonovich gauge term) and standard errors of each part and the total."""
    b = stats.batches
    names = ("state", "control", "gauge")
    parts = [_mean_se(b[:, c]) for c in (STATE, CONTROL, GAUGE_STRAT)]
    errors = {name: se for name, (_, se) in zip(names, parts)}
    errors["total"] = _mean_se(b[:, STATE] + b[:, CONTROL] + b[:, GAUGE_STRAT])[1]
    return CostBreakdown(*(mean for mean, _ in parts)), errors


def gauge_correction(stats: TrajectoryStats) -> tuple[float, float]:
    """Mean Stratonovich minus Ito gauge increment per unit time, with standard error."""
    return _mean_se(stats.batches[:, GAUGE_STRAT] - stats.batches[:, GAUGE_ITO])


def density_l1_error(stats: TrajectoryStats, disc: Discretization, rho) -> float:
    """``sum |hist - rho| * bin volume`` with ``rho`` interpolated to bin centres."""
    ref = interpolate_nodal(disc.grid.shape, disc.scalar(rho), stats.bin_centers)
    return float(np.sum(np.abs(stats.density - ref) * stats.bin_volume))


def current_l1_error(stats: TrajectoryStats, disc: Discretization, J) -> float:
    """``sum ||J_emp - J||_1 * bin volume`` against the grid current at bin centres."""
    ref = interpolate_nodal(disc.grid.shape, disc.to_nodes(J), stats.bin_centers)
    return float(np.sum(np.abs(stats.current - ref).sum(axis=1) * stats.bin_volume))
