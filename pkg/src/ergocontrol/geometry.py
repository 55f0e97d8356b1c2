"""Periodic grids on S^1 and T^2 and the discrete exterior calculus built on them.

Layout
------
Scalar fields (0-forms) live on the ``N`` grid nodes.  A one-form is stored as
an ``(N, m)`` array whose entry ``[n, k]`` is the covariant component along the
edge leaving node ``n`` in direction ``k``; it is a sample at the edge midpoint
``x_n + h_k e_k / 2``.  With this staggering the forward difference is a
second-order exterior derivative and its metric adjoint is a compact stencil,
so the Laplace-Beltrami matrix has the constants as its only null vectors.

The metric inner product of one-forms uses a corner quadrature: around every
node the ``2^m`` combinations of adjacent edges (one per axis) are contracted
with the nodal inverse metric and averaged.  The resulting mass matrix ``M1``
is symmetric positive definite, and ``M1[w]`` (the same quadrature with an
extra nodal weight ``w``) is linear in ``w``.  All products ``w * omega`` of a
0-form with a 1-form are defined through it, which keeps every discrete
integration-by-parts identity exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

KINDS = ("circle", "torus")
MIN_SIZE = 8


class GeometryError(ValueError):
    """Raised for invalid grids, metrics or field shapes."""


@dataclass(frozen=True)
class Grid:
    kind: str
    shape: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * np.pi / np.asarray(self.shape, dtype=float)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.arange(n) * (2.0 * np.pi / n) for n in self.shape)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node angles, shape ``(N, m)``, flattened in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([c.ravel() for c in mesh], axis=-1)

    def edge_midpoints(self, axis: int) -> np.ndarray:
        pts = self.nodes.copy()
        pts[:, axis] += 0.5 * self.spacing[axis]
        return pts

    def shift(self, offset) -> np.ndarray:
        """Index of node ``n + offset`` (periodic) for every node ``n``."""
        idx = np.arange(self.n_nodes).reshape(self.shape)
        for axis, s in enumerate(offset):
            if s:
                idx = np.roll(idx, -int(s), axis=axis)
        return idx.ravel()


@dataclass(frozen=True)
class Metric:
    """Nodal metric tensor with its derived quantities."""

    g: np.ndarray  # (N, m, m)
    ginv: np.ndarray
    sqrtg: np.ndarray  # (N,)
    christoffel: np.ndarray  # (N, m, m, m), index [n, k, i, j] -> Gamma^k_ij

    @property
    def is_diagonal(self) -> bool:
        m = self.g.shape[-1]
        off = ~np.eye(m, dtype=bool)
        return not np.any(self.g[:, off])


def _check_size(kind: str, shape) -> tuple[int, ...]:
    if kind not in KINDS:
        raise GeometryError(f"unknown manifold kind {kind!r}; expected one of {KINDS}")
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    expected = 1 if kind == "circle" else 2
    if len(shape) != expected:
        raise GeometryError(f"{kind} needs {expected} size(s), got {shape}")
    if min(shape) < MIN_SIZE:
        raise GeometryError(f"grid sizes must be >= {MIN_SIZE}, got {shape}")
    return shape


def _centered_derivative(grid: Grid, values: np.ndarray, axis: int) -> np.ndarray:
    fwd = values[grid.shift(np.eye(grid.dim, dtype=int)[axis])]
    bwd = values[grid.shift(-np.eye(grid.dim, dtype=int)[axis])]
    return (fwd - bwd) / (2.0 * grid.spacing[axis])


def _christoffel(grid: Grid, g: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    m = grid.dim
    # dg[n, l, i, j] = d_l g_ij
    dg = np.stack([_centered_derivative(grid, g, axis) for axis in range(m)], axis=1)
    # Gamma_{l ij} = (d_i g_jl + d_j g_il - d_l g_ij) / 2
    lower = 0.5 * (
        np.einsum("nijl->nlij", dg) + np.einsum("njil->nlij", dg) - dg
    )
    return np.einsum("nkl,nlij->nkij", ginv, lower)


def build_grid(kind: str, sizes, metric_samples=None) -> tuple[Grid, Metric]:
    """Build a periodic grid and precompute the metric data at its nodes.

    ``metric_samples`` may be ``None`` (flat), an array of shape ``(N,)`` for the
    circle, ``(N, m, m)``, or a callable mapping node angles ``(N, m)`` to either.
    """
    grid = Grid(kind, _check_size(kind, sizes))
    m, n = grid.dim, grid.n_nodes
    if metric_samples is None:
        g = np.broadcast_to(np.eye(m), (n, m, m)).copy()
    else:
        if callable(metric_samples):
            metric_samples = metric_samples(grid.nodes)
        g = np.asarray(metric_samples, dtype=float)
        if g.shape == (n,) and m == 1:
            g = g.reshape(n, 1, 1)
        if g.shape != (n, m, m):
            raise GeometryError(f"metric samples have shape {g.shape}, expected {(n, m, m)}")
    if not np.all(np.isfinite(g)):
        bad = int(np.argwhere(~np.isfinite(g).reshape(n, -1).all(axis=1))[0, 0])
        raise GeometryError(f"metric sample at node {bad} is not finite")
    asym = np.abs(g - np.swapaxes(g, 1, 2)).max(axis=(1, 2))
    if np.any(asym > 1e-12 * (1.0 + np.abs(g).max())):
        raise GeometryError(f"metric sample at node {int(np.argmax(asym))} is not symmetric")
    eig = np.linalg.eigvalsh(g)
    if np.any(eig[:, 0] <= 0.0):
        bad = int(np.argmax(eig[:, 0] <= 0.0))
        raise GeometryError(f"metric sample at node {bad} is not positive definite")
    ginv = np.linalg.inv(g)
    sqrtg = np.sqrt(np.linalg.det(g))
    metric = Metric(g=g, ginv=ginv, sqrtg=sqrtg, christoffel=_christoffel(grid, g, ginv))
    return grid, metric


def raise_index(metric: Metric, omega: np.ndarray) -> np.ndarray:
    """Nodal covariant components -> contravariant components."""
    return np.einsum("nij,nj->ni", metric.ginv, omega)


def lower_index(metric: Metric, vec: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", metric.g, vec)


@dataclass
class Discretization:
    """Sparse matrices of the discrete exterior calculus on one grid/metric pair.

    Immutable after construction; matrices are built lazily and cached.
    """

    grid: Grid
    metric: Metric

    # -- sizes and basic weights -------------------------------------------------
    @property
    def n(self) -> int:
        return self.grid.n_nodes

    @property
    def m(self) -> int:
        return self.grid.dim

    @cached_property
    def vol(self) -> np.ndarray:
        """Nodal quadrature weights ``sqrt|g| * prod(h)``."""
        return self.metric.sqrtg * self.grid.cell_volume

    @cached_property
    def M0(self) -> sp.dia_matrix:
        return sp.diags(self.vol)

    @cached_property
    def D(self) -> sp.csr_matrix:
        """Exterior derivative, shape ``(m*N, N)``; edge ``(n, k)`` has row ``k*N + n``."""
        n, grid = self.n, self.grid
        blocks = []
        for k in range(self.m):
            h = grid.spacing[k]
            fwd = grid.shift(np.eye(self.m, dtype=int)[k])
            rows = np.concatenate([np.arange(n), np.arange(n)])
            cols = np.concatenate([np.arange(n), fwd])
            vals = np.concatenate([-np.ones(n), np.ones(n)]) / h
            blocks.append(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))
        return sp.vstack(blocks, format="csr")

    @cached_property
    def _corner_edges(self) -> list[list[np.ndarray]]:
        """For each corner, the flat edge index used on each axis at every node."""
        n, m = self.n, self.m
        corners = []
        for signs in itertools.product((0, 1), repeat=m):
            sel = []
            for k, s in enumerate(signs):
                src = np.arange(n) if s else self.grid.shift(-np.eye(m, dtype=int)[k])
                sel.append(k * n + src)
            corners.append(sel)
        return corners

    def mass1(self, weight=None) -> sp.csr_matrix:
        """Corner-quadrature one-form mass matrix, optionally with a nodal weight."""
        n, m = self.n, self.m
        w = self.vol if weight is None else self.vol * np.asarray(weight, dtype=float)
        scale = 2.0 ** (-m)
        rows, cols, vals = [], [], []
        for sel in self._corner_edges:
            for k in range(m):
                for l in range(m):
                    coef = scale * self.metric.ginv[:, k, l] * w
                    if not np.any(coef):
                        continue
                    rows.append(sel[k])
                    cols.append(sel[l])
                    vals.append(coef)
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m * n, m * n),
        )
        return mat.tocsr()

    @cached_property
    def M1(self) -> sp.csr_matrix:
        return self.mass1()

    @cached_property
    def _M1_solver(self):
        return _mass_solver(self.M1)

    @cached_property
    def codiff_matrix(self) -> sp.csr_matrix:
        """delta = M0^{-1} D^T M1, the exact adjoint of ``D``."""
        return (sp.diags(1.0 / self.vol) @ self.D.T @ self.M1).tocsr()

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return (-(self.codiff_matrix @ self.D)).tocsr()

    # -- conversions between (N, m) arrays and flat edge vectors -----------------
    def flat(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if omega.ndim == 0 or omega.shape == (self.m,):
            # constant components
            omega = np.broadcast_to(omega, (self.n, self.m))
        elif omega.shape == (self.n,) and self.m == 1:
            omega = omega[:, None]
        if omega.shape != (self.n, self.m):
            raise GeometryError(f"one-form has shape {omega.shape}, expected {(self.n, self.m)}")
        return omega.T.ravel()

    def unflat(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec).reshape(self.m, self.n).T.copy()

    def scalar(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.ndim == 0:
            return np.full(self.n, float(phi))
        if phi.shape != (self.n,):
            raise GeometryError(f"scalar field has shape {phi.shape}, expected {(self.n,)}")
        return phi

    # -- calculus ---------------------------------------------------------------
    def d0(self, phi) -> np.ndarray:
        return self.unflat(self.D @ self.scalar(phi))

    def codifferential(self, omega) -> np.ndarray:
        return self.codiff_matrix @ self.flat(omega)

    def laplace_beltrami(self, phi) -> np.ndarray:
        return self.laplacian @ self.scalar(phi)

    def inner0(self, a, b) -> float:
        return float(np.dot(self.scalar(a) * self.vol, self.scalar(b)))

    def inner1(self, a, b) -> float:
        return float(self.flat(a) @ (self.M1 @ self.flat(b)))

    def integrate(self, a) -> float:
        return float(np.dot(self.scalar(a), self.vol))

    @property
    def volume(self) -> float:
        return float(self.vol.sum())

    def pointwise(self, a, b) -> np.ndarray:
        """Nodal inner product <a, b>_g, with ``integrate(pointwise(a, b)) == inner1(a, b)``."""
        fa, fb = self.flat(a), self.flat(b)
        out = np.zeros(self.n)
        for sel in self._corner_edges:
            for k in range(self.m):
                for l in range(self.m):
                    out += self.metric.ginv[:, k, l] * fa[sel[k]] * fb[sel[l]]
        return out * 2.0 ** (-self.m)

    def pointwise_matrix(self, b) -> sp.csr_matrix:
        """Matrix of ``a -> pointwise(a, b)``, shape ``(N, m*N)``."""
        fb = self.flat(b)
        rows, cols, vals = [], [], []
        for sel in self._corner_edges:
            for k in range(self.m):
                for l in range(self.m):
                    rows.append(np.arange(self.n))
                    cols.append(sel[k])
                    vals.append(2.0 ** (-self.m) * self.metric.ginv[:, k, l] * fb[sel[l]])
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.m * self.n),
        ).tocsr()

    def norm2(self, a) -> np.ndarray:
        return self.pointwise(a, a)

    def multiply(self, w, omega) -> np.ndarray:
        """One-form ``w * omega`` for a nodal scalar ``w``: ``M1^{-1} M1[w] omega``."""
        rhs = self.mass1(self.scalar(w)) @ self.flat(omega)
        return self.unflat(self._M1_solver(rhs))

    def divide(self, w, omega) -> np.ndarray:
        """Inverse of :meth:`multiply`; requires ``w > 0`` at every node."""
        w = self.scalar(w)
        if np.any(w <= 0.0):
            raise GeometryError(f"division by a non-positive field (node {int(np.argmin(w))})")
        rhs = self.M1 @ self.flat(omega)
        return self.unflat(_mass_solver(self.mass1(w))(rhs))

    def to_nodes(self, omega) -> np.ndarray:
        """Average the two edges adjacent to each node along every axis."""
        omega = self.unflat(self.flat(omega))
        out = np.empty_like(omega)
        for k in range(self.m):
            back = self.grid.shift(-np.eye(self.m, dtype=int)[k])
            out[:, k] = 0.5 * (omega[:, k] + omega[back, k])
        return out

    def curl(self, omega) -> np.ndarray:
        """Discrete circulation density per cell (torus only); zero for exact forms."""
        if self.m != 2:
            raise GeometryError("curl is defined on the torus only")
        w = self.unflat(self.flat(omega))
        hx, hy = self.grid.spacing
        ex, ey = np.eye(2, dtype=int)
        return (
            (w[self.grid.shift(ex), 1] - w[:, 1]) / hx
            - (w[self.grid.shift(ey), 0] - w[:, 0]) / hy
        )

    def circulation(self, omega, axis: int) -> float:
        """Mean line integral of ``omega`` around the generator loops along ``axis``."""
        w = self.unflat(self.flat(omega))[:, axis].reshape(self.grid.shape)
        return float(np.mean(w.sum(axis=axis)) * self.grid.spacing[axis])


def _mass_solver(mat: sp.csr_matrix):
    diag = mat.diagonal()
    if (mat - sp.diags(diag)).count_nonzero() == 0:
        inv = 1.0 / diag
        return lambda rhs: inv * rhs
    return spla.factorized(mat.tocsc())


def discretize(grid: Grid, metric: Metric) -> Discretization:
    return Discretization(grid, metric)
