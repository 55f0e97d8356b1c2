"""Generators, their adjoints and the potentials entering the eigenvalue problems."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import Discretization

log = logging.getLogger(__name__)

GAUGE_W = "gauge-W"
YERMAKOV_W = "yermakov-W"


class VariantMismatch(ValueError):
    """A potential of one kind was handed to a solver expecting the other."""


@dataclass(frozen=True)
class GeneratorMatrix:
    matrix: sp.csr_matrix
    drift: np.ndarray | None = None
    adjoint: bool = False

    def __matmul__(self, other):
        return self.matrix @ other

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


@dataclass(frozen=True)
class PotentialField:
    values: np.ndarray
    variant: str

    def __post_init__(self):
        if self.variant not in (GAUGE_W, YERMAKOV_W):
            raise ValueError(f"unknown potential variant {self.variant!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("potential contains non-finite values")

    def require(self, variant: str) -> np.ndarray:
        if self.variant != variant:
            raise VariantMismatch(f"expected a {variant} potential, got {self.variant}")
        return self.values


def cell_peclet(disc: Discretization, b) -> float:
    """``h * max ||b||_g / (1/2)``; the centered drift loses positivity above 2."""
    norm = np.sqrt(np.max(disc.norm2(b)))
    return float(2.0 * disc.grid.spacing.max() * norm)


def assemble_generator(disc: Discretization, b, *, check_peclet: bool = True) -> GeneratorMatrix:
    """Matrix of ``phi -> 1/2 Lap(phi) + <b, d phi>``."""
    b = disc.unflat(disc.flat(b))
    if check_peclet:
        pe = cell_peclet(disc, b)
        if pe >= 2.0:
            warnings.warn(
                f"cell Peclet number {pe:.3g} >= 2: refine the grid, the discrete "
                "stationary density may lose positivity",
                RuntimeWarning,
                stacklevel=2,
            )
    mat = 0.5 * disc.laplacian + disc.pointwise_matrix(b) @ disc.D
    return GeneratorMatrix(mat.tocsr(), drift=b)


def assemble_adjoint(disc: Discretization, gen: GeneratorMatrix) -> GeneratorMatrix:
    """``L* = M0^{-1} L^T M0``, the adjoint with respect to ``inner0``."""
    mat = sp.diags(1.0 / disc.vol) @ gen.matrix.T @ disc.M0
    return GeneratorMatrix(mat.tocsr(), drift=gen.drift, adjoint=True)


def assemble_gauge_W(disc: Discretization, lam: float, V, f, A) -> PotentialField:
    """Nodewise ``lam V + lam <f, A> - lam^2 ||A||^2 / 2 - lam delta(A) / 2``."""
    _check_lambda(lam)
    w = (
        lam * disc.scalar(V)
        + lam * disc.pointwise(f, A)
        - 0.5 * lam**2 * disc.norm2(A)
        - 0.5 * lam * disc.codifferential(A)
    )
    return PotentialField(w, GAUGE_W)


def assemble_yermakov_W(disc: Discretization, lam: float, V, f) -> PotentialField:
    """Nodewise ``lam V + ||f||^2 / 2 - delta(f) / 2``."""
    _check_lambda(lam)
    w = lam * disc.scalar(V) + 0.5 * disc.norm2(f) - 0.5 * disc.codifferential(f)
    return PotentialField(w, YERMAKOV_W)


def gauge_reduce(disc: Discretization, lam: float, V, f, A):
    """Fold the gauge field into force and potential.

    Returns ``(f - lam A, V + <f, A> - lam ||A||^2 / 2 - delta(A) / 2)``; the
    reduced problem has no gauge field and its optimal control ``u_red`` maps
    back through ``u = u_red - lam A``.
    """
    _check_lambda(lam)
    f = disc.unflat(disc.flat(f))
    A = disc.unflat(disc.flat(A))
    f_red = f - lam * A
    V_red = (
        disc.scalar(V)
        + disc.pointwise(f, A)
        - 0.5 * lam * disc.norm2(A)
        - 0.5 * disc.codifferential(A)
    )
    return f_red, V_red


def _link_integrals(disc: Discretization, A, rows, cols) -> np.ndarray:
    """Line integral of ``A`` from node ``rows`` to node ``cols`` along lattice edges.

    Axis neighbours use the connecting edge; diagonal neighbours average the two
    L-shaped paths.  Exact one-forms ``d phi`` integrate to ``phi[cols] - phi[rows]``.
    """
    grid = disc.grid
    a = disc.unflat(disc.flat(A)) * grid.spacing  # edge line integrals
    coords = np.stack(np.unravel_index(np.arange(disc.n), grid.shape), axis=-1)
    shape = np.asarray(grid.shape)
    step = (coords[cols] - coords[rows] + shape // 2) % shape - shape // 2
    if np.any(np.abs(step) > 1):
        raise ValueError("operator stencil reaches beyond nearest neighbours")

    def walk(start, order):
        total = np.zeros(len(start))
        node = start.copy()
        for k in order:
            s = step[:, k]
            fwd = s > 0
            bwd = s < 0
            total[fwd] += a[node[fwd], k]
            prev = grid.shift(-np.eye(grid.dim, dtype=int)[k])
            total[bwd] -= a[prev[node[bwd]], k]
            node = np.where(fwd, grid.shift(np.eye(grid.dim, dtype=int)[k])[node], node)
            node = np.where(bwd, prev[node], node)
        return total

    if grid.dim == 1:
        return walk(rows, [0])
    return 0.5 * (walk(rows, [0, 1]) + walk(rows, [1, 0]))


def assemble_gauge_hamiltonian(disc: Discretization, lam: float, V, f, A):
    """Gauge-covariant lattice form of ``H - W`` for the unconstrained problem.

    Starting from ``K0 = L_f - lam V`` (no gauge field), every off-diagonal
    entry is multiplied by the link factor ``exp(-lam * int_i^j A)``.  The result
    ``K`` splits as ``H - diag(W)`` with ``H`` a generator (zero row sums, same
    stencil as ``L_{-lam A}``) and ``W`` the lattice gauge potential.  Both agree
    with the nodewise ``L_{-lam A}`` and :func:`assemble_gauge_W` to second
    order, and ``A -> A + d phi`` acts exactly as conjugation by ``exp(lam phi)``.
    """
    _check_lambda(lam)
    K0 = (assemble_generator(disc, f).matrix - lam * sp.diags(disc.scalar(V))).tocoo()
    off = K0.row != K0.col
    vals = K0.data.copy()
    vals[off] *= np.exp(-lam * _link_integrals(disc, A, K0.row[off], K0.col[off]))
    K = sp.csr_matrix((vals, (K0.row, K0.col)), shape=K0.shape)
    W = -np.asarray(K.sum(axis=1)).ravel()
    H = (K + sp.diags(W)).tocsr()
    drift = disc.unflat(disc.flat(f)) - lam * disc.unflat(disc.flat(A))
    return GeneratorMatrix(H, drift=drift), PotentialField(W, GAUGE_W)


def assemble_schrodinger(disc: Discretization, lam: float, V, f) -> sp.csr_matrix:
    """Symmetric lattice form of ``1/2 Lap - W_yermakov``.

    It is ``-lam M0^{-1} S`` where ``phi^T S phi = int V phi^2 + ||d phi - phi f||^2 / (2 lam)``
    is the cost of a zero-current density ``phi^2``; self-adjoint w.r.t. ``inner0``.
    """
    _check_lambda(lam)
    fflat = disc.flat(f)
    # phi -> phi * f as a one-form: M1^{-1} M1[phi] f, linear in phi
    F = _product_matrix(disc, fflat)
    G = (disc.D - F).tocsr()
    S = lam * sp.diags(disc.vol * disc.scalar(V)) + 0.5 * (G.T @ disc.M1 @ G)
    return (-(sp.diags(1.0 / disc.vol) @ S)).tocsr()


def _product_matrix(disc: Discretization, omega_flat: np.ndarray) -> sp.csr_matrix:
    """Matrix of the linear map ``w -> w * omega`` (nodal scalar to one-form)."""
    T = _weight_jacobian(disc, omega_flat)
    if disc.metric.is_diagonal:
        return (sp.diags(1.0 / disc.M1.diagonal()) @ T).tocsr()
    import scipy.sparse.linalg as spla

    return sp.csr_matrix(spla.spsolve(disc.M1.tocsc(), T.tocsc()))


def _weight_jacobian(disc: Discretization, omega_flat: np.ndarray) -> sp.csr_matrix:
    """``T`` with ``M1[w] @ omega == T @ w``; shape ``(m*N, N)``."""
    return (disc.pointwise_matrix(disc.unflat(omega_flat)).T @ disc.M0).tocsr()


def _check_lambda(lam: float) -> None:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
