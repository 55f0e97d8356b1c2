"""Solvers for the unconstrained, fixed-density, fixed-current and symmetrizable problems.

All four produce a :class:`SolveResult` whose density, current and control are
tied together on the grid by ``J = rho * (f + u) - d(rho) / 2``.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import control
from .geometry import Discretization, GeometryError
from .operators import (
    GeneratorMatrix,
    assemble_adjoint,
    assemble_gauge_hamiltonian,
    assemble_generator,
    assemble_schrodinger,
    cell_peclet,
    _weight_jacobian,
)

log = logging.getLogger(__name__)

UNCONSTRAINED = "unconstrained"
FIXED_DENSITY = "fixed_density"
FIXED_CURRENT = "fixed_current"
SYMMETRIZABLE = "symmetrizable"
VARIANTS = (UNCONSTRAINED, FIXED_DENSITY, FIXED_CURRENT, SYMMETRIZABLE)

DENSE_LIMIT = 4096


class SolverError(RuntimeError):
    """A solve failed; ``history`` holds the residual trace when available."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    disc: Discretization
    lam: float
    V: np.ndarray
    f: np.ndarray
    A: np.ndarray
    variant: str = UNCONSTRAINED
    rho: np.ndarray | None = None
    J: np.ndarray | None = None
    tol: float = 1e-10
    newton_tol: float = 1e-9
    eig_maxiter: int = 200
    newton_maxiter: int = 50

    def __post_init__(self):
        disc = self.disc
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "V", disc.scalar(self.V).copy())
        object.__setattr__(self, "f", disc.unflat(disc.flat(self.f)))
        object.__setattr__(self, "A", disc.unflat(disc.flat(self.A)))
        for name in ("V", "f", "A"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if self.variant == FIXED_DENSITY:
            if self.rho is None:
                raise ValueError("fixed_density problem needs a density")
            rho = disc.scalar(self.rho).copy()
            if np.any(rho <= 0):
                raise ValueError(f"density must be positive (node {int(np.argmin(rho))})")
            if abs(disc.integrate(rho) - 1.0) > 1e-10:
                raise ValueError(f"density integrates to {disc.integrate(rho):.12g}, expected 1")
            object.__setattr__(self, "rho", rho)
        if self.variant == FIXED_CURRENT:
            if self.J is None:
                raise ValueError("fixed_current problem needs a current")
            J = disc.unflat(disc.flat(self.J))
            div = np.sqrt(disc.inner0(disc.codifferential(J), disc.codifferential(J)))
            if div > 1e-8:
                raise ValueError(f"current is not divergence free: ||delta J|| = {div:.3g}")
            object.__setattr__(self, "J", J)


@dataclass(frozen=True)
class SolveResult:
    rho: np.ndarray
    J: np.ndarray
    u: np.ndarray
    potential: np.ndarray
    mu: float
    cost: control.CostBreakdown
    residuals: dict
    iterations: int
    spec: ProblemSpec | None = None
    extras: dict = field(default_factory=dict)


# -- eigenpairs and stationary densities ----------------------------------------


def principal_eigenpair(disc: Discretization, op, *, rho0=None, tol: float = 1e-10,
                        maxiter: int = 200) -> tuple[float, np.ndarray, int]:
    """Eigenvalue of maximal real part of ``op`` and its positive eigenvector.

    ``op`` must have nonnegative off-diagonal entries (it is a generator minus a
    potential).  Shifted inverse iteration with the shift reset every sweep to
    the Collatz-Wielandt upper bound ``max(op psi / psi)``: the shifted matrix
    stays a nonsingular M-matrix, so iterates stay positive, and the shift
    converges to the eigenvalue quadratically.  The first shift is the
    Gershgorin bound.  Returns ``(mu, psi, iterations)``.
    """
    K = sp.csr_matrix(op.matrix if isinstance(op, GeneratorMatrix) else op)
    n = K.shape[0]
    eye = sp.identity(n, format="csc")
    sigma = float(np.max(np.abs(K).sum(axis=1))) + 1.0
    psi = np.ones(n)
    history = []
    off = K - sp.diags(K.diagonal())
    if off.nnz and off.data.min() < 0.0:
        # negative couplings (e.g. cell Peclet > 2): no positivity guarantee for the iteration
        log.warning("operator has negative off-diagonal entries; Perron structure not guaranteed")
        maxiter = 0
    for it in range(1, maxiter + 1):
        psi = spla.spsolve((sigma * eye - K).tocsc(), psi)
        if not np.all(np.isfinite(psi)):
            break
        psi /= np.max(np.abs(psi))
        if np.any(psi <= 0.0):
            break
        ratio = (K @ psi) / psi
        lo, hi = ratio.min(), ratio.max()
        mu = float(np.dot(disc.vol * psi, K @ psi) / np.dot(disc.vol * psi, psi))
        res = _relative_residual(disc, K, psi, mu)
        history.append(res)
        if res <= tol or hi - lo <= tol * max(1.0, abs(hi)):
            return mu, _finish_eigenvector(disc, psi, rho0), it
        # keep a small gap so the shifted system stays safely nonsingular
        sigma = hi + max(1e-3 * (hi - lo), 1e-14 * max(1.0, abs(hi)))
    if n <= DENSE_LIMIT:
        log.info("inverse iteration did not converge; using dense eigensolver")
        mu, psi = _dense_principal(K.toarray())
        res = _relative_residual(disc, K, psi, mu)
        if res > max(tol, 1e-9):
            raise SolverError(f"dense eigensolver residual {res:.3g} above tolerance", history)
        return mu, _finish_eigenvector(disc, psi, rho0), maxiter
    if maxiter == 0:
        raise SolverError("Perron structure lost; refine grid")
    last = history[-1] if history else float("nan")
    raise SolverError(f"principal eigenpair did not converge (last residual {last:.3g})", history)


def _dense_principal(K: np.ndarray) -> tuple[float, np.ndarray]:
    vals, vecs = sla.eig(K)
    k = int(np.argmax(vals.real))
    if abs(vals[k].imag) > 1e-10 * max(1.0, abs(vals[k])):
        raise SolverError(f"principal eigenvalue {vals[k]} is not real")
    psi = np.real(vecs[:, k])
    psi = psi * np.sign(psi[np.argmax(np.abs(psi))])
    return float(vals[k].real), psi


def _finish_eigenvector(disc, psi, rho0):
    if np.any(psi <= 0.0):
        raise SolverError("Perron structure lost; refine grid")
    return control.normalize_eigenfunction(disc, psi, rho0)


def _relative_residual(disc, K, psi, mu) -> float:
    r = K @ psi - mu * psi
    return float(np.sqrt(disc.inner0(r, r) / disc.inner0(psi, psi)))


def stationary_density(disc: Discretization, Lstar, *, tol: float = 1e-10) -> np.ndarray:
    """Normalised positive solution of ``L* rho = 0``.

    Solves the bordered system ``[[L*, 1], [vol^T, 0]] [rho, s] = [0, 1]``; its
    matrix is nonsingular exactly when the kernel of ``L*`` is one-dimensional,
    and then ``s = 0`` because the range of ``L*`` integrates to zero.
    """
    L = sp.csr_matrix(Lstar.matrix if isinstance(Lstar, GeneratorMatrix) else Lstar)
    n = L.shape[0]
    ones = sp.csc_matrix(np.ones((n, 1)))
    bordered = sp.bmat([[L, ones], [sp.csr_matrix(disc.vol[None, :]), None]], format="csc")
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    try:
        lu = spla.splu(bordered)
    except RuntimeError as exc:
        raise SolverError("stationary equation has a kernel of dimension != 1") from exc
    sol = lu.solve(rhs)
    sol += lu.solve(rhs - bordered @ sol)  # one refinement sweep
    rho = sol[:n]
    if not np.all(np.isfinite(rho)):
        raise SolverError("stationary equation has a kernel of dimension != 1")
    if np.any(rho <= 0.0):
        raise SolverError("stationary density is sign-indefinite; refine grid")
    rho = rho / disc.integrate(rho)
    r = L @ rho
    res = np.sqrt(disc.inner0(r, r))
    scale = max(1.0, float(abs(L).max()) * np.sqrt(disc.inner0(rho, rho)))
    if res > tol * scale:
        raise SolverError(f"Fokker-Planck residual {res:.3g} above tolerance")
    return rho


# -- shared post-processing -------------------------------------------------------


def _diagnostics(disc, rho, J, u, f) -> dict:
    gen = assemble_generator(disc, f + u, check_peclet=False)
    fp = assemble_adjoint(disc, gen) @ rho
    divJ = disc.codifferential(J)
    u_back = control.control_from_density_current(disc, rho, J, f)
    return {
        "fokker_planck": float(np.sqrt(disc.inner0(fp, fp))),
        "div_current": float(np.sqrt(disc.inner0(divJ, divJ))),
        "triple_consistency": float(np.max(np.abs(u_back - u))),
        "normalization": float(abs(disc.integrate(rho) - 1.0)),
    }


def _warn_peclet(disc, b, what):
    pe = cell_peclet(disc, b)
    if pe >= 2.0:
        warnings.warn(f"{what}: cell Peclet number {pe:.3g} >= 2; refine the grid", RuntimeWarning, stacklevel=3)


# -- unconstrained ------------------------------------------------------------------


def solve_unconstrained(spec: ProblemSpec) -> SolveResult:
    """Principal eigenpair of the gauge Hamiltonian, control ``-lam A + d ln psi``."""
    disc, lam = spec.disc, spec.lam
    H, W = assemble_gauge_hamiltonian(disc, lam, spec.V, spec.f, spec.A)
    rho0 = stationary_density(disc, assemble_adjoint(disc, H), tol=spec.tol)
    K = H.matrix - sp.diags(W.values)
    mu, psi, iters = principal_eigenpair(disc, K, rho0=rho0, tol=spec.tol, maxiter=spec.eig_maxiter)
    u = -lam * spec.A + disc.d0(np.log(psi))
    _warn_peclet(disc, spec.f + u, "optimal drift")
    gen = assemble_generator(disc, spec.f + u, check_peclet=False)
    rho = stationary_density(disc, assemble_adjoint(disc, gen), tol=spec.tol)
    J = control.current_from_density_control(disc, rho, u, spec.f)
    cost = control.cost_rho_u(disc, rho, u, lam=lam, V=spec.V, f=spec.f, A=spec.A)
    residuals = _diagnostics(disc, rho, J, u, spec.f)
    residuals["hjb"] = control.hjb_residual(disc, psi, mu, H, W)
    return SolveResult(rho, J, u, psi, mu, cost, residuals, iters, spec,
                       extras={"rho0": rho0, "W": W.values})


# -- fixed density ------------------------------------------------------------------


def solve_fixed_density(spec: ProblemSpec) -> SolveResult:
    """Optimal control realising a prescribed density.

    Solves ``D^T M1[rho] D Phi = M0 rhs`` with
    ``rhs = (Lap(rho)/2 + delta(rho * (f - lam A))) / lam`` by a sparse direct
    factorisation, fixing ``mean(Phi) = 0``; then ``u = -lam (A + d Phi)``.
    """
    disc, lam = spec.disc, spec.lam
    rho = spec.rho
    drift = spec.f - lam * spec.A
    rhs = (0.5 * disc.laplace_beltrami(rho) + disc.codifferential(disc.multiply(rho, drift))) / lam
    total = disc.integrate(rhs)
    if abs(total) > 1e-10 * max(1.0, np.sqrt(disc.inner0(rhs, rhs))):
        raise SolverError(f"incompatible right-hand side: integral {total:.3g}")
    rhs = rhs - total / disc.volume
    S = (disc.D.T @ disc.mass1(rho) @ disc.D).tocsc()
    b = disc.vol * rhs
    # the kernel is the constants: pin node 0, factorise the rest, then re-centre
    Phi = np.zeros(disc.n)
    try:
        lu = spla.splu(S[1:, 1:])
    except RuntimeError as exc:
        raise SolverError("density-weighted Laplacian is singular; is rho positive?") from exc
    Phi[1:] = lu.solve(b[1:])
    Phi[1:] += lu.solve((b - S @ Phi)[1:])  # one refinement sweep
    Phi -= Phi.mean()
    # normwise backward error
    scale = spla.norm(S, np.inf) * np.max(np.abs(Phi)) + np.max(np.abs(b))
    res = float(np.max(np.abs(S @ Phi - b)) / max(scale, 1e-300))
    if not res <= 1e-10:
        raise SolverError(f"linear solve residual {res:.3g} above tolerance", [res])
    u = -lam * (spec.A + disc.d0(Phi))
    J = control.current_from_density_control(disc, rho, u, spec.f)
    cost = control.cost_rho_u(disc, rho, u, lam=lam, V=spec.V, f=spec.f, A=spec.A)
    residuals = _diagnostics(disc, rho, J, u, spec.f)
    residuals["linear"] = res
    return SolveResult(rho, J, u, Phi, float("nan"), cost, residuals, 1, spec)


# -- symmetrizable --------------------------------------------------------------------


def solve_symmetrizable(spec: ProblemSpec) -> SolveResult:
    """Zero-current optimum from the ground state of ``Lap/2 - W``.

    ``phi^2`` is the density and ``lam * mu`` the top eigenvalue.  The cost is the
    quadratic form ``int V phi^2 + ||d phi - phi f||^2 / (2 lam)``, equal to ``-mu``.
    The control is the one whose current vanishes on the grid,
    ``u = (d rho / 2) / rho - f``; its distance to ``d ln phi - f`` is recorded.
    """
    disc, lam = spec.disc, spec.lam
    K = assemble_schrodinger(disc, lam, spec.V, spec.f)
    eig, phi, iters = principal_eigenpair(disc, K, tol=spec.tol, maxiter=spec.eig_maxiter)
    phi = phi / np.sqrt(disc.inner0(phi, phi))
    mu = eig / lam
    rho = phi**2
    u = disc.divide(rho, 0.5 * disc.d0(rho)) - spec.f
    J = control.current_from_density_control(disc, rho, u, spec.f)
    grad = disc.d0(phi) - disc.multiply(phi, spec.f)
    cost = control.CostBreakdown(
        state=disc.inner0(spec.V, rho),
        control=disc.inner1(grad, grad) / (2.0 * lam),
        gauge=control.flux(disc, spec.A, J),
    )
    residuals = _diagnostics(disc, rho, J, u, spec.f)
    residuals["eigen"] = _relative_residual(disc, K, phi, eig)
    residuals["gradient_defect"] = float(np.max(np.abs(u - (disc.d0(np.log(phi)) - spec.f))))
    extras = {
        "cost_rho_u": control.cost_rho_u(disc, rho, u, lam=lam, V=spec.V, f=spec.f, A=spec.A).total,
    }
    return SolveResult(rho, J, u, phi, mu, cost, residuals, iters, spec, extras)


# -- fixed current ----------------------------------------------------------------------


def _stationarity(disc, lam, V, f, J, rho):
    """Gradient ``G`` of the cost in ``rho`` (per unit volume) and the control."""
    u = control.control_from_density_current(disc, rho, J, f)
    G = (
        V
        + disc.codifferential(u) / (2.0 * lam)
        - disc.pointwise(u, f) / lam
        - disc.norm2(u) / (2.0 * lam)
    )
    return G, u


def _newton_system(disc, lam, f, rho, phi, u, G, mu):
    """Bordered Jacobian in ``(dphi, dmu, z)`` with ``z = M1[rho]^{-1} Q (2 phi dphi)``."""
    n = disc.n
    Q = (0.5 * disc.M1 @ disc.D - _weight_jacobian(disc, disc.flat(u + f))).tocsr()
    two_phi = sp.diags(2.0 * phi)
    top = [sp.diags(G + mu), sp.csr_matrix(phi[:, None]),
           sp.diags(phi / (lam * disc.vol)) @ Q.T]
    mid = [-(Q @ two_phi), None, disc.mass1(rho)]
    bot = [sp.csr_matrix((2.0 * disc.vol * phi)[None, :]), None, None]
    mat = sp.bmat([top, mid, bot], format="csc")
    return mat, n


def _fixed_current_residual(disc, lam, V, f, J, phi, mu):
    rho = phi**2
    G, u = _stationarity(disc, lam, V, f, J, rho)
    Y = phi * (G + mu)
    c = disc.integrate(rho) - 1.0
    norm = float(np.sqrt(lam**2 * disc.inner0(Y, Y) + c**2))
    return norm, Y, c, G, u


def _newton(disc, lam, V, f, J, phi, mu, tol, maxiter):
    history = []
    norm, Y, c, G, u = _fixed_current_residual(disc, lam, V, f, J, phi, mu)
    history.append(norm)
    for it in range(1, maxiter + 1):
        if norm <= tol:
            return phi, mu, it - 1, history
        mat, n = _newton_system(disc, lam, f, phi**2, phi, u, G, mu)
        rhs = np.concatenate([-Y, np.zeros(mat.shape[0] - n - 1), [-c]])
        sol = spla.spsolve(mat, rhs)
        dphi = sol[:n]
        dmu = sol[n]
        alpha = 1.0
        while True:
            trial = phi + alpha * dphi
            if np.all(trial > 0.0):
                try:
                    t_norm, tY, tc, tG, tu = _fixed_current_residual(disc, lam, V, f, J, trial, mu + alpha * dmu)
                except GeometryError:
                    t_norm = np.inf
                if t_norm < (1.0 - 1e-4 * alpha) * norm or (alpha < 1e-3 and np.isfinite(t_norm)):
                    break
            alpha *= 0.5
            if alpha < 1e-10:
                raise SolverError("positivity line search failed: approaching phi -> 0 singularity", history)
        phi, mu = trial, mu + alpha * dmu
        norm, Y, c, G, u = t_norm, tY, tc, tG, tu
        history.append(norm)
    if norm <= tol:
        return phi, mu, maxiter, history
    raise SolverError(f"Newton iteration stalled at residual {norm:.3g}", history)


def solve_fixed_current(spec: ProblemSpec, *, ramp_steps: int = 4) -> SolveResult:
    """Optimal density for a prescribed divergence-free current.

    Newton on ``(phi, mu)`` with ``rho = phi^2`` for the nodal equations
    ``phi (G(phi^2) + mu) = 0`` and ``int phi^2 = 1``, where ``G`` is the exact
    gradient of the discrete cost.  The cost is convex in ``rho``, so the
    positive branch is unique.  Starts from the zero-current ground state; if the
    direct attempt fails the current is ramped in ``ramp_steps`` stages.
    """
    disc, lam = spec.disc, spec.lam
    V, f, J = spec.V, spec.f, spec.J
    ground = solve_symmetrizable(dataclasses.replace(spec, variant=SYMMETRIZABLE, J=None))
    phi0 = ground.potential
    G0, _ = _stationarity(disc, lam, V, f, np.zeros_like(J), phi0**2)
    mu0 = -disc.inner0(G0, phi0**2)
    try:
        phi, mu, iters, history = _newton(disc, lam, V, f, J, phi0, mu0, spec.newton_tol, spec.newton_maxiter)
    except SolverError as first:
        log.info("direct Newton solve failed (%s); ramping the current", first)
        phi, mu, iters, history = phi0, mu0, 0, list(first.history)
        for step in range(1, ramp_steps + 1):
            phi, mu, k, h = _newton(disc, lam, V, f, J * step / ramp_steps, phi, mu,
                                    spec.newton_tol, spec.newton_maxiter)
            iters += k
            history += h
    rho = phi**2
    u = control.control_from_density_current(disc, rho, J, f)
    cost = control.cost_rho_J(disc, rho, J, lam=lam, V=V, f=f, A=spec.A)
    residuals = _diagnostics(disc, rho, J, u, f)
    residuals["yermakov"] = history[-1]
    residuals["newton_history"] = history
    gauge = control.flux(disc, spec.A, J)
    extras = {
        "cost_value_formula": control.fixed_current_value(disc, mu, lam, f, J) + gauge,
        "cost_value_exact": control.fixed_current_value_exact(disc, mu, lam, u, J) + gauge,
    }
    return SolveResult(rho, J, u, phi, mu, cost, residuals, iters, spec, extras)


def solve(spec: ProblemSpec) -> SolveResult:
    return {
        UNCONSTRAINED: solve_unconstrained,
        FIXED_DENSITY: solve_fixed_density,
        FIXED_CURRENT: solve_fixed_current,
        SYMMETRIZABLE: solve_symmetrizable,
    }[spec.variant](spec)


# -- closed forms and presets -------------------------------------------------------------


def circle_fixed_density_closed_form(rho, k: float, lam: float = 1.0) -> np.ndarray:
    """Periodic correction ``phi`` for a prescribed density on the flat circle.

    ``phi(theta) = k (theta I - 2 pi int_0^theta 1/rho) / I`` with
    ``I = int_0^{2 pi} 1/rho``, both integrals by the trapezoid rule on the
    uniform grid carrying ``rho``; ``phi(0) = 0``.  ``lam`` does not enter.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 1 or np.any(rho <= 0.0):
        raise ValueError("density samples must be a positive 1-d array")
    n = rho.size
    h = 2.0 * np.pi / n
    inv = 1.0 / rho
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * h * (inv[:-1] + inv[1:]))])
    total = cumulative[-1] + 0.5 * h * (inv[-1] + inv[0])
    theta = np.arange(n) * h
    return k * (theta * total - 2.0 * np.pi * cumulative) / total


def harmonic_gauge(disc: Discretization, cycle) -> np.ndarray:
    """Harmonic one-form dual to a cycle.

    On the circle ``cycle`` is a sequence of ``(angle, multiplicity)`` pairs and the
    result is ``sum(multiplicity) / (2 pi) d theta``.  On the flat torus it is a
    homology class ``(p, q)``, giving ``(p d theta1 + q d theta2) / (2 pi)``.
    """
    if disc.grid.kind == "circle":
        total = float(sum(mult for _, mult in cycle)) if len(cycle) else 0.0
        return np.full((disc.n, 1), total / (2.0 * np.pi))
    g = disc.metric.g
    if not np.allclose(g, g[0]):
        raise UnsupportedConfiguration("harmonic gauge fields are only available for a flat torus")
    p, q = cycle
    return np.tile(np.array([p, q], dtype=float) / (2.0 * np.pi), (disc.n, 1))
