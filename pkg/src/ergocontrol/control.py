"""Conversions between control, density and current; costs, flux and gauge maps.

Every integral goes through ``inner0``/``inner1`` and every product of a density
with a one-form through :meth:`Discretization.multiply`, so the identities
linking these quantities hold to rounding error on the grid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .geometry import Discretization, GeometryError


@dataclass(frozen=True)
class CostBreakdown:
    state: float
    control: float
    gauge: float

    @property
    def total(self) -> float:
        return self.state + self.control + self.gauge

    def as_dict(self) -> dict:
        return {"state": self.state, "control": self.control, "gauge": self.gauge, "total": self.total}


def _positive(disc: Discretization, rho) -> np.ndarray:
    rho = disc.scalar(rho)
    if np.any(rho <= 0.0):
        raise GeometryError(f"density must be positive; node {int(np.argmin(rho))} has {rho.min():.3g}")
    return rho


def control_from_density_current(disc: Discretization, rho, J, f) -> np.ndarray:
    """``u = -f + (J + d(rho)/2) / rho``."""
    rho = _positive(disc, rho)
    J = disc.unflat(disc.flat(J))
    return disc.divide(rho, J + 0.5 * disc.d0(rho)) - disc.unflat(disc.flat(f))


def current_from_density_control(disc: Discretization, rho, u, f) -> np.ndarray:
    """``J = -d(rho)/2 + rho (f + u)``."""
    rho = disc.scalar(rho)
    b = disc.unflat(disc.flat(f)) + disc.unflat(disc.flat(u))
    return disc.multiply(rho, b) - 0.5 * disc.d0(rho)


def cost_rho_u(disc: Discretization, rho, u, *, lam, V, f, A) -> CostBreakdown:
    """Ergodic cost ``int {V + ||u||^2/(2 lam) + <A, f+u> - delta(A)/2} rho``."""
    rho = disc.scalar(rho)
    u = disc.unflat(disc.flat(u))
    b = disc.unflat(disc.flat(f)) + u
    state = disc.inner0(V, rho)
    control = disc.integrate(rho * disc.norm2(u)) / (2.0 * lam)
    gauge = disc.integrate(rho * disc.pointwise(A, b)) - 0.5 * disc.inner0(disc.codifferential(A), rho)
    return CostBreakdown(state, control, gauge)


def cost_rho_J(disc: Discretization, rho, J, *, lam, V, f, A) -> CostBreakdown:
    """Same cost written through the current: ``int {V + ||u(rho, J)||^2/(2 lam)} rho + <A, J>``."""
    rho = _positive(disc, rho)
    u = control_from_density_current(disc, rho, J, f)
    state = disc.inner0(V, rho)
    control = disc.integrate(rho * disc.norm2(u)) / (2.0 * lam)
    return CostBreakdown(state, control, flux(disc, A, J))


def flux(disc: Discretization, A, J) -> float:
    """``int <A, J> dx``; for a harmonic ``A`` the long-run signed crossing rate."""
    return disc.inner1(A, J)


def fixed_current_value(disc: Discretization, mu: float, lam: float, f, J) -> float:
    """Value formula ``-(mu lam + int <f, J>) / lam`` for a fixed-current optimum."""
    return -(mu * lam + disc.inner1(f, J)) / lam


def fixed_current_value_exact(disc: Discretization, mu: float, lam: float, u, J) -> float:
    """Cost of a fixed-current optimum from its multiplier: ``-mu + int <u, J> / lam``.

    Multiplying the stationarity condition by ``rho`` and integrating gives this
    identity on the grid exactly.  It reduces to :func:`fixed_current_value` only
    when ``int ||J||^2 / rho`` vanishes, i.e. for ``J = 0``.
    """
    return -mu + disc.inner1(u, J) / lam


def hjb_residual(disc: Discretization, psi, mu: float, H, W) -> float:
    """``||H psi - W psi - mu psi||_0 / ||psi||_0``."""
    psi = disc.scalar(psi)
    w = W.values if hasattr(W, "values") else disc.scalar(W)
    mat = H.matrix if hasattr(H, "matrix") else H
    r = mat @ psi - w * psi - mu * psi
    return float(np.sqrt(disc.inner0(r, r) / disc.inner0(psi, psi)))


def gauge_transform(disc: Discretization, result, phi, lam: float):
    """Predicted solution after ``A -> A + d phi`` without re-solving.

    Density, control, current, eigenvalue and cost are unchanged and the
    eigenfunction becomes ``exp(lam phi) psi``.  No renormalisation is applied:
    the reference density used for normalising ``psi`` itself depends on ``A``,
    so a fresh solve agrees with the prediction up to a positive constant.
    """
    phi = disc.scalar(phi)
    psi = result.potential * np.exp(lam * phi)
    spec = result.spec
    if spec is not None:
        spec = dataclasses.replace(spec, A=disc.unflat(disc.flat(spec.A)) + disc.d0(phi))
    extras = {k: v for k, v in result.extras.items() if k not in ("rho0", "W")}
    return dataclasses.replace(result, potential=psi, spec=spec, extras=extras)


def normalize_eigenfunction(disc: Discretization, psi, rho0=None) -> np.ndarray:
    """Scale so that ``int psi^2 rho0 = 1``, or ``max psi = 1`` without ``rho0``."""
    psi = disc.scalar(psi)
    if rho0 is None:
        return psi / psi.max()
    return psi / np.sqrt(disc.inner0(psi**2, rho0))
