import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergocontrol import control as C
from ergocontrol import operators as op
from ergocontrol.geometry import GeometryError

from conftest import circle, n_coeffs, smooth_one_form, smooth_scalar

coeff = st.floats(-1.0, 1.0)
GRID_NAMES = ["flat_circle", "warped_circle", "flat_torus", "skew_torus"]


def draw_state(d, data):
    size = n_coeffs(d.m)
    rho = 1.5 + smooth_scalar(d, data.draw(st.lists(st.floats(-0.25, 0.25), min_size=size, max_size=size)))
    rho /= d.integrate(rho)
    forms = [
        smooth_one_form(d, data.draw(st.lists(coeff, min_size=d.m * size, max_size=d.m * size)))
        for _ in range(3)
    ]
    return rho, *forms


def test_uncontrolled_current_gives_zero_control():
    d = circle(64)
    th = d.grid.nodes[:, 0]
    rho = (1 + 0.5 * np.cos(th)) / (2 * np.pi)
    f = np.column_stack([0.3 * np.sin(d.grid.edge_midpoints(0)[:, 0])])
    J = d.multiply(rho, f) - 0.5 * d.d0(rho)
    assert np.max(np.abs(C.control_from_density_current(d, rho, J, f))) < 1e-14
    assert np.max(np.abs(C.control_from_density_current(d, np.full(64, 1 / (2 * np.pi)), 0.0, 0.0))) == 0.0


def test_gradient_control_has_zero_current():
    d = circle(64)
    rho = (1 + 0.5 * np.cos(d.grid.nodes[:, 0])) / (2 * np.pi)
    f = 0.4
    u = d.divide(rho, 0.5 * d.d0(rho)) - f
    assert np.max(np.abs(C.current_from_density_control(d, rho, u, f))) < 1e-14


def test_constant_drift_current_and_cost():
    d = circle(64)
    rho = np.full(64, 1 / (2 * np.pi))
    J = C.current_from_density_control(d, rho, 0.5, 0.25)
    assert np.allclose(J, 0.75 / (2 * np.pi), rtol=1e-14)
    cost = C.cost_rho_u(d, rho, 0.6, lam=1.0, V=0.0, f=0.0, A=0.0)
    assert cost.total == pytest.approx(0.18, rel=1e-13)
    V = np.cos(d.grid.nodes[:, 0])
    assert C.cost_rho_u(d, rho, 0.0, lam=1.0, V=V, f=0.3, A=0.0).total == pytest.approx(d.inner0(V, rho), abs=1e-15)


def test_nonpositive_density_rejected():
    d = circle(16)
    rho = np.ones(16)
    rho[3] = 0.0
    with pytest.raises(GeometryError, match="node 3"):
        C.control_from_density_current(d, rho, 0.0, 0.0)
    with pytest.raises(GeometryError):
        C.cost_rho_J(d, rho, 0.0, lam=1.0, V=0.0, f=0.0, A=0.0)


def test_cost_breakdown_total():
    c = C.CostBreakdown(0.1, 0.2, -0.05)
    assert c.total == pytest.approx(0.25, abs=1e-15)
    assert c.as_dict()["total"] == c.total


@pytest.mark.parametrize("name", GRID_NAMES)
@given(data=st.data())
def test_round_trip_and_fokker_planck_identity(grids, name, data):
    d = grids[name]
    rho, J, f, _ = draw_state(d, data)
    u = C.control_from_density_current(d, rho, J, f)
    assert np.max(np.abs(C.current_from_density_control(d, rho, u, f) - J)) < 1e-12
    Ls = op.assemble_adjoint(d, op.assemble_generator(d, f + u, check_peclet=False))
    assert np.max(np.abs(d.codifferential(J) - Ls @ rho)) < 1e-10 * (1 + np.abs(Ls.matrix).max())


@pytest.mark.parametrize("name", GRID_NAMES)
@given(data=st.data(), lam=st.floats(0.2, 3.0))
def test_two_cost_forms_agree(grids, name, data, lam):
    d = grids[name]
    rho, u, f, A = draw_state(d, data)
    size = n_coeffs(d.m)
    V = smooth_scalar(d, data.draw(st.lists(coeff, min_size=size, max_size=size)))
    J = C.current_from_density_control(d, rho, u, f)
    a = C.cost_rho_u(d, rho, u, lam=lam, V=V, f=f, A=A)
    b = C.cost_rho_J(d, rho, J, lam=lam, V=V, f=f, A=A)
    assert abs(a.total - b.total) < 1e-10
    assert abs(a.state - b.state) < 1e-14 and abs(a.control - b.control) < 1e-10


@pytest.mark.parametrize("name", GRID_NAMES)
@given(data=st.data())
def test_flux_of_exact_form_against_divergence_free_current(grids, name, data):
    d = grids[name]
    _, eta, _, _ = draw_state(d, data)
    # project onto divergence-free forms: eta - d chi with delta(d chi) = delta(eta)
    lap = d.laplacian.toarray()
    chi = np.linalg.lstsq(-lap, d.codifferential(eta), rcond=None)[0]
    J = eta - d.d0(chi)
    size = n_coeffs(d.m)
    phi = smooth_scalar(d, data.draw(st.lists(coeff, min_size=size, max_size=size)))
    assert np.max(np.abs(d.codifferential(J))) < 1e-9
    assert abs(C.flux(d, d.d0(phi), J)) < 1e-10


def test_flux_examples():
    d = circle(64)
    assert C.flux(d, 0.0, 0.7) == 0.0
    assert C.flux(d, 1 / (2 * np.pi), 0.7) == pytest.approx(0.7, rel=1e-14)


def test_fixed_current_value_formulas_on_flat_circle():
    # uniform density with constant current: cost = 2 pi^2 j0^2 / lam and mu = 2 pi^2 j0^2 / lam
    d = circle(64)
    j0, lam = 0.3, 1.0
    rho = np.full(64, 1 / (2 * np.pi))
    u = C.control_from_density_current(d, rho, j0, 0.0)
    cost = C.cost_rho_J(d, rho, j0, lam=lam, V=0.0, f=0.0, A=0.0).total
    mu = 2 * np.pi**2 * j0**2 / lam
    assert cost == pytest.approx(mu, rel=1e-13)
    assert C.fixed_current_value_exact(d, mu, lam, u, np.full((64, 1), j0)) == pytest.approx(cost, rel=1e-13)
    assert C.fixed_current_value(d, mu, lam, 0.0, np.full((64, 1), j0)) == pytest.approx(-cost, rel=1e-13)


def test_hjb_residual_trivial_and_linear():
    d = circle(32)
    H = op.assemble_generator(d, 0.0)
    W = op.PotentialField(np.zeros(32), op.GAUGE_W)
    assert C.hjb_residual(d, np.ones(32), 0.0, H, W) == 0.0
    bump = np.sin(d.grid.nodes[:, 0])
    r1 = C.hjb_residual(d, 1 + 1e-3 * bump, 0.0, H, W)
    r2 = C.hjb_residual(d, 1 + 2e-3 * bump, 0.0, H, W)
    assert r2 / r1 == pytest.approx(2.0, rel=1e-2)


def test_normalize_eigenfunction():
    d = circle(32)
    psi = 1 + 0.5 * np.cos(d.grid.nodes[:, 0])
    assert C.normalize_eigenfunction(d, psi).max() == 1.0
    rho0 = np.full(32, 1 / (2 * np.pi))
    assert d.inner0(C.normalize_eigenfunction(d, psi, rho0) ** 2, rho0) == pytest.approx(1.0, rel=1e-14)
