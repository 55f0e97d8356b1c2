import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from ergocontrol import operators as op

from conftest import circle, n_coeffs, skew_torus_metric, smooth_one_form, smooth_scalar, torus, warped_circle_metric

coeff = st.floats(-1.0, 1.0)
GRID_NAMES = ["flat_circle", "warped_circle", "flat_torus", "skew_torus"]


def test_zero_drift_generator_is_half_laplacian():
    d = circle(32, warped_circle_metric)
    L = op.assemble_generator(d, 0.0)
    assert abs(L.matrix - 0.5 * d.laplacian).max() == 0.0
    Ls = op.assemble_adjoint(d, L)
    assert abs(Ls.matrix - L.matrix).max() < 1e-12


def test_constant_drift_action_on_sine():
    errs = []
    for n in (128, 256):
        d = circle(n)
        th = d.grid.nodes[:, 0]
        L = op.assemble_generator(d, 0.7)
        errs.append(np.max(np.abs(L @ np.sin(th) - (-0.5 * np.sin(th) + 0.7 * np.cos(th)))))
    assert errs[0] / errs[1] > 3.5


def test_constant_drift_preserves_uniform_density():
    d = circle(64)
    Ls = op.assemble_adjoint(d, op.assemble_generator(d, 0.9))
    assert np.max(np.abs(Ls @ np.full(d.n, 1 / (2 * np.pi)))) < 1e-13


@pytest.mark.parametrize("name", GRID_NAMES)
@given(data=st.data())
def test_row_sums_and_duality(grids, name, data):
    d = grids[name]
    size = n_coeffs(d.m)
    b = smooth_one_form(d, data.draw(st.lists(coeff, min_size=d.m * size, max_size=d.m * size)))
    L = op.assemble_generator(d, b, check_peclet=False)
    assert np.max(np.abs(L.row_sums())) < 1e-10
    Ls = op.assemble_adjoint(d, L)
    p = smooth_scalar(d, data.draw(st.lists(coeff, min_size=size, max_size=size)))
    q = smooth_scalar(d, data.draw(st.lists(coeff, min_size=size, max_size=size)))
    assert abs(d.inner0(L @ p, q) - d.inner0(p, Ls @ q)) < 1e-12 * (1 + np.abs(L.matrix).max())


def test_peclet_warning():
    d = circle(16)
    with pytest.warns(RuntimeWarning, match="Peclet"):
        op.assemble_generator(d, 5.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        op.assemble_generator(d, 0.5)


def test_gauge_W_examples():
    d = circle(64)
    th = d.grid.nodes[:, 0]
    V = np.cos(th)
    assert np.array_equal(op.assemble_gauge_W(d, 2.0, V, 0.3, 0.0).values, 2.0 * V)
    W = op.assemble_gauge_W(d, 1.0, 0.0, 0.0, 0.7)
    assert W.variant == op.GAUGE_W
    assert np.allclose(W.values, -0.245, rtol=0, atol=1e-14)
    A = np.column_stack([0.4 + 0.3 * np.sin(d.grid.edge_midpoints(0)[:, 0])])
    W = op.assemble_gauge_W(d, 1.0, 0.0, A, A).values
    assert np.allclose(W, 0.5 * d.norm2(A) - 0.5 * d.codifferential(A), rtol=0, atol=1e-13)


def test_yermakov_W_examples():
    d = circle(64)
    th = d.grid.nodes[:, 0]
    assert np.array_equal(op.assemble_yermakov_W(d, 1.5, np.cos(th), 0.0).values, 1.5 * np.cos(th))
    assert np.allclose(op.assemble_yermakov_W(d, 1.0, 0.0, 0.6).values, 0.18, rtol=0, atol=1e-14)
    U = np.cos(th)
    W = op.assemble_yermakov_W(d, 1.0, 0.0, -0.5 * d.d0(U)).values
    # delta(dU) = -Lap(U), so -delta(f)/2 = -Lap(U)/4
    expected = 0.125 * d.norm2(d.d0(U)) - 0.25 * d.laplace_beltrami(U)
    assert np.allclose(W, expected, rtol=0, atol=1e-13)


def test_variants_are_not_interchangeable():
    d = circle(16)
    W = op.assemble_yermakov_W(d, 1.0, 0.0, 0.0)
    with pytest.raises(op.VariantMismatch):
        W.require(op.GAUGE_W)
    with pytest.raises(ValueError):
        op.PotentialField(np.array([np.nan]), op.GAUGE_W)


def test_gauge_reduce_examples():
    d = circle(64)
    V = np.cos(d.grid.nodes[:, 0])
    f = 0.3
    f_red, V_red = op.gauge_reduce(d, 1.0, V, f, 0.0)
    assert np.array_equal(f_red, np.full((64, 1), 0.3)) and np.array_equal(V_red, V)
    f_red, V_red = op.gauge_reduce(d, 1.0, V, 0.0, 0.6)
    assert np.allclose(V_red, V - 0.18, rtol=0, atol=1e-14)
    # gauge-W of the reduced data without A is lam * V_red
    A = np.column_stack([0.2 + 0.3 * np.cos(d.grid.edge_midpoints(0)[:, 0])])
    f_red, V_red = op.gauge_reduce(d, 0.8, V, f, A)
    assert np.allclose(op.assemble_gauge_W(d, 0.8, V_red, f_red, 0.0).values, 0.8 * V_red, rtol=0, atol=1e-14)
    assert np.allclose(0.8 * V_red, op.assemble_gauge_W(d, 0.8, V, f, A).values, rtol=0, atol=1e-13)


@pytest.mark.filterwarnings("ignore:cell Peclet")
@given(data=st.data())
def test_gauge_hamiltonian_covariance(data):
    d = torus(10, 12, skew_torus_metric)
    size = n_coeffs(2)
    V = smooth_scalar(d, data.draw(st.lists(coeff, min_size=size, max_size=size)))
    f = smooth_one_form(d, data.draw(st.lists(coeff, min_size=2 * size, max_size=2 * size)))
    A = smooth_one_form(d, data.draw(st.lists(coeff, min_size=2 * size, max_size=2 * size)))
    phi = smooth_scalar(d, data.draw(st.lists(coeff, min_size=size, max_size=size)))
    lam = data.draw(st.floats(0.2, 2.0))
    H, W = op.assemble_gauge_hamiltonian(d, lam, V, f, A)
    H2, W2 = op.assemble_gauge_hamiltonian(d, lam, V, f, A + d.d0(phi))
    K = (H.matrix - sp.diags(W.values)).toarray()
    K2 = (H2.matrix - sp.diags(W2.values)).toarray()
    e = np.exp(lam * phi)
    assert np.max(np.abs(K2 - e[:, None] * K / e[None, :])) < 1e-11 * (1 + np.abs(K).max())
    assert np.max(np.abs(H.row_sums())) < 1e-10


def test_lattice_gauge_potential_converges_to_nodewise():
    errs = []
    for n in (64, 128):
        d = circle(n, warped_circle_metric)
        th = d.grid.nodes[:, 0]
        A = np.column_stack([0.5 + 0.3 * np.sin(d.grid.edge_midpoints(0)[:, 0])])
        _, W = op.assemble_gauge_hamiltonian(d, 0.7, np.cos(th), 0.4, A)
        errs.append(np.max(np.abs(W.values - op.assemble_gauge_W(d, 0.7, np.cos(th), 0.4, A).values)))
    assert errs[0] / errs[1] > 3.5


def test_gauge_hamiltonian_without_gauge_field_is_generator_minus_potential():
    d = circle(32)
    th = d.grid.nodes[:, 0]
    H, W = op.assemble_gauge_hamiltonian(d, 1.3, np.cos(th), 0.4, 0.0)
    assert abs(H.matrix - op.assemble_generator(d, 0.4).matrix).max() < 1e-13
    assert np.allclose(W.values, 1.3 * np.cos(th), rtol=0, atol=1e-13)


def test_schrodinger_operator_without_force():
    d = circle(32)
    V = np.cos(d.grid.nodes[:, 0])
    K = op.assemble_schrodinger(d, 1.0, V, 0.0)
    assert abs(K - (0.5 * d.laplacian - sp.diags(V))).max() < 1e-13


def test_lambda_must_be_positive():
    with pytest.raises(ValueError):
        op.assemble_gauge_W(circle(16), 0.0, 0.0, 0.0, 0.0)
