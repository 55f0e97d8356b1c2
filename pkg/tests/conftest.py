import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ergocontrol.geometry import build_grid, discretize

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def circle(n, metric=None):
    grid, metric = build_grid("circle", n, metric)
    return discretize(grid, metric)


def torus(nx, ny=None, metric=None):
    grid, metric = build_grid("torus", (nx, ny or nx), metric)
    return discretize(grid, metric)


def warped_circle_metric(x):
    return (2.0 + np.cos(x[:, 0])) ** 2


def skew_torus_metric(x):
    a = 2.0 + np.cos(x[:, 0])
    b = 2.0 + np.sin(x[:, 0] + x[:, 1])
    c = 0.3 * np.sin(x[:, 1])
    return np.stack([np.stack([a, c], -1), np.stack([c, b], -1)], 1)


def smooth_scalar(disc, coeffs, points=None):
    """Low-order trigonometric polynomial with the given coefficients."""
    pts = disc.grid.nodes if points is None else points
    out = np.full(len(pts), coeffs[0])
    k = 1
    for axis in range(disc.m):
        for freq in (1, 2):
            out += coeffs[k] * np.cos(freq * pts[:, axis]) + coeffs[k + 1] * np.sin(freq * pts[:, axis])
            k += 2
    if disc.m == 2:
        out += coeffs[k] * np.sin(pts[:, 0] + pts[:, 1])
    return out


def n_coeffs(m):
    return 1 + 4 * m + (1 if m == 2 else 0)


def smooth_one_form(disc, coeffs):
    size = n_coeffs(disc.m)
    return np.column_stack(
        [smooth_scalar(disc, coeffs[k * size:(k + 1) * size], disc.grid.edge_midpoints(k)) for k in range(disc.m)]
    )


@pytest.fixture(scope="session")
def grids():
    return {
        "flat_circle": circle(64),
        "warped_circle": circle(64, warped_circle_metric),
        "flat_torus": torus(12),
        "skew_torus": torus(12, 10, skew_torus_metric),
    }
