import math

import numpy as np
import pytest

from intdiff.quadrature import Grid, build_grid


def test_integrate_gaussian_exact():
    g = build_grid(-6.0, 6.0)
    val = g.integrate(np.exp(-g.nodes**2))
    assert abs(val - math.sqrt(math.pi)) < 1e-14


def test_cumulative_matches_erf():
    g = build_grid(-6.0, 6.0)
    cum = g.cumulative(np.exp(-g.nodes**2))
    exact = np.array(
        [0.5 * math.sqrt(math.pi) * (math.erf(x) + math.erf(6.0)) for x in g.nodes]
    )
    assert np.max(np.abs(cum - exact)) < 1e-13


def test_derivative_spectral():
    g = build_grid(0.0, 3.0, base_panels=10)
    d = g.derivative(np.sin(g.nodes))
    assert np.max(np.abs(d - np.cos(g.nodes))) < 1e-11


def test_graded_grid_resolves_endpoint_singularity():
    g = build_grid(1e-12, 1.0, base_panels=16, grade_lower=True, grades=36)
    val = g.integrate(g.nodes**-0.5)
    assert abs(val - 2.0) < 1e-5


def test_bad_breaks_rejected():
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        Grid(np.array([1.0]))
