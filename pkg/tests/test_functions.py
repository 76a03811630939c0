import numpy as np
import pytest

from intdiff.functions import FUNCTIONS, SmoothFunction, get_function, polynomial

GRID = np.array([-2.0, -0.7, 0.0, 0.4, 1.3, 2.5])


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


@pytest.mark.parametrize("name", sorted(FUNCTIONS))
@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_fd_matches_analytic(name, order):
    f = FUNCTIONS[name]
    bare = SmoothFunction(f.fn)  # finite differences only
    assert rel_err(bare.deriv(order, GRID), f.deriv(order, GRID)) < 1e-4


def test_polynomial_derivatives_exact():
    f = polynomial([1.0, -2.0, 0.5, 3.0])
    x = GRID
    assert np.allclose(f.deriv(1, x), -2.0 + x + 9.0 * x**2)
    assert np.allclose(f.deriv(2, x), 1.0 + 18.0 * x)
    assert np.allclose(f.deriv(3, x), 18.0)
    assert np.allclose(f.deriv(4, x), 0.0)


def test_shifted_preserves_derivatives():
    f = FUNCTIONS["x^2"].shifted(0.5)
    assert np.allclose(f(GRID), GRID**2 - 0.5)
    assert np.allclose(f.deriv(1, GRID), 2 * GRID)
    assert np.allclose(f.deriv(2, GRID), 2.0)


def test_registry_lookup():
    assert get_function("x^3") is FUNCTIONS["x^3"]
    g = get_function([0.0, 0.0, 2.0])
    assert np.allclose(g(GRID), 2.0 * GRID**2)
    with pytest.raises(KeyError):
        get_function("sinh")
    with pytest.raises(ValueError):
        polynomial([])
    with pytest.raises(ValueError):
        FUNCTIONS["x"].deriv(5, 0.0)
