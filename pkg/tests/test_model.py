import math

import numpy as np
import pytest

from intdiff.errors import DegeneratePredictorError, NotErgodicError, StateSpaceError
from intdiff.functions import FUNCTIONS, polynomial
from intdiff.model import (
    StateSpace,
    check_cir_boundary,
    generator_apply,
    get_model,
    h_operator_apply,
    invariant_measure,
    k_f,
    mu_integral,
)

OU = get_model("ou")
CIR = get_model("cir")
TH_OU = [1.0, 0.0, 1.0]
TH_CIR = [2.0, 1.0, 1.0]
CONST = polynomial([3.0], name="const")


class TestOperators:
    def test_generator_linear(self):
        assert generator_apply(OU, "x", 2.0, TH_OU) == pytest.approx(-2.0)

    def test_generator_quadratic(self):
        # -2 alpha x^2 + sigma^2 at x = 1
        assert generator_apply(OU, "x^2", 1.0, TH_OU) == pytest.approx(-1.0)

    def test_generator_constant(self):
        assert generator_apply(OU, CONST, 0.7, TH_OU) == pytest.approx(0.0)

    def test_h_operator_linear(self):
        assert h_operator_apply(OU, "x", 2.0, TH_OU) == pytest.approx(-1.0)

    def test_h_operator_quadratic_origin(self):
        assert h_operator_apply(OU, "x^2", 0.0, TH_OU) == pytest.approx(1.0 / 3.0)

    def test_h_operator_constant(self):
        assert h_operator_apply(OU, CONST, -1.2, TH_OU) == pytest.approx(0.0)

    def test_outside_state_space_rejected(self):
        with pytest.raises(StateSpaceError):
            generator_apply(CIR, "x", -0.5, TH_CIR)
        with pytest.raises(StateSpaceError):
            h_operator_apply(CIR, "x", 0.0, TH_CIR)


class TestInvariantMeasure:
    def test_ou_gaussian_law(self):
        mu = invariant_measure(OU, TH_OU)
        x = mu.grid.nodes
        exact = np.exp(-x * x) / math.sqrt(math.pi)
        assert np.max(np.abs(mu.pdf_nodes - exact)) < 1e-10
        assert mu.integrate(np.ones_like(x)) == pytest.approx(1.0, abs=1e-8)
        assert np.all(mu.pdf_nodes >= 0)
        assert mu.tail_mass < 1e-10

    def test_cir_gamma_law(self):
        mu = invariant_measure(CIR, TH_CIR)
        x = mu.grid.nodes
        exact = 4.0**4 * x**3 * np.exp(-4.0 * x) / math.gamma(4.0)
        assert np.max(np.abs(mu.pdf_nodes - exact)) < 1e-9
        assert mu.integrate(np.ones_like(x)) == pytest.approx(1.0, abs=1e-8)
        assert mu.tail_mass < 1e-10

    def test_explosive_model_rejected(self):
        with pytest.raises(NotErgodicError):
            invariant_measure(OU, [-1.0, 0.0, 1.0])

    def test_param_dimension_checked(self):
        with pytest.raises(ValueError):
            invariant_measure(OU, [1.0, 0.0])

    def test_coefficient_fd_derivatives_agree(self):
        x = np.array([0.3, 0.9, 2.1])
        analytic = CIR.diffusion_dx(x, TH_CIR)
        fd = CIR._fd_x(CIR.diffusion, x, TH_CIR)
        assert np.max(np.abs(analytic - fd) / np.abs(analytic)) < 1e-5


class TestMuIntegral:
    def test_odd_moment_vanishes(self):
        assert mu_integral(OU, TH_OU, "x") == pytest.approx(0.0, abs=1e-9)

    def test_second_moment(self):
        assert mu_integral(OU, TH_OU, "x^2") == pytest.approx(0.5, abs=1e-9)

    def test_fourth_moment(self):
        g = polynomial([0, 0, 0, 0, 1.0])
        assert mu_integral(OU, TH_OU, g) == pytest.approx(0.75, abs=1e-9)


class TestKf:
    def test_ou_linear(self):
        assert k_f(OU, TH_OU, "x") == pytest.approx(-2.0 / 3.0, abs=1e-6)

    def test_ou_quadratic(self):
        assert k_f(OU, TH_OU, "x^2") == pytest.approx(-4.0 / 3.0, abs=1e-6)

    def test_cir_linear(self):
        # -2 kappa / 3 for the identity predictor
        assert k_f(CIR, TH_CIR, "x") == pytest.approx(-4.0 / 3.0, abs=1e-6)

    def test_constant_predictor_degenerate(self):
        with pytest.raises(DegeneratePredictorError):
            k_f(OU, TH_OU, CONST)

    def test_shift_invariance(self):
        base = k_f(OU, TH_OU, "x^2")
        for c in (-3.0, 0.25, 10.0):
            shifted = FUNCTIONS["x^2"].shifted(c)
            assert k_f(OU, TH_OU, shifted) == pytest.approx(base, abs=1e-8)


@pytest.mark.parametrize(
    "model,theta,fname",
    [(OU, TH_OU, n) for n in ("x", "x^2", "x^3", "exp(-x)")]
    + [(CIR, TH_CIR, n) for n in ("x", "x^2", "exp(-x)")],
)
def test_stationarity_identities(model, theta, fname):
    f = FUNCTIONS[fname]
    mu = invariant_measure(model, theta)
    x = mu.grid.nodes
    b2 = np.asarray(model.diffusion(x, theta), dtype=float) ** 2
    lf = model.drift(x, theta) * f.deriv(1, x) + 0.5 * b2 * f.deriv(2, x)
    hf = 0.5 * lf - b2 * f.deriv(2, x) / 12.0
    assert abs(mu.integrate(lf)) < 1e-7
    assert mu.integrate(hf) == pytest.approx(
        -mu.integrate(b2 * f.deriv(2, x)) / 12.0, abs=1e-7
    )


def test_state_space_validation():
    with pytest.raises(ValueError):
        StateSpace(2.0, 1.0)
    assert StateSpace(0.0, math.inf).contains(5.0)
    assert not StateSpace(0.0, math.inf).contains(-1.0)


def test_cir_boundary_warning():
    with pytest.warns(UserWarning):
        check_cir_boundary([1.0, 0.1, 1.0])


def test_stationary_sampler_matches_law():
    mu = invariant_measure(CIR, TH_CIR)
    rng = np.random.Generator(np.random.Philox(12))
    draws = mu.sample(rng, 200_000)
    assert draws.mean() == pytest.approx(1.0, abs=0.01)
    assert draws.var() == pytest.approx(0.25, abs=0.01)
