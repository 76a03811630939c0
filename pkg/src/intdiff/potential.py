"""Potential of centered functions and the limit objects built from it.

For a centered f* the potential u solves the Poisson equation L u = -f*.
Integrating the stationary Fokker-Planck identity (b^2 mu u')' = 2 mu L u
once gives the closed form

    u'(x) = -2 [ int_l^x f*(s) mu(s) ds ] / (b(x)^2 mu(x)),

which needs a single quadrature pass and no ODE solve.  All asymptotic
variances of window-average functionals, and the Jacobian/variance pair of
the one-lag estimating equation, are quadrature functionals of u'.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import BoundaryDegeneracyError, PreconditionError
from .functions import SmoothFunction, get_function
from .model import DiffusionModel, InvariantMeasure, invariant_measure, k_f

# density floor (relative to the mode) defining where pointwise residual
# checks are meaningful; outside, u' is dominated by quadrature roundoff
# but carries negligible stationary weight
INTERIOR_LEVEL = 1e-8


@dataclass(frozen=True)
class PotentialSolution:
    """Tabulated solution of the Poisson equation for a centered input."""

    fstar: SmoothFunction
    measure: InvariantMeasure
    u_prime_nodes: np.ndarray
    u_nodes: np.ndarray
    interior: np.ndarray  # mask of nodes with non-negligible density

    def u_prime(self, x):
        return np.interp(
            np.asarray(x, dtype=float), self.measure.grid.nodes, self.u_prime_nodes
        )

    def u(self, x):
        return np.interp(
            np.asarray(x, dtype=float), self.measure.grid.nodes, self.u_nodes
        )

    def poisson_residual(self, model: DiffusionModel, theta) -> float:
        """max over interior nodes of |L u + f*| / (1 + |f*|), with u''
        from spectral differentiation of the tabulated u'."""
        g = self.measure.grid
        x = g.nodes
        th = model.params(theta)
        upp = g.derivative(self.u_prime_nodes)
        b = np.asarray(model.diffusion(x, th), dtype=float)
        lu = model.drift(x, th) * self.u_prime_nodes + 0.5 * b * b * upp
        fx = self.fstar(x)
        rel = np.abs(lu + fx) / (1.0 + np.abs(fx))
        return float(np.max(rel[self.interior]))


@dataclass(frozen=True)
class LimitObjects:
    """Limit of the scaled one-lag estimating equation and its CLT pieces."""

    gamma: np.ndarray  # 2-vector, limit of (n delta)^-1 G_n at (theta0; theta)
    w: np.ndarray  # 2x2 limit Jacobian at theta
    v0: np.ndarray  # 2x2 asymptotic covariance at theta0
    f1star: SmoothFunction
    f2star: SmoothFunction
    w_condition: float
    w_singular: bool


def center(model: DiffusionModel, theta, f, measure: Optional[InvariantMeasure] = None) -> SmoothFunction:
    """f minus its stationary mean."""
    f = get_function(f)
    mu = measure if measure is not None else invariant_measure(model, theta)
    return f.shifted(mu.integrate(f), name=f"{f.name}*")


def potential_derivative(
    model: DiffusionModel,
    theta,
    fstar,
    measure: Optional[InvariantMeasure] = None,
) -> PotentialSolution:
    """Solve the Poisson equation via the closed form for u'.

    The cumulative integral of f* mu starts at 0 on the truncated left edge
    and must return to ~0 on the right (centering); the tiny residual is
    redistributed linearly so both ends vanish exactly, which prevents
    spurious blow-up of u' where the density decays.
    u is the cumulative integral of u', recentred to stationary mean zero.
    """
    fstar = get_function(fstar)
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    g = mu.grid
    x = g.nodes
    fx = fstar(x)
    mean = g.integrate(fx * mu.pdf_nodes)
    if abs(mean) > 1e-8:
        raise PreconditionError(
            f"potential input must be centered: stationary mean is {mean:.3e}"
        )
    cum = g.cumulative(fx * mu.pdf_nodes)
    cum -= cum[-1] * (x - g.lower) / (g.upper - g.lower)
    b = np.asarray(model.diffusion(x, th), dtype=float)
    u_prime = -2.0 * cum / (b * b * mu.pdf_nodes)
    if not np.all(np.isfinite(u_prime)):
        raise BoundaryDegeneracyError("potential derivative nonfinite at the grid edge")
    u = g.cumulative(u_prime)
    u -= g.integrate(u * mu.pdf_nodes)
    interior = mu.pdf_nodes >= INTERIOR_LEVEL * np.max(mu.pdf_nodes)
    return PotentialSolution(
        fstar=fstar, measure=mu, u_prime_nodes=u_prime, u_nodes=u, interior=interior
    )


def variance_identity_forms(
    model: DiffusionModel, theta, f, measure: Optional[InvariantMeasure] = None
):
    """Both closed forms of the CLT variance: mu([u' b]^2) and 2 mu(f* u).

    They agree exactly in theory; their numerical gap measures quadrature
    quality.  f is centered internally when needed.
    """
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    fstar = center(model, th, f, measure=mu)
    sol = potential_derivative(model, th, fstar, measure=mu)
    x = mu.grid.nodes
    b = np.asarray(model.diffusion(x, th), dtype=float)
    grad_form = mu.integrate((sol.u_prime_nodes * b) ** 2)
    product_form = 2.0 * mu.integrate(fstar(x) * sol.u_nodes)
    return float(grad_form), float(product_form), sol


def avar_scalar(model: DiffusionModel, theta, f, measure: Optional[InvariantMeasure] = None) -> float:
    """Asymptotic variance of sqrt(n delta) times the window average of the
    centered f, in the gradient form mu([u' b]^2)."""
    return variance_identity_forms(model, theta, f, measure=measure)[0]


def _theta_step(theta: np.ndarray, index: int, rel: float = 1e-5) -> float:
    return rel * max(1.0, abs(float(theta[index])))


def _k_and_mean(model, theta, f):
    mu = invariant_measure(model, theta)
    return k_f(model, theta, f, measure=mu), mu.integrate(f)


def limit_objects(
    model: DiffusionModel,
    theta0,
    theta,
    f,
    free: Optional[Sequence[int]] = None,
) -> LimitObjects:
    """gamma(theta0; theta), W(theta) and V0(f) for the one-lag equation.

    ``free`` names the two parameter coordinates being estimated (defaults
    to (0, 1) for two-parameter models).  Derivatives in W are central
    differences with relative step 1e-5.
    """
    f = get_function(f)
    th0 = model.params(theta0)
    th = model.params(theta)
    if free is None:
        if model.dim != 2:
            raise ValueError("free parameter indices are required when dim != 2")
        free = (0, 1)
    free = tuple(int(j) for j in free)
    if len(free) != 2:
        raise ValueError("the one-lag theory estimates exactly two parameters")

    mu0 = invariant_measure(model, th0)
    x0 = mu0.grid.nodes
    fx0 = f(x0)
    mean0 = mu0.integrate(fx0)
    second0 = mu0.integrate(fx0 * fx0)
    b0 = np.asarray(model.diffusion(x0, th0), dtype=float)
    lf0 = model.drift(x0, th0) * f.deriv(1, x0) + 0.5 * b0 * b0 * f.deriv(2, x0)
    flf0 = mu0.integrate(fx0 * lf0)
    carre0 = mu0.integrate((b0 * f.deriv(1, x0)) ** 2)
    kf0 = k_f(model, th0, f, measure=mu0)

    mu_t = invariant_measure(model, th)
    kf_t = k_f(model, th, f, measure=mu_t)
    mean_t = mu_t.integrate(f)

    gamma = np.array(
        [
            kf_t * (mean_t - mean0),
            flf0 + carre0 / 6.0 - kf_t * (second0 - mean0 * mean_t),
        ]
    )

    # W = Z(f) A(theta): Z from stationary moments at theta0, A from the
    # theta-gradient of the first-order projection coefficients
    z = np.array([[1.0, mean0], [mean0, second0]])
    a = np.empty((2, 2))
    for col, j in enumerate(free):
        h = _theta_step(th, j)
        tp, tm = th.copy(), th.copy()
        tp[j] += h
        tm[j] -= h
        kp, mp = _k_and_mean(model, tp, f)
        km, mm = _k_and_mean(model, tm, f)
        a[0, col] = (kp * mp - km * mm) / (2.0 * h)
        a[1, col] = -(kp - km) / (2.0 * h)
    w = z @ a
    sv = np.linalg.svd(w, compute_uv=False)
    cond = float(sv[0] / sv[1]) if sv[1] > 0 else float("inf")

    # CLT covariance at theta0, from the potentials of the two centered
    # components of the estimating equation's martingale part
    f1 = SmoothFunction(
        lambda q: kf0 * (mean0 - f(q)),
        d1=lambda q: -kf0 * f.deriv(1, q),
        d2=lambda q: -kf0 * f.deriv(2, q),
        name="f1*",
    )

    def f2_eval(q):
        q = np.asarray(q, dtype=float)
        bq = np.asarray(model.diffusion(q, th0), dtype=float)
        lfq = model.drift(q, th0) * f.deriv(1, q) + 0.5 * bq * bq * f.deriv(2, q)
        fq = f(q)
        return fq * lfq + (bq * f.deriv(1, q)) ** 2 / 6.0 - kf0 * fq * (fq - mean0)

    f2 = SmoothFunction(f2_eval, name="f2*")

    sol1 = potential_derivative(model, th0, f1, measure=mu0)
    sol2 = potential_derivative(model, th0, f2, measure=mu0)
    g1 = sol1.u_prime_nodes
    g2 = sol2.u_prime_nodes + fx0 * f.deriv(1, x0)
    v0 = np.empty((2, 2))
    v0[0, 0] = mu0.integrate((g1 * b0) ** 2)
    v0[1, 1] = mu0.integrate((g2 * b0) ** 2)
    v0[0, 1] = v0[1, 0] = mu0.integrate(g1 * g2 * b0 * b0)

    return LimitObjects(
        gamma=gamma,
        w=w,
        v0=v0,
        f1star=f1,
        f2star=f2,
        w_condition=cond,
        w_singular=not np.isfinite(cond) or cond > 1e10,
    )
