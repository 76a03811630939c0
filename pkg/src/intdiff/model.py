"""Scalar ergodic diffusion models and their stationary calculus.

A model is dX = a(X; theta) dt + b(X; theta) dB on an open interval (l, r).
This module provides the differential operators acting on test functions,
the invariant measure built from the classical scale/speed construction,
and stationary-moment quadrature.  Ergodicity, rho-mixing and membership
of test functions in the potential's domain are user-asserted
preconditions; only integrability of the speed density is checked.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegeneratePredictorError, NotErgodicError, StateSpaceError
from .functions import SmoothFunction, get_function
from .quadrature import Grid, build_grid

# Relative density level defining the truncation cut points.
TRUNCATION_LEVEL = 1e-12


@dataclass(frozen=True)
class StateSpace:
    """Open interval (lower, upper); either end may be infinite."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"require lower < upper, got ({self.lower}, {self.upper})")

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x > self.lower) & (x < self.upper)))


def as_params(theta, dim: int) -> np.ndarray:
    """Validate and coerce a parameter vector of the declared dimension."""
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if th.shape != (dim,):
        raise ValueError(f"parameter vector must have shape ({dim},), got {th.shape}")
    if not np.all(np.isfinite(th)):
        raise ValueError("parameter vector must be finite")
    return th


@dataclass(frozen=True)
class DiffusionModel:
    """Drift/diffusion pair with optional analytic coefficient derivatives.

    ``drift`` and ``diffusion`` must be numpy-vectorized in x.  Missing
    derivatives fall back to central differences with step
    ``max(1e-6, 1e-6 |x|)``.
    """

    name: str
    state: StateSpace
    dim: int
    drift: Callable
    diffusion: Callable
    drift_dx: Optional[Callable] = None
    diffusion_dx: Optional[Callable] = None
    diffusion_dxx: Optional[Callable] = None
    # exact stationary sampler (rng, theta, size) -> draws, when available
    exact_stationary: Optional[Callable] = field(default=None, repr=False)
    # exact one-substep transition (x, theta, dt, db, z2) -> x_next, where db
    # is the Brownian increment over dt and z2 an independent standard normal;
    # the pair (x_next, db) must have the model's exact joint law
    exact_transition: Optional[Callable] = field(default=None, repr=False)
    constant_diffusion: bool = False

    def params(self, theta) -> np.ndarray:
        return as_params(theta, self.dim)

    def check_state(self, x):
        if not self.state.contains(x):
            raise StateSpaceError(
                f"x outside state space ({self.state.lower}, {self.state.upper})"
            )

    def _fd_x(self, fn: Callable, x, theta):
        x = np.asarray(x, dtype=float)
        h = np.maximum(1e-6, 1e-6 * np.abs(x))
        return (fn(x + h, theta) - fn(x - h, theta)) / (2.0 * h)

    def drift_dx_eval(self, x, theta):
        if self.drift_dx is not None:
            return self.drift_dx(np.asarray(x, dtype=float), theta)
        return self._fd_x(self.drift, x, theta)

    def diffusion_dx_eval(self, x, theta):
        if self.diffusion_dx is not None:
            return self.diffusion_dx(np.asarray(x, dtype=float), theta)
        return self._fd_x(self.diffusion, x, theta)


@dataclass(frozen=True)
class InvariantMeasure:
    """Normalized stationary density tabulated on a truncated grid."""

    model: DiffusionModel
    theta: np.ndarray
    grid: Grid
    log_density: Callable  # unnormalized log speed density, x -> real
    normalizer: float  # integral of exp(log_density) over the grid
    pdf_nodes: np.ndarray  # normalized density at the grid nodes
    cdf_nodes: np.ndarray
    tail_mass: float

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > self.grid.lower) & (x < self.grid.upper)
        out = np.zeros_like(x, dtype=float)
        xi = np.clip(x, self.grid.nodes[0], self.grid.nodes[-1])
        out = np.where(inside, np.interp(xi, self.grid.nodes, self.pdf_nodes), 0.0)
        return out if out.ndim else float(out)

    def integrate(self, values_or_fn) -> float:
        vals = (
            values_or_fn(self.grid.nodes)
            if callable(values_or_fn)
            else np.asarray(values_or_fn, dtype=float)
        )
        return self.grid.integrate(vals * self.pdf_nodes)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Stationary draws; exact sampler when the model provides one,
        otherwise inverse CDF with linear interpolation on the grid."""
        if self.model.exact_stationary is not None:
            return self.model.exact_stationary(rng, self.theta, size)
        u = rng.random(size)
        return np.interp(u, self.cdf_nodes, self.grid.nodes)


def _truncation_interval(model: DiffusionModel, theta: np.ndarray):
    """Search for cut points where the speed density has decayed to
    TRUNCATION_LEVEL of its maximum, expanding geometrically from the mode."""
    lo_bound, hi_bound = model.state.lower, model.state.upper
    # seed interval strictly inside the state space
    if math.isfinite(lo_bound) and math.isfinite(hi_bound):
        width = hi_bound - lo_bound
        lo, hi = lo_bound + 1e-3 * width, hi_bound - 1e-3 * width
    elif math.isfinite(lo_bound):
        lo, hi = lo_bound + 0.5, lo_bound + 2.0
    elif math.isfinite(hi_bound):
        lo, hi = hi_bound - 2.0, hi_bound - 0.5
    else:
        lo, hi = -1.0, 1.0

    log_cut = math.log(TRUNCATION_LEVEL)

    def log_speed(xs: np.ndarray) -> np.ndarray:
        b = np.asarray(model.diffusion(xs, theta), dtype=float)
        if np.any(b <= 0):
            raise NotErgodicError("diffusion coefficient must be positive on (l, r)")
        integrand = 2.0 * np.asarray(model.drift(xs, theta), dtype=float) / (b * b)
        scale = np.concatenate(
            ([0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(xs)))
        )
        anchor = scale[xs.size // 2]
        return (scale - anchor) - 2.0 * np.log(b)

    gap_history = []
    for _ in range(200):
        xs = np.linspace(lo, hi, 1601)
        logm = log_speed(xs)
        if not np.all(np.isfinite(logm)):
            raise NotErgodicError("speed density evaluated nonfinite during truncation search")
        top = float(np.max(logm))
        gap = logm - top
        need_lo = gap[0] > log_cut
        need_hi = gap[-1] > log_cut
        if not need_lo and not need_hi:
            # trim the overshoot: cut just outside the level crossing, so the
            # edge density sits at ~TRUNCATION_LEVEL (dividing by the density
            # near the cuts stays well conditioned)
            above = np.nonzero(gap > log_cut)[0]
            if above.size == 0:
                return lo, hi
            return float(xs[above[0] - 1]), float(xs[above[-1] + 1])
        gap_history.append(max(float(gap[0]), float(gap[-1])))
        if len(gap_history) >= 12 and gap_history[-1] >= gap_history[-12] - 1e-9:
            raise NotErgodicError(
                "speed density does not decay toward the boundary; "
                "normalizer diverges (model not ergodic at this parameter)"
            )
        span = hi - lo
        if need_lo:
            lo = lo_bound + 0.5 * (lo - lo_bound) if math.isfinite(lo_bound) else lo - span
        if need_hi:
            hi = hi_bound - 0.5 * (hi_bound - hi) if math.isfinite(hi_bound) else hi + span
    raise NotErgodicError("truncation search did not terminate; speed density not integrable")


def invariant_measure(model: DiffusionModel, theta, base_panels: int = 28) -> InvariantMeasure:
    """Stationary law from the speed density m(x) = b^-2 exp(int 2a/b^2).

    The reference point of the scale integral is the grid midpoint; it only
    shifts the log density by a constant that cancels on normalization.
    """
    th = model.params(theta)
    lo, hi = _truncation_interval(model, th)
    grid = build_grid(
        lo,
        hi,
        base_panels=base_panels,
        grade_lower=math.isfinite(model.state.lower),
        grade_upper=math.isfinite(model.state.upper),
    )
    x = grid.nodes
    b = np.asarray(model.diffusion(x, th), dtype=float)
    if np.any(b <= 0):
        raise NotErgodicError("diffusion coefficient must be positive on the grid")
    integrand = 2.0 * np.asarray(model.drift(x, th), dtype=float) / (b * b)
    scale = grid.cumulative(integrand)
    scale -= scale[x.size // 2]
    log_m = scale - 2.0 * np.log(b)
    top = float(np.max(log_m))
    m = np.exp(log_m - top)
    z = grid.integrate(m)
    if not (np.isfinite(z) and z > 0):
        raise NotErgodicError("normalizer overflow/divergence")
    pdf = m / z
    cdf = grid.cumulative(pdf)
    cdf = np.clip(cdf / cdf[-1], 0.0, 1.0)

    # exponential-slope tail estimate from the unnormalized density
    slope_lo = (log_m[1] - log_m[0]) / (x[1] - x[0])
    slope_hi = (log_m[-1] - log_m[-2]) / (x[-1] - x[-2])
    tail = 0.0
    for edge, slope, bound in ((0, slope_lo, model.state.lower), (-1, slope_hi, model.state.upper)):
        decay = 1.0 / max(abs(slope), 1e-300)
        if math.isfinite(bound):
            decay = min(decay, abs(x[edge] - bound))
        tail += pdf[edge] * decay

    scale_interp = scale.copy()

    def log_density(q):
        q = np.asarray(q, dtype=float)
        return np.interp(q, x, scale_interp) - 2.0 * np.log(
            np.asarray(model.diffusion(q, th), dtype=float)
        )

    return InvariantMeasure(
        model=model,
        theta=th,
        grid=grid,
        log_density=log_density,
        normalizer=z * math.exp(top),
        pdf_nodes=pdf,
        cdf_nodes=cdf,
        tail_mass=float(tail),
    )


def generator_apply(model: DiffusionModel, f, x, theta):
    """a f' + (1/2) b^2 f'' at x."""
    model.check_state(x)
    f = get_function(f)
    th = model.params(theta)
    x = np.asarray(x, dtype=float)
    b = model.diffusion(x, th)
    out = model.drift(x, th) * f.deriv(1, x) + 0.5 * b * b * f.deriv(2, x)
    return out if out.ndim else float(out)


def h_operator_apply(model: DiffusionModel, f, x, theta):
    """(1/2) generator - (1/12) b^2 f''; the first-order drift of window
    averages of f around the window's left endpoint."""
    model.check_state(x)
    f = get_function(f)
    th = model.params(theta)
    x = np.asarray(x, dtype=float)
    b2 = model.diffusion(x, th) ** 2
    out = 0.5 * generator_apply(model, f, x, th) - b2 * f.deriv(2, x) / 12.0
    return out if np.ndim(out) else float(out)


def mu_integral(model: DiffusionModel, theta, g, measure: Optional[InvariantMeasure] = None):
    """Stationary expectation of g by quadrature on the truncated grid."""
    mu = measure if measure is not None else invariant_measure(model, theta)
    g = get_function(g) if isinstance(g, (str, SmoothFunction)) else g
    return mu.integrate(g)


def k_f(model: DiffusionModel, theta, f, measure: Optional[InvariantMeasure] = None) -> float:
    """First-order decay rate of the lag-1 projection coefficient:
    Var(f)^-1 [ mu(f Lf) + (1/6) mu((b f')^2) ]."""
    f = get_function(f)
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    x = mu.grid.nodes
    fx = f(x)
    mean = mu.integrate(fx)
    var = mu.integrate(fx * fx) - mean * mean
    if var <= 1e-12:
        raise DegeneratePredictorError(
            f"stationary variance of predictor is {var:.3e} (<= 1e-12)"
        )
    b = np.asarray(model.diffusion(x, th), dtype=float)
    lf = model.drift(x, th) * f.deriv(1, x) + 0.5 * b * b * f.deriv(2, x)
    carre = (b * f.deriv(1, x)) ** 2
    return (mu.integrate(fx * lf) + mu.integrate(carre) / 6.0) / var


# ---------------------------------------------------------------------------
# Built-in models, addressable by name.
# ---------------------------------------------------------------------------


def _make_ou() -> DiffusionModel:
    """Mean-reverting Gaussian model, parameters (alpha, m, sigma)."""

    def exact_stationary(rng, theta, size):
        alpha, m, sigma = theta
        if alpha <= 0:
            raise NotErgodicError("mean-reversion rate must be positive for stationarity")
        return m + sigma / math.sqrt(2.0 * alpha) * rng.standard_normal(size)

    def exact_transition(x, theta, dt, db, z2):
        # X_{t+dt} = m + e^(-a dt)(X_t - m) + sigma * I with the Gaussian
        # innovation I decomposed on (db, independent noise) so that the
        # returned state is jointly exact with the Brownian increment:
        # Cov(I, db) = (1 - e^(-a dt))/a, Var(I) = (1 - e^(-2 a dt))/(2a).
        alpha, m, sigma = theta
        e = math.exp(-alpha * dt)
        cov = -math.expm1(-alpha * dt) / alpha
        var_i = -math.expm1(-2.0 * alpha * dt) / (2.0 * alpha)
        c1 = cov / dt
        c2 = math.sqrt(max(var_i - cov * cov / dt, 0.0))
        return m + e * (x - m) + sigma * (c1 * db + c2 * z2)

    return DiffusionModel(
        name="ou",
        state=StateSpace(),
        dim=3,
        drift=lambda x, th: -th[0] * (x - th[1]),
        diffusion=lambda x, th: th[2] * np.ones_like(np.asarray(x, dtype=float)),
        drift_dx=lambda x, th: -th[0] * np.ones_like(np.asarray(x, dtype=float)),
        diffusion_dx=lambda x, th: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion_dxx=lambda x, th: np.zeros_like(np.asarray(x, dtype=float)),
        exact_stationary=exact_stationary,
        exact_transition=exact_transition,
        constant_diffusion=True,
    )


def _make_cir() -> DiffusionModel:
    """Square-root model on (0, inf), parameters (kappa, beta, sigma)."""
    return DiffusionModel(
        name="cir",
        state=StateSpace(0.0, math.inf),
        dim=3,
        drift=lambda x, th: th[0] * (th[1] - x),
        diffusion=lambda x, th: th[2] * np.sqrt(np.asarray(x, dtype=float)),
        drift_dx=lambda x, th: -th[0] * np.ones_like(np.asarray(x, dtype=float)),
        diffusion_dx=lambda x, th: 0.5 * th[2] / np.sqrt(np.asarray(x, dtype=float)),
        diffusion_dxx=lambda x, th: -0.25 * th[2] * np.asarray(x, dtype=float) ** -1.5,
    )


MODELS = {"ou": _make_ou(), "cir": _make_cir()}


def get_model(name: str) -> DiffusionModel:
    """Look up a registered model; parameter orders: ou=(alpha, m, sigma),
    cir=(kappa, beta, sigma)."""
    if name not in MODELS:
        raise KeyError(f"unknown model {name!r}; registered: {sorted(MODELS)}")
    return MODELS[name]


def check_cir_boundary(theta) -> None:
    """Warn when the square-root model's lower boundary is attainable."""
    kappa, beta, sigma = as_params(theta, 3)
    if 2.0 * kappa * beta < sigma * sigma:
        warnings.warn(
            "2*kappa*beta < sigma^2: the boundary at 0 is attainable; "
            "simulation clips excursions and the stationary density is unbounded",
            UserWarning,
            stacklevel=2,
        )
