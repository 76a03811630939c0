"""Prediction-based estimating equations for window-average observations.

Two predictor spaces are supported: the constant predictor (q=0), whose
equation matches sample averages of f against a first-order-corrected
stationary mean, and the one-lag linear predictor (q=1), whose projection
coefficients (a0, a1) come from one of three sources: a small-delta
expansion driven by quadrature, exact moments for registered tractable
pairs, or a Monte Carlo moment provider with a fixed derived seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegeneratePredictorError, NoRootError, PreconditionError
from .functions import SmoothFunction, get_function
from .model import DiffusionModel, InvariantMeasure, invariant_measure, k_f
from .simulate import simulate_windows

COEFF_MODES = ("exact", "expansion", "monte_carlo")


@dataclass(frozen=True)
class PredictorSpec:
    """Predictor function, lag order and coefficient source."""

    f: SmoothFunction
    q: int = 1
    coeff_mode: str = "expansion"

    def __post_init__(self):
        if self.q not in (0, 1):
            raise ValueError("lag order q must be 0 or 1")
        if self.coeff_mode not in COEFF_MODES:
            raise ValueError(f"coeff_mode must be one of {COEFF_MODES}")


@dataclass(frozen=True)
class CoefficientVector:
    """One-lag projection coefficients at a given window length."""

    a0: float
    a1: float
    delta: float
    mode: str

    def __post_init__(self):
        if not (math.isfinite(self.a0) and math.isfinite(self.a1)):
            raise ValueError("projection coefficients must be finite")


@dataclass(frozen=True)
class MomentProvider:
    """First and second window-average moments of f, each theta -> real,
    at the fixed window length delta."""

    ef: Callable
    ef2: Callable
    eff: Callable
    delta: float


@dataclass(frozen=True)
class EstimatorResult:
    theta_hat: np.ndarray
    gn_norm: float
    iterations: int
    converged: bool
    multistart_origin: int  # index into the start list; -1 = bisection fallback


# ---------------------------------------------------------------------------
# Moment expansions in the window length.
# ---------------------------------------------------------------------------


def moment_corrections(model: DiffusionModel, theta, f, measure=None):
    """First-order coefficients (M0, M1, M2) of the three moment expansions
    [E f(Y1)]^2, E f^2(Y1), E f(Y1)f(Y2) around the stationary values."""
    f = get_function(f)
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    x = mu.grid.nodes
    fx = f(x)
    b = np.asarray(model.diffusion(x, th), dtype=float)
    b2 = b * b
    lf = model.drift(x, th) * f.deriv(1, x) + 0.5 * b2 * f.deriv(2, x)
    mean = mu.integrate(fx)
    flf = mu.integrate(fx * lf)
    fb2f2 = mu.integrate(fx * b2 * f.deriv(2, x))
    b2f2 = mu.integrate(b2 * f.deriv(2, x))
    carre = mu.integrate((b * f.deriv(1, x)) ** 2)
    m0 = -mean * b2f2 / 6.0
    m1 = flf - fb2f2 / 6.0 + carre / 3.0
    m2 = 2.0 * flf - fb2f2 / 6.0 + carre / 2.0
    return m0, m1, m2


def moment_expansions(model: DiffusionModel, theta, delta: float, f, measure=None):
    """First-order values of ([E f(Y1)]^2, E f^2(Y1), E f(Y1)f(Y2))."""
    f = get_function(f)
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    fx = f(mu.grid.nodes)
    mean = mu.integrate(fx)
    second = mu.integrate(fx * fx)
    m0, m1, m2 = moment_corrections(model, th, f, measure=mu)
    return mean * mean + delta * m0, second + delta * m1, second + delta * m2


def coeffs_expansion(model: DiffusionModel, theta, delta: float, f, measure=None) -> CoefficientVector:
    """a1 = 1 + delta K_f, a0 = -delta K_f mu(f); the leading terms of the
    projection coefficients for small windows."""
    f = get_function(f)
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    kf = k_f(model, th, f, measure=mu)
    mean = mu.integrate(f)
    return CoefficientVector(
        a0=-delta * kf * mean, a1=1.0 + delta * kf, delta=delta, mode="expansion"
    )


def coeffs_exact(provider: MomentProvider, theta, delta: Optional[float] = None) -> CoefficientVector:
    """Projection coefficients from exact window-average moments."""
    d = provider.delta if delta is None else delta
    if delta is not None and not math.isclose(d, provider.delta, rel_tol=1e-12):
        raise PreconditionError("provider was built for a different window length")
    ef = provider.ef(theta)
    ef2 = provider.ef2(theta)
    eff = provider.eff(theta)
    var = ef2 - ef * ef
    if var <= 1e-12:
        raise DegeneratePredictorError(f"window-average variance {var:.3e} (<= 1e-12)")
    a1 = (eff - ef * ef) / var
    return CoefficientVector(a0=ef * (1.0 - a1), a1=a1, delta=d, mode="exact")


# -- exact provider for the mean-reverting Gaussian model with f(x) = x -----


def _psi(u: float) -> float:
    """2(u - 1 + e^-u)/u^2, the window-average variance factor."""
    if u < 1e-2:
        return 1.0 - u / 3.0 + u * u / 12.0 - u**3 / 60.0 + u**4 / 360.0
    return 2.0 * (u + math.expm1(-u)) / (u * u)


def _phi(u: float) -> float:
    """(1 - e^-u)^2 / u^2, the adjacent-window covariance factor."""
    return (math.expm1(-u) / u) ** 2


def ou_linear_provider(delta: float) -> MomentProvider:
    """Closed-form integrated moments of the Gaussian mean-reverting model
    for the identity predictor f(x) = x."""

    def stationary_var(theta):
        alpha, _, sigma = np.asarray(theta, dtype=float)
        return sigma * sigma / (2.0 * alpha)

    def ef(theta):
        return float(np.asarray(theta, dtype=float)[1])

    def ef2(theta):
        alpha = float(np.asarray(theta, dtype=float)[0])
        m = ef(theta)
        return m * m + stationary_var(theta) * _psi(alpha * delta)

    def eff(theta):
        alpha = float(np.asarray(theta, dtype=float)[0])
        m = ef(theta)
        return m * m + stationary_var(theta) * _phi(alpha * delta)

    return MomentProvider(ef=ef, ef2=ef2, eff=eff, delta=delta)


EXACT_PROVIDERS = {("ou", "x"): ou_linear_provider}


def exact_provider_for(model: DiffusionModel, f, delta: float) -> MomentProvider:
    f = get_function(f)
    key = (model.name, f.name)
    if key not in EXACT_PROVIDERS:
        raise KeyError(
            f"no exact moment provider registered for {key}; available: "
            f"{sorted(EXACT_PROVIDERS)}"
        )
    return EXACT_PROVIDERS[key](delta)


def mc_provider(
    model: DiffusionModel,
    f,
    delta: float,
    n_pairs: int = 100_000,
    substeps: int = 16,
    seed: int = 20_17,
) -> MomentProvider:
    """Moment provider that simulates adjacent window pairs at each theta
    with a fixed derived seed (common random numbers across calls)."""
    f = get_function(f)

    def moments(theta):
        sim = simulate_windows(
            model, theta, delta, substeps, n_pairs, (seed, 101), windows_per_path=2
        )
        f1 = f(sim["y"][:, 0])
        f2 = f(sim["y"][:, 1])
        return float(f1.mean()), float((f1 * f1).mean()), float((f1 * f2).mean())

    return MomentProvider(
        ef=lambda th: moments(th)[0],
        ef2=lambda th: moments(th)[1],
        eff=lambda th: moments(th)[2],
        delta=delta,
    )


# ---------------------------------------------------------------------------
# Estimating functions.
# ---------------------------------------------------------------------------


def corrected_mean(model: DiffusionModel, theta, delta: float, f, measure=None) -> float:
    """mu(f) plus the first-order window correction delta * mu(Hf)."""
    f = get_function(f)
    th = model.params(theta)
    mu = measure if measure is not None else invariant_measure(model, th)
    x = mu.grid.nodes
    b2 = np.asarray(model.diffusion(x, th), dtype=float) ** 2
    # mu(Hf) = -(1/12) mu(b^2 f'') by stationarity
    return mu.integrate(f) - delta * mu.integrate(b2 * f.deriv(2, x)) / 12.0


def gn_simple(
    theta,
    y: np.ndarray,
    model: DiffusionModel,
    f,
    delta: float,
    mean_mode: str = "corrected",
    provider: Optional[MomentProvider] = None,
) -> float:
    """Constant-predictor estimating function: sum of f(y_i) - m(theta).

    mean_mode selects m(theta): "corrected" (default) adds the first-order
    window correction, "stationary" uses the plain stationary mean, and
    "exact" takes E f(Y1) from the given moment provider.
    """
    f = get_function(f)
    y = np.asarray(y, dtype=float)
    if mean_mode == "exact":
        if provider is None:
            raise PreconditionError("mean_mode='exact' requires a moment provider")
        m = provider.ef(theta)
    elif mean_mode == "stationary":
        m = invariant_measure(model, model.params(theta)).integrate(f)
    elif mean_mode == "corrected":
        m = corrected_mean(model, theta, delta, f)
    else:
        raise ValueError(f"unknown mean_mode {mean_mode!r}")
    return float(np.sum(f(y)) - y.size * m)


@dataclass(frozen=True)
class OneLagStats:
    """Sufficient statistics of the one-lag equation for fixed data."""

    count: int
    s_cur: float  # sum over i>=2 of f(y_i)
    s_prev: float  # sum over i>=2 of f(y_{i-1})
    s_cross: float  # sum of f(y_i) f(y_{i-1})
    s_prev_sq: float  # sum of f(y_{i-1})^2

    def gn(self, a0: float, a1: float) -> np.ndarray:
        return np.array(
            [
                self.s_cur - self.count * a0 - a1 * self.s_prev,
                self.s_cross - a0 * self.s_prev - a1 * self.s_prev_sq,
            ]
        )


def onelag_stats(fy: np.ndarray) -> OneLagStats:
    fy = np.asarray(fy, dtype=float)
    if fy.size < 3:
        raise PreconditionError("one-lag equation needs at least 3 observations")
    cur, prev = fy[1:], fy[:-1]
    return OneLagStats(
        count=cur.size,
        s_cur=float(cur.sum()),
        s_prev=float(prev.sum()),
        s_cross=float((cur * prev).sum()),
        s_prev_sq=float((prev * prev).sum()),
    )


class OneLagCoeffs:
    """Coefficient source (a0, a1)(theta) for the one-lag equation, cached
    by exact parameter value (multistart grids revisit the same points)."""

    def __init__(
        self,
        model: DiffusionModel,
        f,
        delta: float,
        mode: str = "expansion",
        provider: Optional[MomentProvider] = None,
        mc_pairs: int = 100_000,
        mc_seed: int = 20_17,
    ):
        if mode not in COEFF_MODES:
            raise ValueError(f"coeff_mode must be one of {COEFF_MODES}")
        self.model = model
        self.f = get_function(f)
        self.delta = float(delta)
        self.mode = mode
        if mode == "exact" and provider is None:
            provider = exact_provider_for(model, self.f, self.delta)
        if mode == "monte_carlo" and provider is None:
            provider = mc_provider(
                model, self.f, self.delta, n_pairs=mc_pairs, seed=mc_seed
            )
        self.provider = provider
        self._cache: dict = {}

    def __call__(self, theta) -> CoefficientVector:
        key = tuple(np.asarray(theta, dtype=float))
        hit = self._cache.get(key)
        if hit is None:
            if self.mode == "expansion":
                hit = coeffs_expansion(self.model, theta, self.delta, self.f)
            else:
                cv = coeffs_exact(self.provider, theta)
                hit = CoefficientVector(cv.a0, cv.a1, cv.delta, self.mode)
            self._cache[key] = hit
        return hit


def gn_onelag(
    theta,
    y: np.ndarray,
    model: DiffusionModel,
    f,
    delta: float,
    coeff_mode: str = "expansion",
    provider: Optional[MomentProvider] = None,
) -> np.ndarray:
    """One-lag estimating function; 2-vector paired with (1, f(y_{i-1}))."""
    f = get_function(f)
    stats = onelag_stats(f(np.asarray(y, dtype=float)))
    coeffs = OneLagCoeffs(model, f, delta, coeff_mode, provider)(theta)
    return stats.gn(coeffs.a0, coeffs.a1)


# ---------------------------------------------------------------------------
# Root finding.
# ---------------------------------------------------------------------------

_MULTISTART_FRACTIONS = (0.15, 0.5, 0.85)


def _fd_jacobian(gn, theta, g0):
    d = theta.size
    jac = np.empty((g0.size, d))
    for j in range(d):
        h = 1e-6 * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        jac[:, j] = (np.atleast_1d(gn(tp)) - g0) / h
    return jac


def _newton(gn, jacobian, start, lo, hi, ref, max_iter=60):
    x = start.copy()
    g = np.atleast_1d(np.asarray(gn(x), dtype=float))
    iters = 0
    for _ in range(max_iter):
        norm = np.linalg.norm(g)
        if norm <= ref:
            return x, norm, iters, True
        jac = jacobian(x) if jacobian is not None else _fd_jacobian(gn, x, g)
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        accepted = False
        for _ in range(31):
            cand = x + lam * step
            if np.all(cand > lo) and np.all(cand < hi):
                g_new = np.atleast_1d(np.asarray(gn(cand), dtype=float))
                if np.linalg.norm(g_new) < norm:
                    x, g = cand, g_new
                    accepted = True
                    break
            lam *= 0.5
        iters += 1
        if not accepted:
            break
        if np.linalg.norm(lam * step) < 1e-12 * (1.0 + np.linalg.norm(x)):
            break
    norm = float(np.linalg.norm(g))
    return x, norm, iters, norm <= ref


def _bisect_scalar(gn, lo, hi, ref):
    xs = np.linspace(lo, hi, 65)[1:-1]
    vals = np.array([float(np.atleast_1d(gn(np.array([x])))[0]) for x in xs])
    sign_change = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]
    if sign_change.size == 0:
        return None
    i = int(sign_change[0])
    a, b = xs[i], xs[i + 1]
    fa = vals[i]
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm = float(np.atleast_1d(gn(np.array([mid])))[0])
        if fa * fm <= 0:
            b = mid
        else:
            a, fa = mid, fm
        if b - a < 1e-13 * (1.0 + abs(mid)):
            break
    mid = 0.5 * (a + b)
    norm = abs(float(np.atleast_1d(gn(np.array([mid])))[0]))
    return np.array([mid]), norm, 200, norm <= ref


def solve(
    gn: Callable,
    theta_init,
    bounds,
    jacobian: Optional[Callable] = None,
    max_iter: int = 60,
) -> EstimatorResult:
    """Damped-Newton multistart root solve of gn(theta) = 0 within bounds.

    Starts at theta_init plus a 3^d grid spanning the (open) bounds box;
    the finite-difference Jacobian uses relative step 1e-6 and steps are
    halved (at most 30 times) to stay in bounds and decrease |gn|.  The
    result is the converged root closest to theta_init, ties broken by
    smaller residual norm then lexicographically smaller theta.  For d=1 a
    bracketed bisection is used when every Newton start stalls.
    """
    th0 = np.atleast_1d(np.asarray(theta_init, dtype=float))
    d = th0.size
    bounds = np.asarray(bounds, dtype=float).reshape(d, 2)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if not (np.all(th0 > lo) and np.all(th0 < hi)):
        raise PreconditionError("theta_init must lie strictly inside the bounds")

    ref = 1e-8 * (1.0 + float(np.linalg.norm(np.atleast_1d(gn(th0)))))

    axes = [lo + f * (hi - lo) for f in _MULTISTART_FRACTIONS]
    grid_starts = (
        np.stack(np.meshgrid(*[[a[j] for a in axes] for j in range(d)], indexing="ij"), axis=-1)
        .reshape(-1, d)
    )
    starts = [th0] + [g for g in grid_starts]

    roots = []
    best_fail = None
    for origin, s in enumerate(starts):
        x, norm, iters, ok = _newton(gn, jacobian, np.asarray(s, float), lo, hi, ref, max_iter)
        if ok:
            roots.append((origin, x, norm, iters))
        elif best_fail is None or norm < best_fail[2]:
            best_fail = (origin, x, norm, iters)

    if not roots and d == 1:
        hit = _bisect_scalar(gn, lo[0], hi[0], ref)
        if hit is not None and hit[3]:
            x, norm, iters, _ = hit
            roots.append((-1, x, norm, iters))

    if not roots:
        best = None
        if best_fail is not None:
            best = EstimatorResult(
                theta_hat=best_fail[1],
                gn_norm=best_fail[2],
                iterations=best_fail[3],
                converged=False,
                multistart_origin=best_fail[0],
            )
        raise NoRootError("no converged root from any start", best=best)

    def rank(item):
        origin, x, norm, _ = item
        return (float(np.linalg.norm(x - th0)), norm, tuple(x))

    origin, x, norm, iters = min(roots, key=rank)
    return EstimatorResult(
        theta_hat=x,
        gn_norm=float(norm),
        iterations=iters,
        converged=True,
        multistart_origin=origin,
    )
