"""Path simulation for integrated diffusion observations.

Observations are window averages y_i = delta^-1 * int_{(i-1)delta}^{i delta} X ds,
approximated by the trapezoidal rule on a fine Milstein grid with K substeps
per window (plain Euler when the diffusion derivative vanishes).  The module
also extracts the two-scale decompositions of f(X_{t_i}) and f(y_i) into a
leading Gaussian term and an exact residual, and fits the order in delta of
the residual's conditional moments.

Randomness is organized as counter-based streams (Philox) keyed by
(seed, replication/chunk index) so replications are reproducible under any
batching or parallel execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DiagnosticsUnreliableError, SimulationDivergedError
from .functions import get_function
from .model import DiffusionModel, InvariantMeasure, invariant_measure
from .quadrature import Grid

BOUNDARY_EPS = 1e-12
_CHUNK = 1 << 19  # windows per RNG chunk in the i.i.d. window engine


@dataclass(frozen=True)
class SamplingScheme:
    """n observations of window length delta, K fine substeps per window."""

    n: int
    delta: float
    substeps: int = 16

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need n >= 2 observations")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.substeps < 2:
            raise ValueError("need at least 2 substeps per window")

    @property
    def dt(self) -> float:
        return self.delta / self.substeps


@dataclass(frozen=True)
class TrajectoryBundle:
    """A fine-grid path with its Brownian increments and observations."""

    x_fine: np.ndarray  # (n*K + 1,)
    db: np.ndarray  # (n*K,)
    y: np.ndarray  # (n,)
    x_obs: np.ndarray  # (n + 1,), the path at the observation times
    scheme: SamplingScheme
    seed: int
    violations: int = 0


@dataclass(frozen=True)
class EulerItoRecord:
    """Per-window leading Gaussian terms and exact residuals; the pair not
    produced by the decomposition at hand is None."""

    eps1: Optional[np.ndarray] = None
    eps2: Optional[np.ndarray] = None
    xi1: Optional[np.ndarray] = None
    xi2: Optional[np.ndarray] = None


def _stream(entry) -> np.random.Generator:
    if isinstance(entry, (int, np.integer)):
        entry = [int(entry)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(entry))))


def _initial_states(model, theta, gens, measure: Optional[InvariantMeasure]):
    x0 = np.empty(len(gens))
    for r, g in enumerate(gens):
        if model.exact_stationary is not None:
            x0[r] = model.exact_stationary(g, theta, 1)[0]
        else:
            x0[r] = np.interp(g.random(), measure.cdf_nodes, measure.grid.nodes)
    return x0


def _clip_to_state(x, model, counter):
    lo, hi = model.state.lower, model.state.upper
    if math.isfinite(lo):
        bad = x < lo + BOUNDARY_EPS
        if bad.any():
            counter += bad.sum()
            x = np.where(bad, lo + BOUNDARY_EPS, x)
    if math.isfinite(hi):
        bad = x > hi - BOUNDARY_EPS
        if bad.any():
            counter += bad.sum()
            x = np.where(bad, hi - BOUNDARY_EPS, x)
    return x, counter


def _run_paths(
    model: DiffusionModel,
    theta,
    scheme: SamplingScheme,
    seed_entries: Sequence,
    on_window: Callable,
    store_fine: bool = False,
    exact_transitions: bool = False,
):
    """Advance len(seed_entries) independent paths; per completed window i,
    call on_window(i, x_prev, x_curr, y, eps1, xi1) with (M,) arrays.

    Returns (x_fine, db, violations); the first two are None unless
    store_fine is requested.  With exact_transitions (only for models that
    provide one) substeps are sampled from the exact transition law jointly
    with the Brownian increment instead of the Milstein update.
    """
    th = model.params(theta)
    n, K, delta = scheme.n, scheme.substeps, scheme.delta
    dt = scheme.dt
    sqrt_dt, sqrt_delta = math.sqrt(dt), math.sqrt(delta)
    m = len(seed_entries)
    gens = [_stream(e) for e in seed_entries]
    measure = None if model.exact_stationary is not None else invariant_measure(model, th)
    x = _initial_states(model, th, gens, measure)
    violations = np.zeros(m, dtype=np.int64)
    exact = bool(exact_transitions) and model.exact_transition is not None

    fine = dbs = None
    if store_fine:
        fine = np.empty((m, n * K + 1))
        dbs = np.empty((m, n * K))
        fine[:, 0] = x

    xi_w = (K - np.arange(K, dtype=float)) / K  # window weights for the area term
    milstein = not model.constant_diffusion
    b_const = model.diffusion(x, th) if model.constant_diffusion else None
    bounded = math.isfinite(model.state.lower) or math.isfinite(model.state.upper)

    block_windows = max(1, (1 << 13) // K)
    draws = 2 if exact else 1
    db_block = np.empty((m, block_windows * K))
    z_block = np.empty((m, block_windows * K)) if exact else None
    i = 0
    while i < n:
        nb = min(block_windows, n - i)
        cols = nb * K
        for r, g in enumerate(gens):
            raw = g.standard_normal(draws * cols)
            db_block[r, :cols] = raw[:cols]
            if exact:
                z_block[r, :cols] = raw[cols:]
        db_block[:, :cols] *= sqrt_dt
        for j in range(nb):
            x_prev = x
            wsum = 0.5 * x
            eps_acc = np.zeros(m)
            xi_acc = np.zeros(m)
            for k in range(K):
                dbk = db_block[:, j * K + k]
                eps_acc += dbk
                xi_acc += xi_w[k] * dbk
                if exact:
                    x_new = model.exact_transition(x, th, dt, dbk, z_block[:, j * K + k])
                else:
                    a = model.drift(x, th)
                    b = b_const if b_const is not None else model.diffusion(x, th)
                    x_new = x + a * dt + b * dbk
                    if milstein:
                        x_new += 0.5 * b * model.diffusion_dx_eval(x, th) * (dbk * dbk - dt)
                if bounded:
                    x_new, violations = _clip_to_state(x_new, model, violations)
                wsum = wsum + (x_new if k < K - 1 else 0.5 * x_new)
                if store_fine:
                    fine[:, (i + j) * K + k + 1] = x_new
                    dbs[:, (i + j) * K + k] = dbk
                x = x_new
            if not np.all(np.isfinite(x)):
                raise SimulationDivergedError(
                    f"nonfinite state in window {i + j}", step=(i + j + 1) * K
                )
            on_window(i + j, x_prev, x, wsum / K, eps_acc / sqrt_delta, xi_acc / sqrt_delta)
        i += nb
    return fine, dbs, violations


def simulate_paths(
    model: DiffusionModel, theta, scheme: SamplingScheme, seeds: Sequence[int]
) -> list[TrajectoryBundle]:
    """Simulate one bundle per seed (vectorized across seeds).

    Per-seed output is independent of the batch composition: each path
    consumes its own counter-based stream and all arithmetic is
    elementwise.
    """
    m = len(seeds)
    n = scheme.n
    y = np.empty((m, n))
    x_obs = np.empty((m, n + 1))

    def on_window(i, x_prev, x_curr, yw, eps1, xi1):
        if i == 0:
            x_obs[:, 0] = x_prev
        x_obs[:, i + 1] = x_curr
        y[:, i] = yw

    fine, dbs, violations = _run_paths(
        model, theta, scheme, [int(s) for s in seeds], on_window, store_fine=True
    )
    return [
        TrajectoryBundle(
            x_fine=fine[r].copy(),
            db=dbs[r].copy(),
            y=y[r].copy(),
            x_obs=x_obs[r].copy(),
            scheme=scheme,
            seed=int(seeds[r]),
            violations=int(violations[r]),
        )
        for r in range(m)
    ]


def simulate_path(model: DiffusionModel, theta, scheme: SamplingScheme, seed: int) -> TrajectoryBundle:
    """Single stationary path; identical seeds give bit-identical bundles."""
    return simulate_paths(model, theta, scheme, [seed])[0]


def euler_ito_decompose_x(
    bundle: TrajectoryBundle, f, model: DiffusionModel, theta
) -> EulerItoRecord:
    """Split f(X_{t_i}) - f(X_{t_{i-1}}) into sqrt(delta) f' b eps1 plus the
    exact residual eps2; eps1 is the normalized Brownian increment."""
    f = get_function(f)
    th = model.params(theta)
    sch = bundle.scheme
    db = bundle.db.reshape(sch.n, sch.substeps)
    eps1 = db.sum(axis=1) / math.sqrt(sch.delta)
    xp, xc = bundle.x_obs[:-1], bundle.x_obs[1:]
    lead = math.sqrt(sch.delta) * f.deriv(1, xp) * model.diffusion(xp, th) * eps1
    eps2 = f(xc) - f(xp) - lead
    return EulerItoRecord(eps1=eps1, eps2=eps2)


def euler_ito_decompose_y(
    bundle: TrajectoryBundle, f, model: DiffusionModel, theta
) -> EulerItoRecord:
    """Same split for the window averages: the leading Gaussian factor is
    the time-weighted increment sum xi1 = delta^{-3/2} sum (t_i - s_k) dB_k
    with s_k the left endpoint of substep k."""
    f = get_function(f)
    th = model.params(theta)
    sch = bundle.scheme
    k = sch.substeps
    w = (k - np.arange(k, dtype=float)) / k
    db = bundle.db.reshape(sch.n, k)
    xi1 = (db @ w) / math.sqrt(sch.delta)
    xp = bundle.x_obs[:-1]
    lead = math.sqrt(sch.delta) * f.deriv(1, xp) * model.diffusion(xp, th) * xi1
    xi2 = f(bundle.y) - f(xp) - lead
    return EulerItoRecord(xi1=xi1, xi2=xi2)


def xi1_discrete_variance(substeps: int) -> float:
    """Exact variance of the discretized area weight sum; tends to 1/3."""
    k = substeps
    return (k + 1) * (2 * k + 1) / (6.0 * k * k)


def simulate_windows(
    model: DiffusionModel,
    theta,
    delta: float,
    substeps: int,
    n_windows: int,
    seed,
    windows_per_path: int = 1,
    measure: Optional[InvariantMeasure] = None,
):
    """Independent stationary windows, vectorized and chunked.

    Each path starts from a fresh stationary draw and runs for
    windows_per_path consecutive windows.  Returns a dict with x0 (W,),
    and (W, windows_per_path) arrays y, eps1, xi1, plus x_obs of shape
    (W, windows_per_path + 1).  Chunk streams are keyed by (seed, chunk
    index) with a fixed chunk size, so output is reproducible.
    """
    th = model.params(theta)
    c = windows_per_path
    k = substeps
    dt = delta / k
    sqrt_dt, sqrt_delta = math.sqrt(dt), math.sqrt(delta)
    xi_w = (k - np.arange(k, dtype=float)) / k
    if model.exact_stationary is None and measure is None:
        measure = invariant_measure(model, th)
    milstein = not model.constant_diffusion
    bounded = math.isfinite(model.state.lower) or math.isfinite(model.state.upper)
    seed_tuple = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)

    out = {
        "x0": np.empty(n_windows),
        "y": np.empty((n_windows, c)),
        "eps1": np.empty((n_windows, c)),
        "xi1": np.empty((n_windows, c)),
        "x_obs": np.empty((n_windows, c + 1)),
    }
    done = 0
    chunk_idx = 0
    while done < n_windows:
        w = min(_CHUNK, n_windows - done)
        g = _stream(seed_tuple + (chunk_idx,))
        if model.exact_stationary is not None:
            x = model.exact_stationary(g, th, w)
        else:
            x = np.interp(g.random(w), measure.cdf_nodes, measure.grid.nodes)
        sl = slice(done, done + w)
        out["x0"][sl] = x
        out["x_obs"][sl, 0] = x
        viol = np.zeros(w, dtype=np.int64)
        b_const = model.diffusion(x, th) if model.constant_diffusion else None
        for j in range(c):
            wsum = 0.5 * x
            eps_acc = np.zeros(w)
            xi_acc = np.zeros(w)
            for kk in range(k):
                dbk = g.standard_normal(w) * sqrt_dt
                eps_acc += dbk
                xi_acc += xi_w[kk] * dbk
                a = model.drift(x, th)
                b = b_const if b_const is not None else model.diffusion(x, th)
                x_new = x + a * dt + b * dbk
                if milstein:
                    x_new += 0.5 * b * model.diffusion_dx_eval(x, th) * (dbk * dbk - dt)
                if bounded:
                    x_new, viol = _clip_to_state(x_new, model, viol)
                wsum += x_new if kk < k - 1 else 0.5 * x_new
                x = x_new
            if not np.all(np.isfinite(x)):
                raise SimulationDivergedError("nonfinite state in window batch", step=j)
            out["y"][sl, j] = wsum / k
            out["eps1"][sl, j] = eps_acc / sqrt_delta
            out["xi1"][sl, j] = xi_acc / sqrt_delta
            out["x_obs"][sl, j + 1] = x
        done += w
        chunk_idx += 1
    return out


def _window_residuals(model, theta, f, delta, substeps, n_windows, seed, moment):
    """Per-window (x0, residual) for the conditional-moment order fit."""
    f = get_function(f)
    th = model.params(theta)
    sim = simulate_windows(model, th, delta, substeps, n_windows, seed)
    x0 = sim["x0"]
    y = sim["y"][:, 0]
    xi1 = sim["xi1"][:, 0]
    b = np.asarray(model.diffusion(x0, th), dtype=float)
    lead = math.sqrt(delta) * f.deriv(1, x0) * b * xi1
    xi2 = f(y) - f(x0) - lead
    if moment == 2:
        return x0, xi2 * xi2
    lf = model.drift(x0, th) * f.deriv(1, x0) + 0.5 * b * b * f.deriv(2, x0)
    hf = 0.5 * lf - b * b * f.deriv(2, x0) / 12.0
    # variance control on the known quadratic term: exact conditional mean,
    # removes the dominant O(delta) fluctuation from the residual
    vk = xi1_discrete_variance(substeps)
    control = 0.5 * f.deriv(2, x0) * b * b * delta * (xi1 * xi1 - vk)
    return x0, xi2 - delta * hf - control


def remainder_order_fit(
    model: DiffusionModel,
    theta,
    f,
    deltas: Sequence[float],
    n_per_delta,
    seeds,
    substeps: int = 64,
    bins: int = 24,
    moment: int = 1,
    min_bin_count: int = 50,
):
    """Least-squares slope of log(residual size) against log(delta).

    For moment=1 the residual is xi2 minus delta times its first-order
    conditional drift; for moment=2 it is xi2 squared.  The size at each
    delta is the average over equal-occupancy bins of |bin mean|, i.e. a
    piecewise-constant regression of the residual on the window's starting
    state.  Returns (slope, intercept).
    """
    deltas = np.asarray(deltas, dtype=float)
    if np.unique(deltas).size < 4:
        raise ValueError("need at least 4 distinct delta values")
    if moment not in (1, 2):
        raise ValueError("moment must be 1 or 2")
    order = np.argsort(-deltas)
    if isinstance(n_per_delta, (int, np.integer)):
        counts = [int(n_per_delta)] * deltas.size
    else:
        counts = [int(c) for c in n_per_delta]
    if isinstance(seeds, (int, np.integer, tuple)):
        seed_list = [seeds] * deltas.size
    else:
        seed_list = list(seeds)
    if len(counts) != deltas.size or len(seed_list) != deltas.size:
        raise ValueError("n_per_delta and seeds must match the delta grid")

    errs = np.empty(deltas.size)
    for pos in order:
        x0, resid = _window_residuals(
            model, theta, f, float(deltas[pos]), substeps, int(counts[pos]),
            seed_list[pos], moment,
        )
        edges = np.quantile(x0, np.linspace(0.0, 1.0, bins + 1))
        idx = np.clip(np.searchsorted(edges[1:-1], x0, side="right"), 0, bins - 1)
        n_bin = np.bincount(idx, minlength=bins)
        if n_bin.min() < min_bin_count:
            raise DiagnosticsUnreliableError(
                f"bin occupancy {n_bin.min()} < {min_bin_count} at delta={deltas[pos]:g}"
            )
        means = np.bincount(idx, weights=resid, minlength=bins) / n_bin
        errs[pos] = float(np.mean(np.abs(means)))
    slope, intercept = np.polyfit(np.log(deltas), np.log(errs), 1)
    return float(slope), float(intercept)


def dump_path_csv(bundle: TrajectoryBundle, fmt: Callable[[float], str]) -> str:
    """Render the fine grid (t,x) followed by the observations (i,y)."""
    sch = bundle.scheme
    dt = sch.dt
    lines = ["t,x"]
    lines.extend(
        f"{fmt(i * dt)},{fmt(v)}" for i, v in enumerate(bundle.x_fine)
    )
    lines.append("")
    lines.append("i,y")
    lines.extend(f"{i + 1},{fmt(v)}" for i, v in enumerate(bundle.y))
    return "\n".join(lines) + "\n"
