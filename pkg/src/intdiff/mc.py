"""Replicated estimation studies against the theoretical limit laws.

A study simulates M independent observation records per sampling-grid
point, estimates the free parameters on each, standardizes the errors by
the theoretical asymptotic covariance evaluated once at the truth, and
reports bias, the empirical covariance of the standardized errors, and
their Kolmogorov-Smirnov distances to the standard normal.

Replications use counter-based streams keyed by (master seed, grid index,
replication index); aggregation is a fixed-order reduction, so reports are
bit-identical for identical configurations regardless of batching or the
number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegeneratePredictorError, InvalidStudyError, NoRootError
from .functions import get_function
from .model import DiffusionModel, get_model, invariant_measure
from .pbef import OneLagCoeffs, OneLagStats, corrected_mean, solve
from .potential import avar_scalar, center, limit_objects
from .simulate import SamplingScheme, _run_paths


def normal_cdf(z):
    z = np.asarray(z, dtype=float)
    return np.array([0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in z.ravel()]).reshape(
        z.shape
    )


def ks_distance_normal(z: np.ndarray) -> float:
    """Two-sided KS distance to the exact standard normal CDF."""
    z = np.sort(np.asarray(z, dtype=float))
    n = z.size
    c = normal_cdf(z)
    up = np.arange(1, n + 1) / n - c
    dn = c - np.arange(0, n) / n
    return float(max(up.max(), dn.max()))


def inv_sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if np.any(vals <= 0):
        raise ValueError("covariance must be positive definite to standardize")
    return vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a study bit-for-bit."""

    model: str
    theta0: tuple
    f: object  # registered name or polynomial coefficients
    q: int
    free: tuple
    bounds: tuple  # per free parameter, (lo, hi)
    grid: tuple  # of SamplingScheme
    replications: int = 500
    seed: int = 0
    coeff_mode: str = "expansion"
    theta_init: Optional[tuple] = None  # free coordinates; default: box midpoints
    q0_mean_mode: str = "corrected"
    # None = use the model's exact substep sampler when it has one
    exact_transitions: Optional[bool] = None

    def __post_init__(self):
        d = 1 if self.q == 0 else 2
        if self.q not in (0, 1):
            raise ValueError("q must be 0 or 1")
        if len(self.free) != d:
            raise ValueError(f"q={self.q} estimates {d} parameter(s); free={self.free}")
        if len(self.bounds) != d:
            raise ValueError("one (lo, hi) pair per free parameter")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        for sch in self.grid:
            if sch.n * sch.delta < 10.0:
                raise ValueError(
                    f"grid point (n={sch.n}, delta={sch.delta}) has n*delta < 10; "
                    "outside the long-horizon regime"
                )

    @property
    def d_free(self) -> int:
        return 1 if self.q == 0 else 2

    def init_free(self) -> np.ndarray:
        if self.theta_init is not None:
            return np.asarray(self.theta_init, dtype=float)
        b = np.asarray(self.bounds, dtype=float)
        return 0.5 * (b[:, 0] + b[:, 1])

    def full_theta(self, free_vals) -> np.ndarray:
        th = np.asarray(self.theta0, dtype=float).copy()
        th[list(self.free)] = np.asarray(free_vals, dtype=float)
        return th


@dataclass(frozen=True)
class ReplicationRecord:
    grid_id: int
    rep: int
    seed: int
    theta_hat: np.ndarray  # free coordinates
    z: np.ndarray
    converged: bool
    gn_norm: float
    iterations: int


@dataclass(frozen=True)
class GridResult:
    grid_id: int
    scheme: SamplingScheme
    replications: int
    failed: int
    sigma_theory: np.ndarray
    rate_n_delta3: float
    rate_n_delta2: float
    bias: np.ndarray
    mean_z: Optional[np.ndarray]
    cov_z: Optional[np.ndarray]
    ks: Optional[np.ndarray]  # None when undefined (fewer than 2 converged)
    rmse: float
    records: tuple = field(repr=False, default=())

    @property
    def ks_defined(self) -> bool:
        return self.ks is not None


@dataclass(frozen=True)
class StudyReport:
    config: ExperimentConfig
    grids: tuple
    rmse_slope: Optional[float]  # log RMSE vs log(n delta), when >= 2 grid points


@dataclass(frozen=True)
class RateStudyResult:
    slope: float
    report: StudyReport


@dataclass(frozen=True)
class CltCheckResult:
    mean_z: float
    var_z: float
    ks: float
    v0: float
    n_delta3: float


def _rep_seed_entry(master: int, grid_id: int, rep: int):
    return (master, grid_id, rep)


def _rep_seed_value(master: int, grid_id: int, rep: int) -> int:
    return int(np.random.SeedSequence([master, grid_id, rep]).generate_state(1)[0])


def _resolve_exact(model, flag: Optional[bool]) -> bool:
    return model.exact_transition is not None if flag is None else bool(flag)


def _simulate_suffstats(model, theta0, scheme, f, master_seed, grid_id, m, exact):
    """Per-replication sufficient statistics of f along simulated records."""
    f = get_function(f)
    acc = {
        "count": 0,
        "s_all": np.zeros(m),
        "s_cur": np.zeros(m),
        "s_prev": np.zeros(m),
        "s_cross": np.zeros(m),
        "s_prev_sq": np.zeros(m),
    }
    prev = {}

    def on_window(i, x_prev, x_curr, y, eps1, xi1):
        fy = f(y)
        acc["s_all"] += fy
        if i > 0:
            p = prev["fy"]
            acc["s_cur"] += fy
            acc["s_prev"] += p
            acc["s_cross"] += fy * p
            acc["s_prev_sq"] += p * p
        prev["fy"] = fy
        acc["count"] += 1

    entries = [_rep_seed_entry(master_seed, grid_id, r) for r in range(m)]
    _run_paths(model, theta0, scheme, entries, on_window, exact_transitions=exact)
    return acc


def _estimate_rep_q0(stats_value, n, delta, config, model, mean_cache):
    """Root of sum f(y) - n * m(theta) over the single free parameter."""

    def gn(free_vals):
        key = float(free_vals[0])
        m_val = mean_cache.get(key)
        if m_val is None:
            th = config.full_theta(free_vals)
            if config.q0_mean_mode == "stationary":
                m_val = invariant_measure(model, th).integrate(get_function(config.f))
            else:
                m_val = corrected_mean(model, th, delta, config.f)
            mean_cache[key] = m_val
        return np.array([stats_value - n * m_val])

    return solve(gn, config.init_free(), config.bounds)


def _estimate_rep_q1(stats: OneLagStats, config, coeffs: OneLagCoeffs):
    def gn(free_vals):
        cv = coeffs(config.full_theta(free_vals))
        return stats.gn(cv.a0, cv.a1)

    return solve(gn, config.init_free(), config.bounds)


def _estimate_grid_chunk(payload):
    """Worker entry point for a chunk of replications (picklable payload)."""
    (config_dict, scheme_tuple, grid_id, rep_ids, stats_rows) = payload
    config = ExperimentConfig(**config_dict)
    scheme = SamplingScheme(*scheme_tuple)
    model = get_model(config.model)
    out = []
    if config.q == 0:
        mean_cache = {}
        for rep, s_all in zip(rep_ids, stats_rows):
            try:
                res = _estimate_rep_q0(s_all, scheme.n, scheme.delta, config, model, mean_cache)
                out.append((rep, res.theta_hat.tolist(), res.converged, res.gn_norm, res.iterations))
            except NoRootError as err:
                best = err.best
                th = best.theta_hat.tolist() if best is not None else [math.nan]
                gn = best.gn_norm if best is not None else math.nan
                out.append((rep, th, False, gn, 0))
    else:
        coeffs = OneLagCoeffs(model, config.f, scheme.delta, config.coeff_mode)
        for rep, row in zip(rep_ids, stats_rows):
            stats = OneLagStats(*row)
            try:
                res = _estimate_rep_q1(stats, config, coeffs)
                out.append((rep, res.theta_hat.tolist(), res.converged, res.gn_norm, res.iterations))
            except NoRootError as err:
                best = err.best
                th = best.theta_hat.tolist() if best is not None else [math.nan, math.nan]
                gn = best.gn_norm if best is not None else math.nan
                out.append((rep, th, False, gn, 0))
    return out


def theoretical_sigma(config: ExperimentConfig) -> np.ndarray:
    """Asymptotic covariance of sqrt(n delta) (theta_hat - theta0)."""
    model = get_model(config.model)
    th0 = np.asarray(config.theta0, dtype=float)
    f = get_function(config.f)
    if config.q == 0:
        v0 = avar_scalar(model, th0, f)
        j = config.free[0]
        h = 1e-5 * max(1.0, abs(th0[j]))
        tp, tm = th0.copy(), th0.copy()
        tp[j] += h
        tm[j] -= h
        dmu = (
            invariant_measure(model, tp).integrate(f)
            - invariant_measure(model, tm).integrate(f)
        ) / (2.0 * h)
        if abs(dmu) < 1e-12:
            raise DegeneratePredictorError(
                "d/dtheta of the stationary mean vanishes; parameter not identified"
            )
        return np.array([[v0 / (dmu * dmu)]])
    lo = limit_objects(model, th0, th0, f, free=config.free)
    w_inv = np.linalg.inv(lo.w)
    return w_inv @ lo.v0 @ w_inv.T


def _config_as_dict(config: ExperimentConfig) -> dict:
    return {
        "model": config.model,
        "theta0": tuple(config.theta0),
        "f": config.f,
        "q": config.q,
        "free": tuple(config.free),
        "bounds": tuple(tuple(b) for b in config.bounds),
        "grid": tuple(config.grid),
        "replications": config.replications,
        "seed": config.seed,
        "coeff_mode": config.coeff_mode,
        "theta_init": None if config.theta_init is None else tuple(config.theta_init),
        "q0_mean_mode": config.q0_mean_mode,
        "exact_transitions": config.exact_transitions,
    }


def run_study(config: ExperimentConfig, threads: int = 1, fail_threshold: float = 0.05) -> StudyReport:
    """Simulate, estimate and standardize M replications per grid point.

    Raises InvalidStudyError when more than fail_threshold of the
    replications at any grid point fail to converge.
    """
    model = get_model(config.model)
    th0 = np.asarray(config.theta0, dtype=float)
    free = list(config.free)
    m = config.replications
    sigma = theoretical_sigma(config)
    sigma_root = inv_sqrt_psd(sigma)
    exact = _resolve_exact(model, config.exact_transitions)
    grids = []
    for gid, scheme in enumerate(config.grid):
        acc = _simulate_suffstats(model, th0, scheme, config.f, config.seed, gid, m, exact)

        if config.q == 0:
            rows = [float(acc["s_all"][r]) for r in range(m)]
        else:
            rows = [
                (
                    scheme.n - 1,
                    float(acc["s_cur"][r]),
                    float(acc["s_prev"][r]),
                    float(acc["s_cross"][r]),
                    float(acc["s_prev_sq"][r]),
                )
                for r in range(m)
            ]
        payloads = []
        chunk = max(1, math.ceil(m / max(1, threads) / 4))
        cfg_dict = _config_as_dict(config)
        scheme_tuple = (scheme.n, scheme.delta, scheme.substeps)
        for start in range(0, m, chunk):
            ids = list(range(start, min(start + chunk, m)))
            payloads.append((cfg_dict, scheme_tuple, gid, ids, [rows[r] for r in ids]))
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                chunks = list(pool.map(_estimate_grid_chunk, payloads))
        else:
            chunks = [_estimate_grid_chunk(p) for p in payloads]

        records = []
        scale = math.sqrt(scheme.n * scheme.delta)
        for out in chunks:
            for rep, th_hat, converged, gn_norm, iters in out:
                th_hat = np.asarray(th_hat, dtype=float)
                z = (
                    scale * (sigma_root @ (th_hat - th0[free]))
                    if converged
                    else np.full(config.d_free, np.nan)
                )
                records.append(
                    ReplicationRecord(
                        grid_id=gid,
                        rep=rep,
                        seed=_rep_seed_value(config.seed, gid, rep),
                        theta_hat=th_hat,
                        z=z,
                        converged=bool(converged),
                        gn_norm=float(gn_norm),
                        iterations=int(iters),
                    )
                )
        records.sort(key=lambda r: r.rep)
        failed = sum(1 for r in records if not r.converged)
        if failed > fail_threshold * m:
            raise InvalidStudyError(
                f"{failed}/{m} replications failed to converge at grid point {gid}",
                failed=failed,
                total=m,
            )
        ok = [r for r in records if r.converged]
        th_mat = np.array([r.theta_hat for r in ok])
        z_mat = np.array([r.z for r in ok])
        bias = th_mat.mean(axis=0) - th0[free]
        rmse = float(np.sqrt(np.mean(np.sum((th_mat - th0[free]) ** 2, axis=1))))
        if len(ok) >= 2:
            mean_z = z_mat.mean(axis=0)
            cov_z = np.cov(z_mat.T, ddof=1).reshape(config.d_free, config.d_free)
            ks = np.array([ks_distance_normal(z_mat[:, j]) for j in range(config.d_free)])
        else:
            mean_z = z_mat.mean(axis=0) if ok else None
            cov_z = None
            ks = None
        grids.append(
            GridResult(
                grid_id=gid,
                scheme=scheme,
                replications=m,
                failed=failed,
                sigma_theory=sigma,
                rate_n_delta3=scheme.n * scheme.delta**3,
                rate_n_delta2=scheme.n * scheme.delta**2,
                bias=bias,
                mean_z=mean_z,
                cov_z=cov_z,
                ks=ks,
                rmse=rmse,
                records=tuple(records),
            )
        )
    slope = None
    if len(grids) >= 2:
        x = np.log([g.scheme.n * g.scheme.delta for g in grids])
        y = np.log([g.rmse for g in grids])
        slope = 0.0 if np.ptp(x) < 1e-9 else float(np.polyfit(x, y, 1)[0])
    return StudyReport(config=config, grids=tuple(grids), rmse_slope=slope)


def rate_study(config: ExperimentConfig, threads: int = 1) -> RateStudyResult:
    """Slope of log RMSE against log(n delta) over a shrinking-delta grid."""
    if len(config.grid) < 3:
        raise ValueError("rate study needs at least 3 grid points")
    nd3 = [sch.n * sch.delta**3 for sch in config.grid]
    if any(b > a + 1e-12 for a, b in zip(nd3, nd3[1:])):
        raise ValueError("grid must be ordered with non-increasing n*delta^3")
    report = run_study(config, threads=threads)
    x = np.log([g.scheme.n * g.scheme.delta for g in report.grids])
    y = np.log([g.rmse for g in report.grids])
    slope = 0.0 if np.ptp(x) < 1e-9 else float(np.polyfit(x, y, 1)[0])
    return RateStudyResult(slope=slope, report=report)


def functional_clt_check(
    model: DiffusionModel,
    theta0,
    f,
    scheme: SamplingScheme,
    replications: int,
    seed: int = 0,
    exact_transitions: Optional[bool] = None,
) -> CltCheckResult:
    """Standardized window-average functional over M replications.

    z_m = sqrt(n delta) * mean(f*(y)) / sqrt(V0(f*)); returns its sample
    mean, variance and KS distance to the standard normal.  The rate flag
    n delta^3 is reported for diagnostics; no pass/fail is applied here.
    """
    th0 = model.params(theta0)
    mu = invariant_measure(model, th0)
    fstar = center(model, th0, f, measure=mu)
    v0 = avar_scalar(model, th0, fstar, measure=mu)
    if v0 <= 1e-12:
        raise DegeneratePredictorError(f"limit variance {v0:.3e} (<= 1e-12)")
    m = replications
    sums = np.zeros(m)

    def on_window(i, x_prev, x_curr, y, eps1, xi1):
        sums[:] += fstar(y)

    entries = [_rep_seed_entry(seed, 0, r) for r in range(m)]
    _run_paths(
        model, th0, scheme, entries, on_window,
        exact_transitions=_resolve_exact(model, exact_transitions),
    )
    z = math.sqrt(scheme.n * scheme.delta) * (sums / scheme.n) / math.sqrt(v0)
    var = float(z.var(ddof=1)) if m >= 2 else float("nan")
    ks = ks_distance_normal(z) if m >= 2 else float("nan")
    return CltCheckResult(
        mean_z=float(z.mean()),
        var_z=var,
        ks=ks,
        v0=float(v0),
        n_delta3=scheme.n * scheme.delta**3,
    )
