"""Config-driven command line front end.

Usage: intdiff <config.json> [--out DIR] [--threads N] [--seed S]

The config is a single JSON object whose "command" selects the operation;
flags override the corresponding config fields.  Artifacts (report.json,
report.csv, replications.csv, path.csv as applicable) are written
atomically: nothing is left behind on a nonzero exit.  Exit codes: 0 ok,
1 computational failure, 2 configuration error; failures are also printed
as single-line JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from .errors import ConfigError, IntdiffError, NoRootError
from .functions import get_function
from .mc import (
    ExperimentConfig,
    functional_clt_check,
    rate_study,
    run_study,
)
from .model import check_cir_boundary, get_model
from .pbef import OneLagCoeffs, gn_simple, onelag_stats, solve
from .potential import avar_scalar, limit_objects
from .reports import csv_line, dumps_json, fmt_float, validate_report
from .simulate import (
    SamplingScheme,
    dump_path_csv,
    euler_ito_decompose_x,
    euler_ito_decompose_y,
    remainder_order_fit,
    simulate_path,
    simulate_paths,
    xi1_discrete_variance,
)

COMMANDS = ("simulate", "verify-expansion", "avar", "estimate", "study", "rate-study")

ERROR_NAMES = {
    "NoRootError": "no-root",
    "SimulationDivergedError": "simulation-diverged",
    "NotErgodicError": "model-not-ergodic",
    "DegeneratePredictorError": "degenerate-predictor",
    "BoundaryDegeneracyError": "boundary-degeneracy",
    "DiagnosticsUnreliableError": "diagnostics-unreliable",
    "InvalidStudyError": "invalid-study",
    "PreconditionError": "precondition",
    "StateSpaceError": "state-space",
    "ConfigError": "config",
}


class RunConfig:
    """A validated command plus its effective (default-filled) fields."""

    def __init__(self, command: str, fields: dict):
        self.command = command
        self.fields = fields

    def __getitem__(self, key):
        return self.fields[key]

    def get(self, key, default=None):
        return self.fields.get(key, default)


def _fail(msg: str) -> ConfigError:
    return ConfigError(msg)


def _take(cfg: dict, spec: dict) -> dict:
    """Validate cfg against {field: (types, required, default, check)}."""
    unknown = set(cfg) - set(spec) - {"command"}
    if unknown:
        raise _fail(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, (types, required, default, check) in spec.items():
        if key not in cfg:
            if required:
                raise _fail(f"missing required field {key!r}")
            out[key] = default
            continue
        val = cfg[key]
        if types is not None and not isinstance(val, types):
            raise _fail(f"field {key!r} has type {type(val).__name__}")
        if check is not None:
            err = check(val)
            if err:
                raise _fail(f"field {key!r}: {err}")
        out[key] = val
    return out


def _pos_int(minimum):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            return f"must be an integer >= {minimum}"
        return None

    return check


def _pos_real(v):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        return "must be a positive number"
    return None


def _theta_list(v):
    if not isinstance(v, list) or not all(isinstance(t, (int, float)) for t in v):
        return "must be a list of numbers"
    return None


def _f_spec(v):
    if isinstance(v, str):
        return None
    if isinstance(v, list) and v and all(isinstance(c, (int, float)) for c in v):
        return None
    return "must be a registered function name or polynomial coefficients"


def _grid_list(v):
    if not isinstance(v, list) or not v:
        return "must be a nonempty list of {n, delta, substeps?} objects"
    for g in v:
        if not isinstance(g, dict):
            return "grid entries must be objects"
        extra = set(g) - {"n", "delta", "substeps"}
        if extra:
            return f"grid entry has unknown keys {sorted(extra)}"
        if _pos_int(2)(g.get("n")) or _pos_real(g.get("delta")):
            return "grid entries need n >= 2 and delta > 0"
        if "substeps" in g and _pos_int(2)(g["substeps"]):
            return "substeps must be an integer >= 2"
    return None


_COMMON = {
    "seed": ((int,), False, 0, None),
    "out": ((str,), False, None, None),
    "threads": ((int,), False, 1, _pos_int(1)),
}

_SCHEMAS = {
    "simulate": {
        **_COMMON,
        "model": ((str,), True, None, None),
        "theta": (None, True, None, _theta_list),
        "n": ((int,), True, None, _pos_int(2)),
        "delta": ((int, float), True, None, _pos_real),
        "substeps": ((int,), False, 16, _pos_int(2)),
    },
    "verify-expansion": {
        **_COMMON,
        "model": ((str,), True, None, None),
        "theta": (None, True, None, _theta_list),
        "f": (None, False, "x^2", _f_spec),
        "delta": ((int, float), False, 0.01, _pos_real),
        "windows": ((int,), False, 100_000, _pos_int(100)),
        "substeps": ((int,), False, 64, _pos_int(2)),
        "deltas": (None, False, [0.02, 0.01, 0.005, 0.0025], None),
        "windows_per_delta": (None, False, None, None),
        "bins": ((int,), False, 24, _pos_int(20)),
    },
    "avar": {
        **_COMMON,
        "model": ((str,), True, None, None),
        "theta": (None, True, None, _theta_list),
        "f": (None, True, None, _f_spec),
        "free": (None, False, None, None),
        "gamma_grid": (None, False, None, None),
    },
    "estimate": {
        **_COMMON,
        "model": ((str,), True, None, None),
        "f": (None, True, None, _f_spec),
        "q": ((int,), True, None, None),
        "free": (None, True, None, None),
        "theta_template": (None, True, None, _theta_list),
        "bounds": (None, True, None, None),
        "init": (None, False, None, None),
        "delta": ((int, float), True, None, _pos_real),
        "coeff_mode": ((str,), False, "expansion", None),
        "q0_mean_mode": ((str,), False, "corrected", None),
        "data": (None, True, None, None),
    },
    "study": {
        **_COMMON,
        "model": ((str,), True, None, None),
        "theta0": (None, True, None, _theta_list),
        "f": (None, True, None, _f_spec),
        "q": ((int,), True, None, None),
        "free": (None, True, None, None),
        "bounds": (None, True, None, None),
        "grid": (None, True, None, _grid_list),
        "replications": ((int,), False, 500, _pos_int(1)),
        "coeff_mode": ((str,), False, "expansion", None),
        "init": (None, False, None, None),
        "q0_mean_mode": ((str,), False, "corrected", None),
        "exact_transitions": ((bool, type(None)), False, None, None),
        "dump_replications": ((bool,), False, False, None),
    },
}
_SCHEMAS["rate-study"] = dict(_SCHEMAS["study"])


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration; defaults are filled in
    and echoed into the report header by dispatch()."""
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise _fail(f"malformed JSON at line {err.lineno} column {err.colno}: {err.msg}")
    if not isinstance(cfg, dict):
        raise _fail("config must be a JSON object")
    command = cfg.get("command")
    if command not in COMMANDS:
        raise _fail(f"unknown command {command!r}; expected one of {list(COMMANDS)}")
    fields = _take(cfg, _SCHEMAS[command])
    if command == "simulate" and fields["n"] < 2:
        raise _fail("n must be >= 2")
    if command in ("estimate", "study", "rate-study"):
        if fields["q"] not in (0, 1):
            raise _fail("q must be 0 or 1")
        d = 1 if fields["q"] == 0 else 2
        free = fields["free"]
        if not (isinstance(free, list) and len(free) == d and all(isinstance(j, int) for j in free)):
            raise _fail(f"free must list {d} parameter index(es) for q={fields['q']}")
        bounds = fields["bounds"]
        ok = (
            isinstance(bounds, list)
            and len(bounds) == d
            and all(
                isinstance(b, list) and len(b) == 2
                and all(isinstance(v, (int, float)) for v in b) and b[0] < b[1]
                for b in bounds
            )
        )
        if not ok:
            raise _fail("bounds must be a list of [lo, hi] pairs, one per free parameter")
    return RunConfig(command, fields)


def _model_theta(fields):
    model = get_model(fields["model"])
    theta = model.params(fields.get("theta") or fields.get("theta0"))
    if model.name == "cir":
        check_cir_boundary(theta)
    return model, theta


def _run_simulate(fields, threads):
    model, theta = _model_theta(fields)
    scheme = SamplingScheme(fields["n"], float(fields["delta"]), fields["substeps"])
    bundle = simulate_path(model, theta, scheme, fields["seed"])
    results = {
        "n": scheme.n,
        "delta": scheme.delta,
        "substeps": scheme.substeps,
        "seed": fields["seed"],
        "violations": bundle.violations,
        "y_mean": float(bundle.y.mean()),
        "y_var": float(bundle.y.var()),
    }
    return results, {"path.csv": dump_path_csv(bundle, fmt_float)}


def _run_verify_expansion(fields, threads):
    model, theta = _model_theta(fields)
    f = get_function(fields["f"])
    scheme_n = 1000
    n_bundles = max(1, math.ceil(fields["windows"] / scheme_n))
    scheme = SamplingScheme(scheme_n, float(fields["delta"]), fields["substeps"])
    seeds = [fields["seed"] + 10_000 + r for r in range(n_bundles)]
    eps1 = []
    xi1 = []
    for start in range(0, n_bundles, 64):
        for b in simulate_paths(model, theta, scheme, seeds[start : start + 64]):
            eps1.append(euler_ito_decompose_x(b, f, model, theta).eps1)
            xi1.append(euler_ito_decompose_y(b, f, model, theta).xi1)
    eps1 = np.concatenate(eps1)
    xi1 = np.concatenate(xi1)

    deltas = [float(d) for d in fields["deltas"]]
    wpd = fields["windows_per_delta"]
    if wpd is None:
        wpd = [max(24 * 60, int(40.0 / d)) for d in deltas]
    elif isinstance(wpd, int):
        wpd = [wpd] * len(deltas)
    slope_mean, _ = remainder_order_fit(
        model, theta, f, deltas, wpd, [(fields["seed"], 7, i) for i in range(len(deltas))],
        substeps=fields["substeps"], bins=fields["bins"], moment=1,
    )
    slope_sq, _ = remainder_order_fit(
        model, theta, f, deltas, wpd, [(fields["seed"], 8, i) for i in range(len(deltas))],
        substeps=fields["substeps"], bins=fields["bins"], moment=2,
    )
    results = {
        "windows": int(eps1.size),
        "delta": float(fields["delta"]),
        "substeps": fields["substeps"],
        "var_eps1": float(eps1.var()),
        "var_xi1": float(xi1.var()),
        "xi1_discrete_variance": xi1_discrete_variance(fields["substeps"]),
        "cov_eps_xi": float((eps1 * xi1).mean()),
        "slope_xi2_mean": slope_mean,
        "slope_xi2_sq": slope_sq,
    }
    return results, {}


def _run_avar(fields, threads):
    model, theta = _model_theta(fields)
    f = get_function(fields["f"])
    free = fields["free"]
    if free is None:
        free = (0, 1) if model.dim == 2 else None
    if free is None:
        raise _fail(f"field 'free' is required for model {model.name!r} (dim {model.dim})")
    lo = limit_objects(model, theta, theta, f, free=tuple(free))
    results = {
        "model": model.name,
        "theta": [float(t) for t in theta],
        "f": fields["f"],
        "v0_scalar": avar_scalar(model, theta, f),
        "v0_matrix": lo.v0.tolist(),
        "w": lo.w.tolist(),
        "w_condition": lo.w_condition,
        "w_singular": bool(lo.w_singular),
    }
    if fields["gamma_grid"] is not None:
        rows = []
        for th_g in fields["gamma_grid"]:
            lg = limit_objects(model, theta, th_g, f, free=tuple(free))
            rows.append({"theta": [float(t) for t in th_g], "gamma": lg.gamma.tolist()})
        results["gamma_grid"] = rows
    return results, {}


def _load_observations(data, base_dir):
    if isinstance(data, dict) and "path" in data:
        path = data["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise _fail(f"data file not found: {path}")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return arr[:, 1], None
    if isinstance(data, dict) and "simulate" in data:
        spec = data["simulate"]
        extra = set(spec) - {"model", "theta", "n", "delta", "substeps", "seed"}
        if extra:
            raise _fail(f"data.simulate has unknown keys {sorted(extra)}")
        model = get_model(spec["model"])
        scheme = SamplingScheme(spec["n"], float(spec["delta"]), spec.get("substeps", 16))
        bundle = simulate_path(model, model.params(spec["theta"]), scheme, spec.get("seed", 0))
        return bundle.y, spec.get("seed", 0)
    raise _fail("data must be {'path': csvfile} or {'simulate': {...}}")


def _run_estimate(fields, threads, base_dir):
    model = get_model(fields["model"])
    f = get_function(fields["f"])
    y, data_seed = _load_observations(fields["data"], base_dir)
    delta = float(fields["delta"])
    template = np.asarray(fields["theta_template"], dtype=float)
    free = list(fields["free"])
    bounds = np.asarray(fields["bounds"], dtype=float)
    init = fields["init"]
    init = 0.5 * (bounds[:, 0] + bounds[:, 1]) if init is None else np.asarray(init, float)

    def full(vals):
        th = template.copy()
        th[free] = vals
        return th

    if fields["q"] == 0:

        def gn(vals):
            return np.array(
                [gn_simple(full(vals), y, model, f, delta, mean_mode=fields["q0_mean_mode"])]
            )

    else:
        stats = onelag_stats(f(y))
        coeffs = OneLagCoeffs(model, f, delta, fields["coeff_mode"])

        def gn(vals):
            cv = coeffs(full(vals))
            return stats.gn(cv.a0, cv.a1)

    res = solve(gn, init, bounds)
    results = {
        "theta_hat": res.theta_hat.tolist(),
        "gn_norm": res.gn_norm,
        "iterations": res.iterations,
        "converged": bool(res.converged),
        "mode": fields["coeff_mode"] if fields["q"] == 1 else fields["q0_mean_mode"],
        "n": int(y.size),
        "delta": delta,
        "seed": data_seed,
    }
    return results, {}


def _experiment_config(fields) -> ExperimentConfig:
    grid = tuple(
        SamplingScheme(g["n"], float(g["delta"]), g.get("substeps", 16))
        for g in fields["grid"]
    )
    return ExperimentConfig(
        model=fields["model"],
        theta0=tuple(float(t) for t in fields["theta0"]),
        f=fields["f"] if isinstance(fields["f"], str) else tuple(fields["f"]),
        q=fields["q"],
        free=tuple(fields["free"]),
        bounds=tuple(tuple(float(v) for v in b) for b in fields["bounds"]),
        grid=grid,
        replications=fields["replications"],
        seed=fields["seed"],
        coeff_mode=fields["coeff_mode"],
        theta_init=None if fields["init"] is None else tuple(fields["init"]),
        q0_mean_mode=fields["q0_mean_mode"],
        exact_transitions=fields["exact_transitions"],
    )


def _grid_row(g) -> dict:
    d = g.bias.size
    row = {
        "grid_id": g.grid_id,
        "n": g.scheme.n,
        "delta": g.scheme.delta,
        "substeps": g.scheme.substeps,
        "replications": g.replications,
        "failed": g.failed,
        "rate_n_delta3": g.rate_n_delta3,
        "rate_n_delta2": g.rate_n_delta2,
        "bias": g.bias.tolist(),
        "mean_z": None if g.mean_z is None else g.mean_z.tolist(),
        "cov_z": None if g.cov_z is None else g.cov_z.tolist(),
        "ks": None if g.ks is None else g.ks.tolist(),
        "ks_defined": g.ks_defined,
        "rmse": g.rmse,
        "sigma_theory": g.sigma_theory.tolist(),
    }
    return row


def _study_csv(report) -> str:
    d = report.config.d_free
    head = ["grid_id", "n", "delta", "substeps", "M", "failed"]
    head += [f"bias_{j+1}" for j in range(d)]
    head += [f"mean_z_{j+1}" for j in range(d)]
    head += [f"var_z_{j+1}" for j in range(d)]
    if d == 2:
        head.append("cov_z_12")
    head += [f"ks_{j+1}" for j in range(d)]
    head.append("rmse")
    lines = [",".join(head)]
    for g in report.grids:
        row = [g.grid_id, g.scheme.n, g.scheme.delta, g.scheme.substeps, g.replications, g.failed]
        row += [float(v) for v in g.bias]
        row += [float("nan")] * d if g.mean_z is None else [float(v) for v in g.mean_z]
        if g.cov_z is None:
            row += [float("nan")] * d + ([float("nan")] if d == 2 else [])
        else:
            row += [float(g.cov_z[j, j]) for j in range(d)]
            if d == 2:
                row.append(float(g.cov_z[0, 1]))
        row += [float("nan")] * d if g.ks is None else [float(v) for v in g.ks]
        row.append(g.rmse)
        lines.append(csv_line(row))
    return "\n".join(lines) + "\n"


def _replications_csv(report) -> str:
    d = report.config.d_free
    head = ["grid_id", "rep", "seed"]
    head += [f"theta_{j+1}" for j in range(d)]
    head += [f"z_{j+1}" for j in range(d)]
    head.append("converged")
    lines = [",".join(head)]
    for g in report.grids:
        for r in g.records:
            row = [g.grid_id, r.rep, r.seed]
            row += [float(v) for v in r.theta_hat]
            row += [float(v) for v in r.z]
            row.append(bool(r.converged))
            lines.append(csv_line(row))
    return "\n".join(lines) + "\n"


def _run_study_cmd(fields, threads, rate: bool):
    config = _experiment_config(fields)
    if rate:
        out = rate_study(config, threads=threads)
        report, slope = out.report, out.slope
    else:
        report = run_study(config, threads=threads)
        slope = report.rmse_slope
    results = {"grids": [_grid_row(g) for g in report.grids]}
    if rate:
        results["slope"] = slope
    elif slope is not None:
        results["rmse_slope"] = slope
    files = {"report.csv": _study_csv(report)}
    if fields["dump_replications"]:
        files["replications.csv"] = _replications_csv(report)
    return results, files


def dispatch(config: RunConfig, out_dir=None, threads=None, seed=None) -> int:
    """Run the configured command and write its artifacts atomically."""
    fields = dict(config.fields)
    if seed is not None:
        fields["seed"] = seed
    if threads is None:
        threads = fields.get("threads", 1)
    out_dir = out_dir or fields.get("out") or "."

    try:
        if config.command == "simulate":
            results, files = _run_simulate(fields, threads)
        elif config.command == "verify-expansion":
            results, files = _run_verify_expansion(fields, threads)
        elif config.command == "avar":
            results, files = _run_avar(fields, threads)
        elif config.command == "estimate":
            results, files = _run_estimate(fields, threads, out_dir)
        elif config.command == "study":
            results, files = _run_study_cmd(fields, threads, rate=False)
        elif config.command == "rate-study":
            results, files = _run_study_cmd(fields, threads, rate=True)
        else:  # pragma: no cover - parse_config rejects unknown commands
            raise _fail(f"unknown command {config.command!r}")
    except ConfigError as err:
        _print_error(err)
        return 2
    except IntdiffError as err:
        _print_error(err)
        return 1

    echo = {k: v for k, v in fields.items() if k != "out"}
    report = {"command": config.command, "config": echo, "results": results}
    validate_report(json.loads(dumps_json(report)))
    files["report.json"] = dumps_json(report, indent=2)

    os.makedirs(out_dir, exist_ok=True)
    for name, content in files.items():
        _atomic_write(os.path.join(out_dir, name), content)
    return 0


def _atomic_write(path: str, content: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _print_error(err: Exception) -> None:
    name = ERROR_NAMES.get(type(err).__name__, "error")
    payload = {"error": name, "message": str(err)}
    if isinstance(err, NoRootError) and err.best is not None:
        payload["best_theta"] = err.best.theta_hat.tolist()
        payload["best_gn_norm"] = err.best.gn_norm
    sys.stderr.write(json.dumps(payload) + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="intdiff",
        description="Simulation and prediction-based estimation for integrated diffusions",
    )
    ap.add_argument("config", help="path to a JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory (overrides config)")
    ap.add_argument("--threads", type=int, default=None, help="worker processes for studies")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    args = ap.parse_args(argv)

    try:
        with open(args.config, "r") as fh:
            text = fh.read()
    except OSError as err:
        _print_error(ConfigError(f"cannot read config: {err}"))
        return 2
    try:
        config = parse_config(text)
    except ConfigError as err:
        _print_error(err)
        return 2
    return dispatch(config, out_dir=args.out, threads=args.threads, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
