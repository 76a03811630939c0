"""Report serialization: 17-significant-digit JSON and CSV, plus the
schema checks used to validate every emitted report.

The JSON writer is deliberately tiny so float formatting is under our
control (the stdlib encoder cannot be told to print %.17g).
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dumps_json(obj, indent: int = 0) -> str:
    """Serialize with floats at 17 significant digits, keys in given order."""
    obj = _to_jsonable(obj)
    pad = " " * indent
    nl = "\n" if indent else ""

    def enc(o, depth):
        o = _to_jsonable(o)
        lead = pad * (depth + 1)
        close = pad * depth
        if o is None:
            return "null"
        if isinstance(o, bool):
            return "true" if o else "false"
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return fmt_float(o)
        if isinstance(o, str):
            out = o.replace("\\", "\\\\").replace('"', '\\"')
            out = out.replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t")
            return f'"{out}"'
        if isinstance(o, Mapping):
            if not o:
                return "{}"
            items = [f'{lead if nl else ""}{enc(str(k), depth)}: {enc(v, depth + 1)}' for k, v in o.items()]
            return "{" + nl + ("," + nl).join(items) + nl + (close if nl else "") + "}"
        if isinstance(o, (list, tuple, Sequence)):
            if not len(o):
                return "[]"
            items = [f'{lead if nl else ""}{enc(v, depth + 1)}' for v in o]
            return "[" + nl + ("," + nl).join(items) + nl + (close if nl else "") + "]"
        raise TypeError(f"cannot serialize {type(o)}")

    return enc(obj, 0) + "\n"


def csv_line(values) -> str:
    out = []
    for v in values:
        if isinstance(v, (bool, np.bool_)):
            out.append("1" if v else "0")
        elif isinstance(v, (int, np.integer)):
            out.append(str(int(v)))
        elif isinstance(v, (float, np.floating)):
            out.append(fmt_float(float(v)))
        else:
            out.append(str(v))
    return ",".join(out)


# ---------------------------------------------------------------------------
# Schema validation for emitted reports (no external schema toolchain).
# ---------------------------------------------------------------------------

_num = (int, float)

REPORT_FIELDS = {
    "simulate": {"n": _num, "delta": _num, "substeps": _num, "seed": _num,
                 "violations": _num, "y_mean": _num, "y_var": _num},
    "verify-expansion": {"windows": _num, "delta": _num, "substeps": _num,
                         "var_eps1": _num, "var_xi1": _num, "cov_eps_xi": _num,
                         "slope_xi2_mean": _num, "slope_xi2_sq": _num},
    "avar": {"model": str, "theta": list, "f": (str, list), "v0_scalar": _num,
             "v0_matrix": list, "w": list},
    "estimate": {"theta_hat": list, "gn_norm": _num, "iterations": _num,
                 "converged": bool, "mode": str, "n": _num, "delta": _num,
                 "seed": (int, float, type(None))},
    "study": {"grids": list},
    "rate-study": {"slope": _num, "grids": list},
}

_GRID_FIELDS = {"grid_id": _num, "n": _num, "delta": _num, "substeps": _num,
                "replications": _num, "failed": _num, "bias": list,
                "rmse": _num, "rate_n_delta3": _num, "rate_n_delta2": _num}


def validate_report(report: dict) -> None:
    """Raise ConfigError unless the report matches its command's schema."""
    if not isinstance(report, dict):
        raise ConfigError("report must be a JSON object")
    for key in ("command", "config", "results"):
        if key not in report:
            raise ConfigError(f"report missing top-level key {key!r}")
    cmd = report["command"]
    if cmd not in REPORT_FIELDS:
        raise ConfigError(f"unknown report command {cmd!r}")
    if not isinstance(report["config"], dict):
        raise ConfigError("report config must be an object")
    results = report["results"]
    if not isinstance(results, dict):
        raise ConfigError("report results must be an object")
    for field, typ in REPORT_FIELDS[cmd].items():
        if field not in results:
            raise ConfigError(f"{cmd} report results missing field {field!r}")
        if not isinstance(results[field], typ):
            raise ConfigError(
                f"{cmd} report field {field!r} has type {type(results[field]).__name__}"
            )
    if cmd in ("study", "rate-study"):
        for row in results["grids"]:
            if not isinstance(row, dict):
                raise ConfigError("grid rows must be objects")
            for field, typ in _GRID_FIELDS.items():
                if field not in row:
                    raise ConfigError(f"grid row missing field {field!r}")
                if not isinstance(row[field], typ):
                    raise ConfigError(f"grid row field {field!r} has wrong type")
