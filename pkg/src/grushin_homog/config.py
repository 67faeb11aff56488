"""Experiment configuration: defaults, JSON schema and semantic validation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .control import CATALOG

COMMANDS = ("simulate", "measure", "ergodic", "cell", "effective", "perturb", "all")
ERGODIC_FUNCTIONS = ("quadratic", "odd", "constant")

DEFAULT_CONFIG = {
    "command": "all",
    "dynamics": {"alpha": 2.0, "rho": 0.0},
    "sim": {
        "dt": None,  # None -> 1e-3 / alpha
        "n_steps": None,  # None -> burn_in + 20 / (alpha dt)
        "n_paths": 10000,
        "burn_in": None,  # None -> 10 / (alpha dt)
        "seed": 0,
        "initial": [0.0, 0.0],
        "chunk_size": 16384,
    },
    "grids": {
        "measure": {"half_width": None, "count": 241},  # None -> 6 / sqrt(alpha)
        "fast": {"half_width": None, "count": 61},  # None -> 4 / sqrt(alpha)
        "slow": {"half_width": 4.0, "count": 81, "dt_back": 0.00125},
    },
    "problem": {
        "catalog_id": "bench-A",
        "overrides": {},
        "frozen": {"x": 0.0, "p": 1.0, "X": 0.0},
    },
    "ergodic_function": "quadratic",
    "delta_schedule": [0.1, 0.05, 0.02, 0.01, 0.005],
    "epsilons": [0.5, 0.2, 0.1, 0.05],
    "density_path": None,  # None -> <output_dir>/density.csv
    "output_dir": "runs/default",
    "checks": {
        "enabled": True,
        "moment_sigmas": 5.0,
        "measure_rel_tol": [0.03, 0.02],
        "measure_abs_tol": 0.01,
        "ergodic_rel_tol": 0.02,
        "lambda_rel_tol": 0.02,
        "lambda_abs_tol": 0.01,
        "perturb_final_fraction": 0.05,
    },
}

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_int = {"type": "integer"}
_opt_int = {"type": ["integer", "null"]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "command": {"enum": list(COMMANDS)},
    "dynamics": _obj({"alpha": _num, "rho": _num}),
    "sim": _obj({
        "dt": _opt_num, "n_steps": _opt_int, "n_paths": _int, "burn_in": _opt_int, "seed": _int,
        "initial": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}, "chunk_size": _int,
    }),
    "grids": _obj({
        "measure": _obj({"half_width": _opt_num, "count": _int}),
        "fast": _obj({"half_width": _opt_num, "count": _int}),
        "slow": _obj({"half_width": _num, "count": _int, "dt_back": _num}),
    }),
    "problem": _obj({
        "catalog_id": {"enum": sorted(CATALOG)},
        "overrides": {"type": "object", "additionalProperties": {"type": ["number", "array"]}},
        "frozen": _obj({"x": _num, "p": _num, "X": _num}),
    }),
    "ergodic_function": {"enum": list(ERGODIC_FUNCTIONS)},
    "delta_schedule": {"type": "array", "items": _num, "minItems": 3},
    "epsilons": {"type": "array", "items": _num, "minItems": 1},
    "density_path": {"type": ["string", "null"]},
    "output_dir": {"type": "string"},
    "checks": _obj({
        "enabled": {"type": "boolean"}, "moment_sigmas": _num,
        "measure_rel_tol": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "measure_abs_tol": _num, "ergodic_rel_tol": _num, "lambda_rel_tol": _num,
        "lambda_abs_tol": _num, "perturb_final_fraction": _num,
    }),
})


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    path: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.path}: {self.message}"


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "overrides":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def with_defaults(config: dict) -> dict:
    return _merge(DEFAULT_CONFIG, config)


def load_config(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _path(parts) -> str:
    return ".".join(str(p) for p in parts) or "<root>"


def validate(config: dict) -> list[Diagnostic]:
    """Pure validation; an empty list means the run will not fail on config grounds."""
    diags = []
    validator = jsonschema.Draft7Validator(SCHEMA)
    for err in sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path)):
        diags.append(Diagnostic("error", _path(err.absolute_path), err.message))
    if diags:
        return diags
    cfg = with_defaults(config)
    dyn = cfg["dynamics"]
    if not dyn["alpha"] > 0:
        diags.append(Diagnostic("error", "dynamics.alpha", "alpha must be > 0 (OU drift b(y) = -alpha y)"))
    if not dyn["rho"] >= 0:
        diags.append(Diagnostic("error", "dynamics.rho", "rho must be >= 0"))
    alpha_ok = dyn["alpha"] > 0
    if alpha_ok and cfg["command"] in ("cell", "all") and dyn["alpha"] <= 1:
        diags.append(Diagnostic("warning", "dynamics.alpha",
                                "the global Lipschitz bound L/(alpha-1) on the approximate correctors requires alpha > 1"))
    sim = cfg["sim"]
    if sim["dt"] is not None and alpha_ok:
        if not sim["dt"] > 0:
            diags.append(Diagnostic("error", "sim.dt", "dt must be > 0"))
        elif sim["dt"] * dyn["alpha"] >= 1:
            diags.append(Diagnostic("error", "sim.dt", "dt*alpha must be < 1"))
    for key in ("n_paths", "chunk_size"):
        if sim[key] < 1:
            diags.append(Diagnostic("error", f"sim.{key}", f"{key} must be positive"))
    if sim["n_steps"] is not None and sim["n_steps"] < 1:
        diags.append(Diagnostic("error", "sim.n_steps", "n_steps must be positive"))
    if sim["burn_in"] is not None and sim["burn_in"] < 0:
        diags.append(Diagnostic("error", "sim.burn_in", "burn_in must be >= 0"))
    if sim["burn_in"] is not None and sim["n_steps"] is not None and sim["burn_in"] >= sim["n_steps"]:
        diags.append(Diagnostic("error", "sim.burn_in", "burn_in must be < n_steps"))
    for name in ("measure", "fast"):
        g = cfg["grids"][name]
        if g["count"] < 3 or g["count"] % 2 == 0:
            diags.append(Diagnostic("error", f"grids.{name}.count", "count must be odd and >= 3"))
        if g["half_width"] is not None and not g["half_width"] > 0:
            diags.append(Diagnostic("error", f"grids.{name}.half_width", "half_width must be > 0"))
    slow = cfg["grids"]["slow"]
    if slow["count"] < 3 or slow["count"] % 2 == 0:
        diags.append(Diagnostic("error", "grids.slow.count", "count must be odd and >= 3"))
    for key in ("half_width", "dt_back"):
        if not slow[key] > 0:
            diags.append(Diagnostic("error", f"grids.slow.{key}", f"{key} must be > 0"))
    ds = cfg["delta_schedule"]
    if any(d <= 0 for d in ds) or any(b >= a for a, b in zip(ds, ds[1:])):
        diags.append(Diagnostic("error", "delta_schedule", "must be positive and strictly decreasing"))
    eps = cfg["epsilons"]
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        diags.append(Diagnostic("error", "epsilons", "must be positive and strictly decreasing"))
    prob = cfg["problem"]
    try:
        from .control import catalog_problem
        catalog_problem(prob["catalog_id"], **prob["overrides"])
    except TypeError as exc:
        diags.append(Diagnostic("error", "problem.overrides", f"unknown override: {exc}"))
    except ValueError as exc:
        diags.append(Diagnostic("error", "problem.overrides", str(exc)))
    return diags


def reference_config_json() -> str:
    return json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True) + "\n"
