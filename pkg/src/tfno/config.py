"""Run configuration: one JSON file drives every command.

The file mirrors each module's config record under a section key, with the
seed at top level.  Validation is strict: unknown keys anywhere are
rejected before any compute, missing keys fall back to the defaults below,
and types must match.  Paths and (where a flag exists) the seed are the
only values a command line can supply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .fno import OperatorConfig
from .losses import LossWeights, SobolevConfig
from .ressim import FluidModel, GridGeometry, SamplerConfig, SolverOptions
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "seed": 20250808,
    "grid": {"nx": 32, "ny": 32, "dx": 100.0, "dy": 100.0, "h": 10.0},
    "fluid": {
        "t_res": 330.0,
        "t_sc": 293.15,
        "p_sc": 101325.0,
        "viscosity": 1.3e-5,
        "z_coeff": 1.25e-8,
        "p_min": 2.0e6,
        "p_max": 2.5e7,
    },
    "solver": {
        "tol_picard": 1.0,
        "max_picard": 50,
        "tol_lin": 1e-10,
        "max_lin": 50000,
        "substeps": 16,
    },
    "sampler": {
        "n_scenarios": 200,
        "injection_fraction": 0.4,
        "n_steps": 16,
        "dt_days": 10.0,
        "perm_mean_md": 80.0,
        "perm_log_std": 1.1,
        "perm_smooth_cells": 3.0,
        "porosity_base": 0.18,
        "porosity_span": 0.06,
        "p0_lo": 1.12e7,
        "p0_hi": 1.28e7,
        "p0_perturb": 4.0e5,
        "wells_lo": 4,
        "wells_hi": 12,
        "rate_lo": 7.5e4,
        "rate_hi": 3.0e5,
        "well_eps": 1.0,
        "well_margin": 2,
        "well_min_dist": 7,
    },
    "operator": {
        "layers": 4,
        "modes": [12, 12, 8],
        "d_v": 8,
        "d_a": 8,
        "d_u": 1,
        "power": 4,
        "factorization": "tt",
        "tt_ranks": [8, 8, 8, 8],
        "activation": "gelu",
        "lift_width": 12,
        "proj_width": 12,
        "spectral_gain": 0.6,
    },
    "training": {
        "epochs": 80,
        "batch_size": 10,
        "learning_rate": 5e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 0.0,
        "grad_clip": 1.0,
        "lr_min_factor": 0.05,
        "fractions": [0.7, 0.15, 0.15],
        "loss": {"approximation": 1.0, "reconstruction": 0.1},
        "sobolev": {"k": 1, "p": 2.0, "eps_den": 1e-12},
    },
}


def _merge(schema, data, path):
    if isinstance(schema, dict):
        if not isinstance(data, dict):
            raise ConfigError("%s: expected an object" % path)
        unknown = set(data) - set(schema)
        if unknown:
            raise ConfigError("%s: unknown keys %s" % (path, sorted(unknown)))
        return {
            key: _merge(schema[key], data[key], "%s.%s" % (path, key)) if key in data
            else _copy_default(schema[key])
            for key in schema
        }
    if isinstance(schema, bool):  # bool is int's subclass: keep order
        raise ConfigError("%s: unsupported schema type" % path)
    if isinstance(schema, int) and not isinstance(schema, bool):
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ConfigError("%s: expected a number" % path)
        if isinstance(data, float) and data != int(data):
            raise ConfigError("%s: expected an integer" % path)
        return int(data)
    if isinstance(schema, float):
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ConfigError("%s: expected a number" % path)
        return float(data)
    if isinstance(schema, str):
        if not isinstance(data, str):
            raise ConfigError("%s: expected a string" % path)
        return data
    if isinstance(schema, list):
        if not isinstance(data, list) or len(data) != len(schema):
            raise ConfigError("%s: expected a list of %d values" % (path, len(schema)))
        return [_merge(s, d, "%s[%d]" % (path, i)) for i, (s, d) in enumerate(zip(schema, data))]
    raise ConfigError("%s: unsupported schema type" % path)


def _copy_default(value):
    if isinstance(value, dict):
        return {k: _copy_default(v) for k, v in value.items()}
    if isinstance(value, list):
        return list(value)
    return value


@dataclass(frozen=True)
class RunConfig:
    seed: int
    raw: dict
    grid: GridGeometry
    fluid: FluidModel
    solver: SolverOptions
    sampler: SamplerConfig
    n_scenarios: int
    injection_fraction: float
    operator: OperatorConfig
    training: TrainConfig


def from_dict(data: dict) -> RunConfig:
    merged = _merge(_SCHEMA, data, "config")
    try:
        grid = GridGeometry(**merged["grid"])
        fluid = FluidModel(**merged["fluid"])
        solver = SolverOptions(**merged["solver"])
        samp = dict(merged["sampler"])
        n_scen = samp.pop("n_scenarios")
        inj_frac = samp.pop("injection_fraction")
        sampler = SamplerConfig(**samp)
        op = dict(merged["operator"])
        op["modes"] = tuple(op["modes"])
        op["tt_ranks"] = tuple(op["tt_ranks"])
        operator = OperatorConfig(**op)
        trn = dict(merged["training"])
        loss = trn.pop("loss")
        sob = trn.pop("sobolev")
        training = TrainConfig(
            seed=merged["seed"],
            fractions=tuple(trn.pop("fractions")),
            loss_weights=LossWeights(**loss),
            sobolev=SobolevConfig(**sob),
            operator=operator,
            **trn,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if n_scen < 1:
        raise ConfigError("sampler.n_scenarios must be >= 1")
    if not (0.0 <= inj_frac < 1.0):
        raise ConfigError("sampler.injection_fraction must lie in [0, 1)")
    return RunConfig(seed=merged["seed"], raw=merged, grid=grid, fluid=fluid,
                     solver=solver, sampler=sampler, n_scenarios=n_scen,
                     injection_fraction=inj_frac, operator=operator, training=training)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError("config file %s does not exist" % p)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config %s is not valid JSON: %s" % (p, exc)) from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return from_dict(data)


def default_dict() -> dict:
    return _copy_default(_SCHEMA)
