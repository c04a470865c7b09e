"""Experiment configuration: JSON files validated against ``schema/experiment.schema.json``."""
from __future__ import annotations

import hashlib
import json
import os
from functools import lru_cache
from pathlib import Path

import jsonschema
import numpy as np

from .charts import get_metric
from .errors import ConfigError
from .pde import GridSpec
from .process import EnsembleConfig, ProcessParams

SCHEMA_PATH = Path(__file__).parent / "schema" / "experiment.schema.json"


@lru_cache(maxsize=1)
def schema() -> dict:
    with open(SCHEMA_PATH) as fh:
        return json.load(fh)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate(cfg: dict) -> dict:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = _pointer(err.absolute_path)
        raise ConfigError(f"{path}: {err.message}", path)
    _check_sections(cfg)
    return cfg


REQUIRED = {
    "simulate": ("metric", "process", "ensemble"),
    "evolve": ("metric", "process", "grid", "evolve"),
    "fk-compare": ("process", "ensemble", "grid", "fk", "probes"),
    "identity-check": ("identity",),
    "classical-limit": ("metric", "process", "classical"),
    "phi-sweep": ("process", "ensemble", "sweep"),
}


def _check_sections(cfg):
    for key in REQUIRED[cfg["kind"]]:
        if key not in cfg:
            raise ConfigError(f"/{key}: required for kind {cfg['kind']!r}", f"/{key}")
    ens = cfg.get("ensemble")
    if ens is not None and "horizon" in ens:
        steps = ens["horizon"] / ens["dt"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("/ensemble/horizon: must be a whole number of steps", "/ensemble/horizon")
    grid = cfg.get("grid")
    if grid is not None and len(grid["extents"]) != len(grid["points"]):
        raise ConfigError("/grid/points: length must match /grid/extents", "/grid/points")


def load(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"/: invalid JSON ({exc})", "/") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("/: top level must be an object", "/")
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON, ignoring where outputs go."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def output_dir(cfg: dict) -> Path:
    base = os.environ.get("QVLAB_OUTPUT_DIR")
    if base:
        return Path(base) / cfg["name"]
    return Path(cfg.get("output_dir", os.path.join("results", cfg["name"])))


def as_complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(v[0], v[1])
    return complex(v)


def metric_from(section: dict):
    return get_metric(section["name"], **section.get("params", {}))


def process_from(section: dict, dim: int) -> ProcessParams:
    return ProcessParams.gauge_fixed(section["rho"], section["phi"], m=section.get("m", 1.0),
                                     q=section.get("q", 0.0), dim=dim,
                                     mode=section.get("mode", "nonrelativistic"))


def ensemble_from(section: dict, dim: int, horizon=None) -> EnsembleConfig:
    z0 = tuple(as_complex(v) for v in section.get("z0", [0.0] * dim))
    T = horizon if horizon is not None else section.get("horizon", section["dt"])
    return EnsembleConfig(section["n_paths"], section["dt"], T, section["master_seed"], z0)


def potential_from(section, m=1.0):
    """U(x, t) for a potential block (harmonic: m omega^2 |x|^2 / 2); None for zero."""
    if section is None or section["type"] == "zero":
        return None
    if section["type"] == "constant":
        c = section.get("value", 0.0)
        return lambda x, t: np.full(np.shape(x)[:-1], c, dtype=complex)
    omega = section.get("omega", 1.0)
    return lambda x, t: 0.5 * m * omega ** 2 * np.sum(np.asarray(x) ** 2, axis=-1)


def grid_from(section: dict) -> GridSpec:
    return GridSpec(section["extents"], section["points"], section.get("boundary", "dirichlet"),
                    section.get("dt", 1e-3))
