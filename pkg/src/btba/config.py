"""Loading simulation configuration files (TOML, versioned)."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .estimator import OptimizerSettings
from .missingness import MissingDesign
from .model import ModelShape, PopulationParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
DATA_CONDITIONS = ("Complete", "SWMD6_FIML")
PROFILES = {"ci": 200, "local": 1000, "full": 5000}


@dataclass(frozen=True)
class SimulationConfig:
    shape: ModelShape
    population: PopulationParams
    design: MissingDesign
    rhos: tuple
    n_per_group: tuple
    data_conditions: tuple
    settings: OptimizerSettings
    replications: int | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def digest(self) -> str:
        """Hash of the parsed configuration (formatting and comments ignored)."""
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def default_config_text() -> str:
    return resources.files("btba").joinpath("data/default.toml").read_text()


def _broadcast(value, shape, name):
    arr = np.asarray(value, dtype=float)
    try:
        return np.broadcast_to(arr, shape).copy()
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot use shape {arr.shape} for {shape}") from exc


def parse_config(doc: dict) -> SimulationConfig:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    try:
        m = doc.get("model", {})
        shape = ModelShape(
            tuple(m.get("time_scores", (0, 1, 2, 3, 4))), int(m.get("indicators_per_wave", 3))
        )
        w, k = shape.waves, shape.indicators_per_wave
        p = doc["population"]
        population = PopulationParams(
            growth_means=_broadcast(p["growth_means"], (4,), "growth_means"),
            growth_cov=_broadcast(p["growth_cov"], (4, 4), "growth_cov"),
            disturbance_vars=_broadcast(p.get("disturbance_vars", 0.0), (2, w), "disturbance_vars"),
            loadings=_broadcast(p.get("loadings", 1.0), (2, k), "loadings"),
            measurement_intercepts=_broadcast(
                p.get("measurement_intercepts", 0.0), (2, k), "measurement_intercepts"
            ),
            residual_vars=_broadcast(p.get("residual_vars", 0.0), (2, w, k), "residual_vars"),
        ).validate()
        d = doc.get("design", {})
        design = MissingDesign(np.array(d["pattern"], dtype=bool), d.get("name", "custom"))
        g = doc.get("grid", {})
        conditions = tuple(g.get("data_conditions", DATA_CONDITIONS))
        bad = [c for c in conditions if c not in DATA_CONDITIONS]
        if bad:
            raise ConfigError(f"unknown data conditions {bad}")
        o = doc.get("optimizer", {})
        settings = OptimizerSettings(
            max_iterations=int(o.get("max_iterations", 500)),
            loglik_tol=float(o.get("loglik_tol", 1e-9)),
            grad_tol=float(o.get("grad_tol", 1e-5)),
            fd_step=float(o.get("fd_step", 1e-5)),
            gradient=str(o.get("gradient", "analytic")),
        )
        reps = g.get("replications")
        return SimulationConfig(
            shape=shape,
            population=population,
            design=design,
            rhos=tuple(float(r) for r in g.get("rhos", (0.1, 0.3, 0.55))),
            n_per_group=tuple(int(n) for n in g.get("n_per_group", (40, 60, 80, 100, 300, 500, 800, 1000))),
            data_conditions=conditions,
            settings=settings,
            replications=None if reps is None else int(reps),
            raw=doc,
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from exc


def loads_config(text: str) -> SimulationConfig:
    try:
        return parse_config(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> SimulationConfig:
    """Read a config file; ``None`` returns the shipped defaults."""
    text = default_config_text() if path is None else Path(path).read_text()
    return loads_config(text)
