"""Simulation and diagnostics for judging estimator bias with standardized errors."""

__version__ = "0.1.0"

from .diagnostics import (  # noqa: E402
    BiasReport,
    EstimateSample,
    Verdict,
    ZStarTransformer,
    classify,
    summarize,
    zstar,
)
from .estimator import GrowthCurveFIML, fit  # noqa: E402
from .missingness import apply_design, swmd6  # noqa: E402
from .model import ModelShape, PopulationParams, default_population, implied_moments  # noqa: E402

__all__ = [
    "BiasReport",
    "EstimateSample",
    "GrowthCurveFIML",
    "ModelShape",
    "PopulationParams",
    "Verdict",
    "ZStarTransformer",
    "apply_design",
    "classify",
    "default_population",
    "fit",
    "implied_moments",
    "summarize",
    "swmd6",
    "zstar",
]
