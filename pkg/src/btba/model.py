"""Bivariate second-order latent growth model and its implied moments.

Two constructs (B and H) are each measured at every wave by a small set of
indicators.  Indicators load on a wave-specific first-order factor, and the
first-order factors of a construct load on an intercept and a slope growth
factor with loadings ``[1, t]``.

Observed variables are ordered construct-major, wave-major, indicator-minor::

    B:w1:i1, B:w1:i2, B:w1:i3, B:w2:i1, ..., B:w5:i3, H:w1:i1, ..., H:w5:i3

Growth factors are ordered ``(I_B, S_B, I_H, S_H)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CovarianceError, DomainError

CONSTRUCTS = ("B", "H")
GROWTH_FACTORS = ("I_B", "S_B", "I_H", "S_H")
SLOPE_B, SLOPE_H = 1, 3

_PSD_TOL = 1e-10
_SYM_TOL = 1e-12


def _frozen(a, shape=None, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise DomainError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelShape:
    """Wave and indicator layout of the growth model.

    ``indicators_per_wave=1`` selects the single-indicator mode, in which the
    observed variable at each wave *is* the first-order factor (loading 1,
    intercept 0, no residual).
    """

    time_scores: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    indicators_per_wave: int = 3

    def __post_init__(self):
        ts = tuple(float(t) for t in self.time_scores)
        object.__setattr__(self, "time_scores", ts)
        if len(ts) < 2 or np.any(np.diff(ts) <= 0):
            raise DomainError("time_scores must be strictly increasing with >= 2 waves")
        if self.indicators_per_wave < 1:
            raise DomainError("indicators_per_wave must be >= 1")

    @property
    def constructs(self) -> int:
        return len(CONSTRUCTS)

    @property
    def waves(self) -> int:
        return len(self.time_scores)

    @property
    def single_indicator(self) -> bool:
        return self.indicators_per_wave == 1

    @property
    def n_factors(self) -> int:
        return self.constructs * self.waves

    @property
    def n_observed(self) -> int:
        return self.constructs * self.waves * self.indicators_per_wave

    def var_index(self, construct: int, wave: int, indicator: int) -> int:
        return (construct * self.waves + wave) * self.indicators_per_wave + indicator

    def labels(self) -> list[str]:
        return [
            f"{c}:w{w + 1}:i{i + 1}"
            for c in CONSTRUCTS
            for w in range(self.waves)
            for i in range(self.indicators_per_wave)
        ]

    def wave_columns(self, wave: int) -> np.ndarray:
        """Column indices of every indicator (both constructs) at ``wave``."""
        k = self.indicators_per_wave
        return np.array(
            [self.var_index(c, wave, i) for c in range(self.constructs) for i in range(k)]
        )


@dataclass(frozen=True)
class PopulationParams:
    growth_means: np.ndarray
    growth_cov: np.ndarray
    disturbance_vars: np.ndarray  # (constructs, waves)
    loadings: np.ndarray  # (constructs, indicators)
    measurement_intercepts: np.ndarray  # (constructs, indicators)
    residual_vars: np.ndarray  # (constructs, waves, indicators)

    def __post_init__(self):
        object.__setattr__(self, "growth_means", _frozen(self.growth_means, (4,)))
        object.__setattr__(self, "growth_cov", _frozen(self.growth_cov, (4, 4)))
        for name in ("disturbance_vars", "loadings", "measurement_intercepts", "residual_vars"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.disturbance_vars.ndim != 2 or self.disturbance_vars.shape[0] != 2:
            raise DomainError("disturbance_vars must have shape (2, waves)")
        if self.loadings.ndim != 2 or self.loadings.shape[0] != 2:
            raise DomainError("loadings must have shape (2, indicators)")
        if self.measurement_intercepts.shape != self.loadings.shape:
            raise DomainError("measurement_intercepts must match loadings in shape")
        expected = (2, self.disturbance_vars.shape[1], self.loadings.shape[1])
        if self.residual_vars.shape != expected:
            raise DomainError(f"residual_vars must have shape {expected}")

    @property
    def shape_hint(self) -> tuple[int, int]:
        return self.disturbance_vars.shape[1], self.loadings.shape[1]

    def validate(self) -> "PopulationParams":
        psi = self.growth_cov
        if not np.allclose(psi, psi.T, atol=_SYM_TOL, rtol=0):
            raise CovarianceError("growth_cov is not symmetric")
        if np.linalg.eigvalsh(psi).min() < -_PSD_TOL:
            raise CovarianceError("growth_cov is not positive semidefinite")
        if np.any(np.diag(psi) < 0) or np.any(self.disturbance_vars < 0) or np.any(
            self.residual_vars < 0
        ):
            raise DomainError("variances must be nonnegative")
        if self.loadings[0, 0] != 1.0 or self.loadings[1, 0] != 1.0:
            raise DomainError("first loading per construct must be fixed to 1")
        if self.measurement_intercepts[0, 0] != 0.0 or self.measurement_intercepts[1, 0] != 0.0:
            raise DomainError("first intercept per construct must be fixed to 0")
        return self


@dataclass(frozen=True)
class MomentStructure:
    mean: np.ndarray
    cov: np.ndarray
    labels: tuple = field(default=(), compare=False)

    def __post_init__(self):
        mean = _frozen(self.mean)
        cov = _frozen(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise DomainError("cov must be square and match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def check(self) -> "MomentStructure":
        cov = self.cov
        if np.max(np.abs(cov - cov.T), initial=0.0) > _SYM_TOL:
            raise CovarianceError("implied covariance is not symmetric")
        scale = max(1.0, float(np.max(np.abs(cov), initial=0.0)))
        if cov.size and np.linalg.eigvalsh(cov).min() < -_PSD_TOL * scale:
            raise CovarianceError("implied covariance is not positive semidefinite")
        return self


def indicator_loading_matrix(shape: ModelShape, loadings) -> np.ndarray:
    """Block-diagonal loading matrix mapping first-order factors to indicators."""
    loadings = np.asarray(loadings, dtype=float)
    lam = np.zeros((shape.n_observed, shape.n_factors))
    k = shape.indicators_per_wave
    for c in range(shape.constructs):
        for w in range(shape.waves):
            row = shape.var_index(c, w, 0)
            lam[row : row + k, c * shape.waves + w] = loadings[c]
    return lam


def growth_loading_matrix(shape: ModelShape) -> np.ndarray:
    """Map growth factors ``(I_B, S_B, I_H, S_H)`` to first-order factors."""
    out = np.zeros((shape.n_factors, 4))
    t = np.asarray(shape.time_scores)
    for c in range(shape.constructs):
        rows = slice(c * shape.waves, (c + 1) * shape.waves)
        out[rows, 2 * c] = 1.0
        out[rows, 2 * c + 1] = t
    return out


def slope_correlation(growth_cov) -> float:
    psi = np.asarray(growth_cov, dtype=float)
    vb, vh = psi[SLOPE_B, SLOPE_B], psi[SLOPE_H, SLOPE_H]
    if vb <= 0 or vh <= 0:
        raise DomainError("slope variances must be strictly positive")
    return float(psi[SLOPE_B, SLOPE_H] / np.sqrt(vb * vh))


def set_slope_correlation(params: PopulationParams, rho: float) -> PopulationParams:
    """Return ``params`` with the B/H slope covariance set to correlation ``rho``."""
    if not -1.0 <= rho <= 1.0:
        raise DomainError(f"rho={rho!r} outside [-1, 1]")
    psi = np.array(params.growth_cov)
    vb, vh = psi[SLOPE_B, SLOPE_B], psi[SLOPE_H, SLOPE_H]
    if vb <= 0 or vh <= 0:
        raise DomainError("slope variances must be strictly positive")
    psi[SLOPE_B, SLOPE_H] = psi[SLOPE_H, SLOPE_B] = rho * np.sqrt(vb * vh)
    if np.linalg.eigvalsh(psi).min() < -_PSD_TOL:
        raise CovarianceError(f"growth covariance is not PSD at rho={rho}")
    return replace(params, growth_cov=psi)


def implied_moments(params: PopulationParams, shape: ModelShape | None = None) -> MomentStructure:
    """Model-implied mean vector and covariance matrix of the observed variables.

    ``mu = tau + L1 @ L2 @ alpha`` and
    ``Sigma = L1 @ (L2 @ Psi @ L2.T + D_zeta) @ L1.T + Theta``.
    """
    if shape is None:
        waves, k = params.shape_hint
        shape = ModelShape(time_scores=tuple(range(waves)), indicators_per_wave=k)
    if params.shape_hint != (shape.waves, shape.indicators_per_wave):
        raise DomainError("params do not match the model shape")
    lam1 = indicator_loading_matrix(shape, params.loadings)
    lam2 = growth_loading_matrix(shape)
    phi = lam2 @ params.growth_cov @ lam2.T + np.diag(params.disturbance_vars.ravel())
    cov = lam1 @ phi @ lam1.T + np.diag(params.residual_vars.ravel())
    cov = 0.5 * (cov + cov.T)
    tau = np.repeat(params.measurement_intercepts[:, None, :], shape.waves, axis=1).ravel()
    mean = tau + lam1 @ (lam2 @ params.growth_means)
    return MomentStructure(mean, cov, tuple(shape.labels())).check()


def default_population(rho: float = 0.1, shape: ModelShape | None = None) -> PopulationParams:
    """Illustrative, configurable population values shipped with the package.

    These are placeholders for the empirical values used in published work,
    which are not reproduced here; override them through a config file.
    """
    shape = shape or ModelShape()
    w, k = shape.waves, shape.indicators_per_wave
    psi = np.diag([1.0, 0.25, 1.0, 0.25])
    psi[0, 2] = psi[2, 0] = 0.3
    if k == 1:
        loadings, intercepts, resid = np.ones((2, 1)), np.zeros((2, 1)), np.zeros((2, w, 1))
    else:
        base_l = np.array([1.0, 0.9, 0.8] + [0.8] * (k - 3))[:k]
        base_t = np.array([0.0, 0.1, -0.1] + [0.0] * (k - 3))[:k]
        loadings = np.tile(base_l, (2, 1))
        intercepts = np.tile(base_t, (2, 1))
        resid = np.full((2, w, k), 0.36)
    params = PopulationParams(
        growth_means=[0.0, 0.5, 0.0, 0.5],
        growth_cov=psi,
        disturbance_vars=np.full((2, w), 0.25),
        loadings=loadings,
        measurement_intercepts=intercepts,
        residual_vars=resid,
    )
    return set_slope_correlation(params, rho).validate()


def single_indicator_population(
    growth_means, growth_cov, shape: ModelShape, disturbance_vars=None
) -> PopulationParams:
    """Population in single-indicator mode (loading 1, intercept 0, no residual)."""
    w = shape.waves
    if disturbance_vars is None:
        disturbance_vars = np.zeros((2, w))
    return PopulationParams(
        growth_means=growth_means,
        growth_cov=growth_cov,
        disturbance_vars=disturbance_vars,
        loadings=np.ones((2, 1)),
        measurement_intercepts=np.zeros((2, 1)),
        residual_vars=np.zeros((2, w, 1)),
    ).validate()
