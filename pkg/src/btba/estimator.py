"""Full-information maximum likelihood for the bivariate growth model.

Rows are grouped by missingness pattern; each pattern contributes through
its sufficient statistics (count, observed mean, scatter matrix), so the
cost of one likelihood evaluation does not grow with the sample size.

Free parameters live in an unconstrained space: variances are stored on the
log scale and the growth covariance as a Cholesky factor with log diagonal,
so every point the optimizer visits maps to a proper solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from sklearn.base import BaseEstimator

from .datagen import Dataset
from .errors import DomainError, SingularCovError, StartError
from .model import (
    SLOPE_B,
    SLOPE_H,
    ModelShape,
    MomentStructure,
    PopulationParams,
    growth_loading_matrix,
    indicator_loading_matrix,
    slope_correlation,
)

LOG_2PI = math.log(2.0 * math.pi)
_TRIL = np.tril_indices(4)
_DIAG_POS = np.array([i for i, (r, c) in enumerate(zip(*_TRIL)) if r == c])
_RCOND_MIN = 1e-14
_BOUNDARY_LOGVAR = math.log(1e-6)


@dataclass(frozen=True)
class OptimizerSettings:
    max_iterations: int = 500
    loglik_tol: float = 1e-9
    grad_tol: float = 1e-5
    fd_step: float = 1e-5
    gradient: str = "analytic"  # or "finite-difference"


class ParamLayout:
    """Positions of each parameter block inside the unconstrained vector."""

    def __init__(self, shape: ModelShape, free_disturbances: bool = True):
        self.shape = shape
        self.free_disturbances = free_disturbances
        w, k = shape.waves, shape.indicators_per_wave
        sizes = [
            ("means", 4),
            ("chol", 10),
            ("log_dist", 2 * w if free_disturbances else 0),
            ("loadings", 2 * (k - 1)),
            ("intercepts", 2 * (k - 1)),
            ("log_resid", 2 * w * k if k > 1 else 0),
        ]
        self.slices = {}
        pos = 0
        for name, size in sizes:
            self.slices[name] = slice(pos, pos + size)
            pos += size
        self.size = pos
        self.lam2 = growth_loading_matrix(shape)

    def __eq__(self, other):
        return (
            isinstance(other, ParamLayout)
            and self.shape == other.shape
            and self.free_disturbances == other.free_disturbances
        )

    def __repr__(self):
        return f"ParamLayout({self.shape!r}, free_disturbances={self.free_disturbances})"

    def names(self) -> list[str]:
        w, k = self.shape.waves, self.shape.indicators_per_wave
        out = [f"mean[{f}]" for f in ("I_B", "S_B", "I_H", "S_H")]
        out += [f"chol[{r},{c}]" for r, c in zip(*_TRIL)]
        if self.free_disturbances:
            out += [f"log_dist[{c},{t}]" for c in "BH" for t in range(w)]
        out += [f"loading[{c},{i}]" for c in "BH" for i in range(1, k)]
        out += [f"intercept[{c},{i}]" for c in "BH" for i in range(1, k)]
        if k > 1:
            out += [f"log_resid[{c},{t},{i}]" for c in "BH" for t in range(w) for i in range(k)]
        return out

    # -- natural-space pieces -------------------------------------------------

    def chol_factor(self, x) -> np.ndarray:
        raw = np.asarray(x[self.slices["chol"]], dtype=float)
        L = np.zeros((4, 4))
        L[_TRIL] = raw
        d = np.arange(4)
        L[d, d] = np.exp(L[d, d])
        return L

    def unpack(self, x):
        """Natural-space arrays ``(alpha, L, psi, dist, lam, tau, resid)``."""
        x = np.asarray(x, dtype=float)
        w, k = self.shape.waves, self.shape.indicators_per_wave
        s = self.slices
        alpha = x[s["means"]]
        L = self.chol_factor(x)
        psi = L @ L.T
        dist = np.exp(x[s["log_dist"]]).reshape(2, w) if self.free_disturbances else np.zeros((2, w))
        lam = np.ones((2, k))
        tau = np.zeros((2, k))
        if k > 1:
            lam[:, 1:] = x[s["loadings"]].reshape(2, k - 1)
            tau[:, 1:] = x[s["intercepts"]].reshape(2, k - 1)
            resid = np.exp(x[s["log_resid"]]).reshape(2, w, k)
        else:
            resid = np.zeros((2, w, 1))
        return alpha, L, psi, dist, lam, tau, resid

    def moments(self, x):
        """Implied ``(mean, cov)`` plus intermediates reused by the gradient."""
        alpha, L, psi, dist, lam, tau, resid = self.unpack(x)
        lam1 = indicator_loading_matrix(self.shape, lam)
        phi = self.lam2 @ psi @ self.lam2.T + np.diag(dist.ravel())
        eta = self.lam2 @ alpha
        cov = lam1 @ phi @ lam1.T + np.diag(resid.ravel())
        mean = np.repeat(tau[:, None, :], self.shape.waves, axis=1).ravel() + lam1 @ eta
        parts = dict(alpha=alpha, L=L, dist=dist, lam=lam, resid=resid, lam1=lam1, phi=phi, eta=eta)
        return mean, cov, parts

    def log_variances(self, x) -> np.ndarray:
        _, _, psi, dist, _, _, resid = self.unpack(x)
        blocks = [np.diag(psi)]
        if self.free_disturbances:
            blocks.append(dist.ravel())
        if self.shape.indicators_per_wave > 1:
            blocks.append(resid.ravel())
        with np.errstate(divide="ignore"):
            return np.log(np.concatenate(blocks))


@dataclass(frozen=True)
class ParamVector:
    layout: ParamLayout
    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.shape != (self.layout.size,):
            raise StartError(f"expected {self.layout.size} parameters, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise StartError("parameters must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    def to_natural(self) -> PopulationParams:
        alpha, _, psi, dist, lam, tau, resid = self.layout.unpack(self.x)
        return PopulationParams(alpha, psi, dist, lam, tau, resid)

    @classmethod
    def from_natural(cls, params: PopulationParams, layout: ParamLayout) -> "ParamVector":
        shape = layout.shape
        if params.shape_hint != (shape.waves, shape.indicators_per_wave):
            raise StartError("params do not match the layout shape")
        try:
            L = np.linalg.cholesky(params.growth_cov)
        except np.linalg.LinAlgError as exc:
            raise StartError("growth covariance must be positive definite") from exc
        x = np.zeros(layout.size)
        s = layout.slices
        x[s["means"]] = params.growth_means
        L = L.copy()
        d = np.arange(4)
        L[d, d] = np.log(L[d, d])
        x[s["chol"]] = L[_TRIL]
        k = shape.indicators_per_wave
        with np.errstate(divide="raise"):
            try:
                if layout.free_disturbances:
                    x[s["log_dist"]] = np.log(params.disturbance_vars.ravel())
                if k > 1:
                    x[s["loadings"]] = params.loadings[:, 1:].ravel()
                    x[s["intercepts"]] = params.measurement_intercepts[:, 1:].ravel()
                    x[s["log_resid"]] = np.log(params.residual_vars.ravel())
            except FloatingPointError as exc:
                raise StartError("free variances must be strictly positive") from exc
        return cls(layout, x)

    def moments(self) -> MomentStructure:
        mean, cov, _ = self.layout.moments(self.x)
        return MomentStructure(mean, 0.5 * (cov + cov.T), tuple(self.layout.shape.labels()))


@dataclass(frozen=True)
class PatternStats:
    observed: np.ndarray  # column indices
    n: int
    mean: np.ndarray
    scatter: np.ndarray  # sum of outer products about ``mean``


def _canonical_order(Y) -> np.ndarray:
    """Row order that depends only on the row values, not their input order."""
    if Y.shape[0] < 2:
        return np.arange(Y.shape[0])
    order = np.argsort(Y[:, 0], kind="stable")
    if np.any(np.diff(Y[order, 0]) == 0):
        order = np.lexsort(Y.T[::-1])
    return order


def _mask_keys(mask) -> np.ndarray:
    if mask.shape[1] <= 62:
        return mask.astype(np.int64) @ (np.int64(1) << np.arange(mask.shape[1], dtype=np.int64))
    packed = np.packbits(mask, axis=1)
    return np.unique(packed, axis=0, return_inverse=True)[1].ravel()


def pattern_stats(data: Dataset) -> list[PatternStats]:
    """Group rows by missingness pattern in a row-order independent way."""
    if data.n == 0:
        raise DomainError("dataset is empty")
    if not data.mask.any(axis=1).all():
        raise DomainError("every row needs at least one observed cell")
    keys = _mask_keys(data.mask)
    uniq, first = np.unique(keys, return_index=True)
    patterns = data.mask[first]
    # lexicographic pattern order, fully observed pattern last
    patterns_order = np.lexsort(patterns.T[::-1])
    out = []
    for j in patterns_order:
        pat = patterns[j]
        obs = np.flatnonzero(pat)
        Y = data.values[keys == uniq[j]][:, obs]
        Y = Y[_canonical_order(Y)]
        ybar = Y.mean(axis=0)
        R = Y - ybar
        out.append(PatternStats(obs, Y.shape[0], ybar, R.T @ R))
    return out


def _as_stats(data) -> list[PatternStats]:
    if isinstance(data, Dataset):
        return pattern_stats(data)
    return list(data)


def _pattern_terms_loop(stats, mean, cov, want_grad):
    """Reference path: factorize every pattern's observed block separately."""
    p = mean.size
    ll = 0.0
    g_mu = np.zeros(p) if want_grad else None
    g_cov = np.zeros((p, p)) if want_grad else None
    for st in stats:
        o = st.observed
        try:
            C = np.linalg.cholesky(cov[np.ix_(o, o)])
        except np.linalg.LinAlgError as exc:
            raise SingularCovError("pattern covariance is not positive definite") from exc
        d = np.diag(C)
        if (d.min() / d.max()) ** 2 < _RCOND_MIN:
            raise SingularCovError("pattern covariance is numerically singular")
        logdet = 2.0 * np.log(d).sum()
        diff = st.mean - mean[o]
        A = cho_solve((C, True), np.eye(o.size))
        Ad = A @ diff
        ll -= 0.5 * (st.n * (o.size * LOG_2PI + logdet) + np.sum(A * st.scatter) + st.n * diff @ Ad)
        if want_grad:
            g_mu[o] += st.n * Ad
            M = st.scatter + st.n * np.outer(diff, diff)
            g_cov[np.ix_(o, o)] += -0.5 * (st.n * A - A @ M @ A)
    return ll, g_mu, g_cov


class _Batch:
    """Pattern statistics embedded in the full variable space.

    Patterns sharing a number of missing columns are stacked so their
    observed-block inverses come from one inverse of the full covariance
    (Schur complement), avoiding a factorization per pattern.
    """

    def __init__(self, stats, p):
        self.p = p
        self.groups = []
        by_missing = {}
        for st in stats:
            miss = np.setdiff1d(np.arange(p), st.observed)
            by_missing.setdefault(miss.size, []).append((st, miss))
        for n_miss in sorted(by_missing):
            items = by_missing[n_miss]
            k = len(items)
            ns = np.array([st.n for st, _ in items], dtype=float)
            ybar = np.zeros((k, p))
            scatter = np.zeros((k, p, p))
            obs_mask = np.zeros((k, p))
            missing = np.array([m for _, m in items], dtype=int).reshape(k, n_miss)
            for j, (st, _) in enumerate(items):
                o = st.observed
                ybar[j, o] = st.mean
                scatter[j][np.ix_(o, o)] = st.scatter
                obs_mask[j, o] = 1.0
            self.groups.append((ns, ybar, scatter, obs_mask, missing, p - n_miss))


def _pattern_inverses(batch, cov):
    """Per-group stacks of embedded observed-block inverses and log-determinants.

    Returns ``None`` when the full covariance is not safely positive definite,
    in which case callers fall back to per-pattern factorization.
    """
    p = batch.p
    try:
        C = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(C)
    if (d.min() / d.max()) ** 2 < _RCOND_MIN:
        return None
    logdet_full = 2.0 * np.log(d).sum()
    P = cho_solve((C, True), np.eye(p))
    out = []
    for ns, _, _, _, missing, _ in batch.groups:
        if missing.shape[1]:
            Pm = P[:, missing].transpose(1, 0, 2)  # (k, p, m)
            Pmm = np.take_along_axis(Pm, missing[:, :, None], axis=1)
            A = P[None] - Pm @ np.linalg.solve(Pmm, Pm.transpose(0, 2, 1))
            logdet = logdet_full + np.linalg.slogdet(Pmm)[1]
        else:
            A = np.broadcast_to(P, (ns.size, p, p))
            logdet = np.full(ns.size, logdet_full)
        out.append((A, logdet))
    return out


def _batched_terms(batch, mean, cov, want_grad):
    inverses = _pattern_inverses(batch, cov)
    if inverses is None:
        return None
    p = batch.p
    ll = 0.0
    g_mu = np.zeros(p) if want_grad else None
    g_cov = np.zeros((p, p)) if want_grad else None
    for (ns, ybar, scatter, obs_mask, _, k_obs), (A, logdet) in zip(batch.groups, inverses):
        diff = (ybar - mean) * obs_mask
        Ad = np.einsum("kij,kj->ki", A, diff)
        quad = np.einsum("ki,ki->k", diff, Ad)
        trs = np.einsum("kij,kij->k", A, scatter)
        ll -= 0.5 * np.sum(ns * (k_obs * LOG_2PI + logdet) + trs + ns * quad)
        if want_grad:
            g_mu += ns @ Ad
            M = scatter + ns[:, None, None] * diff[:, :, None] * diff[:, None, :]
            g_cov += -0.5 * (np.einsum("k,kij->ij", ns, A) - np.sum(A @ M @ A, axis=0))
    return ll, g_mu, g_cov


def _pattern_terms(stats, mean, cov, want_grad, batch=None):
    """Log-likelihood and its gradient with respect to the moments."""
    if batch is not None:
        out = _batched_terms(batch, mean, cov, want_grad)
        if out is not None:
            return out
    return _pattern_terms_loop(stats, mean, cov, want_grad)


def pattern_loglik(data, moments: MomentStructure) -> float:
    """FIML log-likelihood of ``data`` under N(moments.mean, moments.cov)."""
    ll, _, _ = _pattern_terms(_as_stats(data), moments.mean, moments.cov, False)
    return float(ll)


def _chain(layout: ParamLayout, parts, g_mu, g_cov) -> np.ndarray:
    """Pull moment-space gradients back to the unconstrained parameters."""
    shape = layout.shape
    w, k = shape.waves, shape.indicators_per_wave
    s = layout.slices
    lam1, phi, eta, L = parts["lam1"], parts["phi"], parts["eta"], parts["L"]
    lam2 = layout.lam2
    grad = np.zeros(layout.size)

    H = lam1.T @ g_cov @ lam1
    grad[s["means"]] = lam2.T @ (lam1.T @ g_mu)
    K = lam2.T @ H @ lam2
    dL = 2.0 * K @ L
    dL[np.diag_indices(4)] *= np.diag(L)
    grad[s["chol"]] = dL[_TRIL]
    if layout.free_disturbances:
        grad[s["log_dist"]] = np.diag(H) * parts["dist"].ravel()
    if k > 1:
        dB = 2.0 * g_cov @ lam1 @ phi + np.outer(g_mu, eta)
        dlam = np.zeros((2, k))
        dtau = np.zeros((2, k))
        for c in range(2):
            for t in range(w):
                rows = slice(shape.var_index(c, t, 0), shape.var_index(c, t, 0) + k)
                dlam[c] += dB[rows, c * w + t]
                dtau[c] += g_mu[rows]
        grad[s["loadings"]] = dlam[:, 1:].ravel()
        grad[s["intercepts"]] = dtau[:, 1:].ravel()
        grad[s["log_resid"]] = np.diag(g_cov) * parts["resid"].ravel()
    return grad


def loglik_value(stats, layout: ParamLayout, x, batch=None) -> float:
    mean, cov, _ = layout.moments(x)
    return float(_pattern_terms(stats, mean, cov, False, batch)[0])


def loglik_and_gradient(stats, layout: ParamLayout, x, batch=None):
    mean, cov, parts = layout.moments(x)
    ll, g_mu, g_cov = _pattern_terms(stats, mean, cov, True, batch)
    return float(ll), _chain(layout, parts, g_mu, g_cov)


def finite_difference_gradient(stats, layout: ParamLayout, x, step: float = 1e-5, batch=None):
    """Central differences of the log-likelihood, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        hi = loglik_value(stats, layout, x + e, batch)
        lo = loglik_value(stats, layout, x - e, batch)
        out[j] = (hi - lo) / (2 * step)
    return out


def expected_information(batch: _Batch, layout: ParamLayout, x, step: float = 1e-6):
    """Fisher information of the unconstrained parameters at ``x``.

    The moment Jacobian is taken by central differences; the result only
    seeds the optimizer's inverse-Hessian approximation.
    """
    x = np.asarray(x, dtype=float)
    p = batch.p
    jm = np.empty((x.size, p))
    jc = np.empty((x.size, p, p))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        m1, c1, _ = layout.moments(x + e)
        m0, c0, _ = layout.moments(x - e)
        jm[j] = (m1 - m0) / (2 * step)
        jc[j] = (c1 - c0) / (2 * step)
    _, cov, _ = layout.moments(x)
    inverses = _pattern_inverses(batch, cov)
    if inverses is None:
        return None
    info = np.zeros((x.size, x.size))
    for (ns, _, _, _, _, _), (A, _) in zip(batch.groups, inverses):
        for n_k, A_k in zip(ns, A):
            T = A_k @ jc  # (q, p, p)
            flat = T.reshape(x.size, -1)
            flat_t = T.transpose(0, 2, 1).reshape(x.size, -1)
            info += n_k * (0.5 * flat @ flat_t.T + jm @ A_k @ jm.T)
    return 0.5 * (info + info.T)


def loglik_gradient(data, params: ParamVector, settings: OptimizerSettings | None = None) -> np.ndarray:
    """Gradient of the FIML log-likelihood in unconstrained coordinates."""
    stats = _as_stats(data)
    if settings is not None and settings.gradient == "finite-difference":
        return finite_difference_gradient(stats, params.layout, params.x, settings.fd_step)
    return loglik_and_gradient(stats, params.layout, params.x)[1]


def extract_target(params) -> float:
    """Slope-slope correlation from a ParamVector, PopulationParams or 4x4 matrix."""
    if isinstance(params, ParamVector):
        psi = params.layout.unpack(params.x)[2]
    elif isinstance(params, PopulationParams):
        psi = params.growth_cov
    else:
        psi = np.asarray(params, dtype=float)
    if psi[SLOPE_B, SLOPE_B] <= 0 or psi[SLOPE_H, SLOPE_H] <= 0:
        raise DomainError("slope variance underflowed to zero")
    return float(np.clip(slope_correlation(psi), -1.0, 1.0))


@dataclass
class EstimationResult:
    params: ParamVector
    target_estimate: float
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    pattern_count: int
    message: str = ""
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def natural(self) -> PopulationParams:
        return self.params.to_natural()


def start_values(data, layout: ParamLayout) -> ParamVector:
    """Cheap deterministic start inside the feasible region."""
    stats = _as_stats(data)
    shape = layout.shape
    p = shape.n_observed
    w, k = shape.waves, shape.indicators_per_wave
    n_obs = np.zeros(p)
    sums = np.zeros(p)
    sq = np.zeros(p)
    for st in stats:
        n_obs[st.observed] += st.n
        sums[st.observed] += st.n * st.mean
        sq[st.observed] += np.diag(st.scatter) + st.n * st.mean**2
    safe = np.maximum(n_obs, 1)
    mean = sums / safe
    var = np.maximum(sq / safe - mean**2, 1e-4)
    var[n_obs == 0] = 1.0

    t = np.asarray(shape.time_scores)
    design = np.column_stack([np.ones(w), t])
    alpha = np.zeros(4)
    lam = np.ones((2, k))
    tau = np.zeros((2, k))
    dist = np.zeros((2, w))
    resid = np.zeros((2, w, k))
    for c in range(2):
        marker = np.array([shape.var_index(c, tt, 0) for tt in range(w)])
        alpha[2 * c : 2 * c + 2] = np.linalg.lstsq(design, mean[marker], rcond=None)[0]
        frac = 0.25 if k > 1 else 0.5
        dist[c] = frac * var[marker]
        for i in range(1, k):
            cols = marker + i
            tau[c, i] = np.mean(mean[cols] - mean[marker])
        if k > 1:
            resid[c] = 0.5 * var[c * w * k : (c + 1) * w * k].reshape(w, k)
    params = PopulationParams(alpha, 0.5 * np.eye(4), dist if layout.free_disturbances else np.ones((2, w)), lam, tau, resid if k > 1 else np.zeros((2, w, 1)))
    return ParamVector.from_natural(params, layout)


def _bfgs(fg, x0, settings: OptimizerSettings, h0=None):
    """Minimize ``fg`` (returns value, gradient) by BFGS with Armijo backtracking.

    ``h0`` seeds the inverse Hessian; without it the identity is rescaled
    after the first accepted step.  Returns
    ``(x, f, g, iterations, converged, message, trace)``.
    """
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    if not np.isfinite(f):
        raise StartError("objective is not finite at the start values")
    n = x.size
    Hinv = np.eye(n) if h0 is None else np.array(h0, dtype=float)
    scaled = h0 is not None
    trace = [f]
    for it in range(1, settings.max_iterations + 1):
        p = -Hinv @ g
        slope = g @ p
        if not slope < 0:
            Hinv, scaled = np.eye(n), False
            p, slope = -g, -(g @ g)
        alpha = min(1.0, 2.0 / max(np.max(np.abs(p)), 1e-300))
        accepted = False
        for _ in range(60):
            x_new = x + alpha * p
            try:
                f_new, g_new = fg(x_new)
            except (SingularCovError, FloatingPointError, OverflowError):
                f_new = np.inf
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if scaled:
                Hinv, scaled = np.eye(n), False
                continue
            return x, f, g, it, False, "line search failed", trace
        s = x_new - x
        y = g_new - g
        rel = abs(f_new - f) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if rel < settings.loglik_tol and np.max(np.abs(g)) < settings.grad_tol:
            return x, f, g, it, True, "converged", trace
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                Hinv = np.eye(n) * (sy / (y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = (
                Hinv
                - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
            )
    return x, f, g, settings.max_iterations, False, "iteration limit", trace


def _initial_inverse_hessian(batch, layout, x, n_cases):
    info = expected_information(batch, layout, x)
    if info is None or not np.all(np.isfinite(info)):
        return None
    w, V = np.linalg.eigh(info / n_cases)
    floor = max(w.max(), 1.0) * 1e-8
    return (V / np.maximum(w, floor)) @ V.T


def fit(
    data,
    start: ParamVector | None = None,
    settings: OptimizerSettings | None = None,
    layout: ParamLayout | None = None,
) -> EstimationResult:
    """Maximize the FIML log-likelihood; non-convergence is reported, not raised.

    Convergence requires a relative log-likelihood change below
    ``loglik_tol`` and a max-norm of the per-case gradient below
    ``grad_tol``.
    """
    settings = settings or OptimizerSettings()
    stats = _as_stats(data)
    n_cases = sum(st.n for st in stats)
    if start is None:
        layout = layout or ParamLayout(ModelShape())
        start = start_values(stats, layout)
    layout = start.layout
    if stats[0].observed.max(initial=-1) >= layout.shape.n_observed:
        raise StartError("data has more columns than the model")

    batch = _Batch(stats, layout.shape.n_observed)

    if settings.gradient == "finite-difference":
        def fg(x):
            ll = loglik_value(stats, layout, x, batch)
            fd = finite_difference_gradient(stats, layout, x, settings.fd_step, batch)
            return -ll / n_cases, -fd / n_cases
    else:
        def fg(x):
            ll, grad = loglik_and_gradient(stats, layout, x, batch)
            return -ll / n_cases, -grad / n_cases

    try:
        h0 = _initial_inverse_hessian(batch, layout, start.x, n_cases)
        x, f, g, iters, converged, message, trace = _bfgs(fg, start.x, settings, h0)
    except SingularCovError as exc:
        raise StartError(f"start values give a singular covariance: {exc}") from exc
    with np.errstate(all="ignore"):
        params = ParamVector(layout, x) if np.all(np.isfinite(x)) else start
    try:
        target = extract_target(params)
    except DomainError:
        target, converged, message = float("nan"), False, "slope variance underflow"
    if converged and np.min(layout.log_variances(params.x)) < _BOUNDARY_LOGVAR:
        converged, message = False, "boundary solution (variance < 1e-6)"
    return EstimationResult(
        params=params,
        target_estimate=target,
        loglik=float(-f * n_cases),
        converged=bool(converged),
        iterations=int(iters),
        gradient_norm=float(np.max(np.abs(g))),
        pattern_count=len(stats),
        message=message,
        loglik_trace=[-v * n_cases for v in trace],
    )


class GrowthCurveFIML(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit`.

    ``X`` is either a :class:`~btba.datagen.Dataset` or a 2-D array in the
    documented variable order with ``NaN`` marking missing cells.

    Attributes set by ``fit``: ``result_``, ``params_``, ``population_``,
    ``target_estimate_``, ``loglik_``, ``converged_``, ``n_iter_``.
    """

    def __init__(
        self,
        time_scores=(0.0, 1.0, 2.0, 3.0, 4.0),
        indicators_per_wave=3,
        free_disturbances=True,
        max_iterations=500,
        loglik_tol=1e-9,
        grad_tol=1e-5,
        gradient="analytic",
        fd_step=1e-5,
    ):
        self.time_scores = time_scores
        self.indicators_per_wave = indicators_per_wave
        self.free_disturbances = free_disturbances
        self.max_iterations = max_iterations
        self.loglik_tol = loglik_tol
        self.grad_tol = grad_tol
        self.gradient = gradient
        self.fd_step = fd_step

    def _layout(self) -> ParamLayout:
        shape = ModelShape(tuple(self.time_scores), self.indicators_per_wave)
        return ParamLayout(shape, self.free_disturbances)

    def _settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            self.max_iterations, self.loglik_tol, self.grad_tol, self.fd_step, self.gradient
        )

    @staticmethod
    def _dataset(X) -> Dataset:
        return X if isinstance(X, Dataset) else Dataset.from_array(X)

    def fit(self, X, y=None, start: ParamVector | None = None):
        data = self._dataset(X)
        layout = self._layout()
        if data.values.shape[1] != layout.shape.n_observed:
            raise DomainError(
                f"expected {layout.shape.n_observed} columns, got {data.values.shape[1]}"
            )
        stats = pattern_stats(data)
        start = start if start is not None else start_values(stats, layout)
        self.result_ = fit(stats, start, self._settings())
        self.params_ = self.result_.params
        self.population_ = self.result_.natural
        self.target_estimate_ = self.result_.target_estimate
        self.loglik_ = self.result_.loglik
        self.converged_ = self.result_.converged
        self.n_iter_ = self.result_.iterations
        return self

    def moments(self) -> MomentStructure:
        return self.params_.moments()

    def score(self, X, y=None) -> float:
        """Mean per-case FIML log-likelihood at the fitted parameters."""
        data = self._dataset(X)
        return pattern_loglik(data, self.params_.moments()) / data.n
