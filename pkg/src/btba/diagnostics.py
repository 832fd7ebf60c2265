"""Bias diagnostics: relative bias, RMSE, standardized bias Z* and verdicts.

Z* centres every replication estimate on the known true value and scales it
by the RMSE over all converged replications::

    z_r = (est_r - truth) / sqrt(mean((est - truth) ** 2))

With the population variance (denominator R), ``mean(z)**2 + var(z) == 1``
holds exactly, which the test-suite uses as the primary regression check.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EmptySample, NearZeroTruth, ZeroRmse

REPORT_SCHEMA = "btba.report/1"
VERDICTS_SCHEMA = "btba.verdicts/1"

ZERO_GUARD = 1e-8
V_LOWER = 0.90
V_UPPER_TOL = 0.10
ACCEPT_M, CAUTION_M, RESEARCH_M = 0.10, 0.20, 0.30


class Verdict(str, enum.Enum):
    ACCEPT = "Accept"
    ACCEPT_WITH_CAUTION = "Accept with caution"
    RESEARCH_DEPENDENT = "Research dependent"
    REJECT = "Reject"

    def __str__(self):
        return self.value

    @property
    def severity(self) -> int:
        return list(Verdict).index(self)


@dataclass(frozen=True)
class BtbaVerdict:
    verdict: Verdict
    row: str
    m: float
    v: float

    def to_dict(self) -> dict:
        return {"verdict": self.verdict.value, "row": self.row, "m": self.m, "v": self.v}


def relative_bias(estimate_mean: float, truth: float, zero_guard: float = ZERO_GUARD) -> float:
    """``(estimate_mean - truth) / truth``; multiply the magnitude by 100 for ARB %."""
    if abs(truth) < zero_guard:
        raise NearZeroTruth(truth, zero_guard)
    return (estimate_mean - truth) / truth


def arb_percent(estimate_mean: float, truth: float, zero_guard: float = ZERO_GUARD) -> float:
    return 100.0 * abs(relative_bias(estimate_mean, truth, zero_guard))


def _as_estimates(estimates) -> np.ndarray:
    est = np.asarray(estimates, dtype=float).ravel()
    if est.size == 0:
        raise EmptySample("no estimates")
    if not np.all(np.isfinite(est)):
        raise ValueError("estimates must be finite")
    return est


def rmse(estimates, truth: float) -> float:
    est = _as_estimates(estimates)
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def zstar(estimates, truth: float) -> np.ndarray:
    est = _as_estimates(estimates)
    scale = rmse(est, truth)
    if scale == 0.0:
        raise ZeroRmse("all estimates equal the true value (exactly unbiased)")
    return (est - truth) / scale


def zstar_moments(z, variance_kind: str = "population") -> tuple[float, float]:
    z = np.asarray(z, dtype=float)
    ddof = {"population": 0, "sample": 1}[variance_kind]
    return float(np.mean(z)), float(np.var(z, ddof=ddof))


def classify(m: float, v: float, v_upper_tol: float = V_UPPER_TOL) -> BtbaVerdict:
    """Map the mean and variance of Z* to a verdict.

    Checks run in a fixed order, Reject first:

    1. Reject when ``|m| > 0.30``, ``v < 0.90`` or ``v > 1 + v_upper_tol``.
    2. Research dependent when ``0.20 < |m| <= 0.30``.
    3. Accept with caution when ``0.10 < |m| <= 0.20``.
    4. Accept otherwise (``|m| <= 0.10`` and ``0.90 <= v <= 1 + v_upper_tol``).

    Boundary values fall into the less severe band.
    """
    if v < 0:
        raise ValueError("variance must be nonnegative")
    a = abs(m)
    if a > RESEARCH_M:
        return BtbaVerdict(Verdict.REJECT, "meaningful bias", m, v)
    if v < V_LOWER or v > 1.0 + v_upper_tol:
        return BtbaVerdict(Verdict.REJECT, "unstable variance", m, v)
    if a > CAUTION_M:
        return BtbaVerdict(Verdict.RESEARCH_DEPENDENT, "moderate bias", m, v)
    if a > ACCEPT_M:
        return BtbaVerdict(Verdict.ACCEPT_WITH_CAUTION, "mild bias", m, v)
    return BtbaVerdict(Verdict.ACCEPT, "near-zero bias, stable variance", m, v)


@dataclass(frozen=True)
class EstimateSample:
    estimates: np.ndarray
    truth: float
    parameter_label: str = "slope_slope_correlation"
    condition_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "estimates", _as_estimates(self.estimates))


@dataclass
class BiasReport:
    condition_id: str
    parameter_label: str
    truth: float
    n_replications: int
    mean_estimate: float
    bias: float
    rb: float | None
    arb_percent: float | None
    rmse: float
    zstar: np.ndarray
    zstar_mean: float
    zstar_var: float
    variance_kind: str
    verdict: BtbaVerdict
    flags: list = field(default_factory=list)
    estimates: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "schema_version": REPORT_SCHEMA,
            "condition_id": self.condition_id,
            "parameter_label": self.parameter_label,
            "truth": self.truth,
            "n_replications": self.n_replications,
            "mean_estimate": self.mean_estimate,
            "bias": self.bias,
            "rb": self.rb,
            "arb_percent": self.arb_percent,
            "rmse": self.rmse,
            "zstar_mean": self.zstar_mean,
            "zstar_var": self.zstar_var,
            "variance_kind": self.variance_kind,
            "verdict": self.verdict.to_dict(),
            "flags": list(self.flags),
            "metadata": dict(self.metadata),
            "zstar": [float(z) for z in self.zstar],
            "estimates": None if self.estimates is None else [float(e) for e in self.estimates],
        }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BiasReport":
        v = d["verdict"]
        return cls(
            condition_id=d["condition_id"],
            parameter_label=d.get("parameter_label", ""),
            truth=d["truth"],
            n_replications=d["n_replications"],
            mean_estimate=d["mean_estimate"],
            bias=d["bias"],
            rb=d.get("rb"),
            arb_percent=d.get("arb_percent"),
            rmse=d["rmse"],
            zstar=np.asarray(d["zstar"], dtype=float),
            zstar_mean=d["zstar_mean"],
            zstar_var=d["zstar_var"],
            variance_kind=d["variance_kind"],
            verdict=BtbaVerdict(Verdict(v["verdict"]), v["row"], v["m"], v["v"]),
            flags=list(d.get("flags", [])),
            estimates=None if d.get("estimates") is None else np.asarray(d["estimates"], float),
            metadata=dict(d.get("metadata", {})),
        )


def summarize(
    sample: EstimateSample,
    variance_kind: str = "population",
    v_upper_tol: float = V_UPPER_TOL,
    zero_guard: float = ZERO_GUARD,
) -> BiasReport:
    est, truth = sample.estimates, float(sample.truth)
    mean_est = float(np.mean(est))
    bias = mean_est - truth
    flags = []
    try:
        rb = relative_bias(mean_est, truth, zero_guard)
        arb = 100.0 * abs(rb)
    except NearZeroTruth:
        rb = arb = None
        flags.append("near-zero truth: relative bias undefined")
    err = rmse(est, truth)
    try:
        z = zstar(est, truth)
        m, v = zstar_moments(z, variance_kind)
        verdict = classify(m, v, v_upper_tol)
    except ZeroRmse:
        z = np.zeros_like(est)
        m, v = 0.0, 0.0
        verdict = BtbaVerdict(Verdict.ACCEPT, "exactly unbiased", m, v)
        flags.append("exactly unbiased: every estimate equals the truth")
    if 1.0 < v <= 1.0 + v_upper_tol:
        flags.append("above-unit variance")
    if est.size < 2:
        flags.append("fewer than two converged replications")
    return BiasReport(
        condition_id=sample.condition_id,
        parameter_label=sample.parameter_label,
        truth=truth,
        n_replications=int(est.size),
        mean_estimate=mean_est,
        bias=bias,
        rb=rb,
        arb_percent=arb,
        rmse=err,
        zstar=z,
        zstar_mean=m,
        zstar_var=v,
        variance_kind=variance_kind,
        verdict=verdict,
        flags=flags,
        estimates=est,
        metadata=dict(sample.metadata),
    )


class ZStarTransformer(TransformerMixin, BaseEstimator):
    """Standardize estimates against a known truth using the fitted RMSE.

    >>> ZStarTransformer(truth=0.3).fit_transform([0.2, 0.4]).ravel()
    array([-1.,  1.])
    """

    def __init__(self, truth=0.0, variance_kind="population"):
        self.truth = truth
        self.variance_kind = variance_kind

    def fit(self, X, y=None):
        self.rmse_ = rmse(X, self.truth)
        if self.rmse_ == 0.0:
            raise ZeroRmse("all estimates equal the true value (exactly unbiased)")
        z = (np.asarray(X, dtype=float).ravel() - self.truth) / self.rmse_
        self.mean_, self.var_ = zstar_moments(z, self.variance_kind)
        self.verdict_ = classify(self.mean_, self.var_)
        return self

    def transform(self, X):
        check_is_fitted(self, "rmse_")
        X = np.asarray(X, dtype=float)
        return ((X - self.truth) / self.rmse_).reshape(-1, 1)


# -- file formats -------------------------------------------------------------


def _data_rows(path):
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "y"):
        return True
    if t in ("0", "false", "f", "no", "n", ""):
        return False
    raise ValueError(f"cannot parse boolean {text!r}")


def read_estimates(estimates_csv, truths_csv) -> list[EstimateSample]:
    """Load external estimates into one :class:`EstimateSample` per condition.

    Non-converged rows are dropped; conditions keep first-appearance order.
    """
    truths = {r["condition_id"]: float(r["truth"]) for r in _data_rows(truths_csv)}
    by_cond: dict[str, list[tuple[int, float]]] = {}
    for r in _data_rows(estimates_csv):
        cid = r["condition_id"]
        by_cond.setdefault(cid, [])
        if _parse_bool(r["converged"]):
            by_cond[cid].append((int(r["replication_id"]), float(r["estimate"])))
    missing = [c for c in by_cond if c not in truths]
    if missing:
        raise KeyError(f"no truth for conditions: {missing}")
    out = []
    for cid, rows in by_cond.items():
        rows.sort()
        if not rows:
            raise EmptySample(f"condition {cid!r} has no converged replications")
        out.append(EstimateSample(np.array([e for _, e in rows]), truths[cid], condition_id=cid))
    return out


def _safe_name(cid: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in cid) or "condition"


def write_report_json(report: BiasReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n")
    return path


def read_report_json(path) -> BiasReport:
    return BiasReport.from_dict(json.loads(Path(path).read_text()))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_verdicts_csv(reports, path) -> Path:
    """Flat verdict table, one row per condition."""
    path = Path(path)
    cols = [
        "condition_id", "n_replications", "truth", "mean_estimate", "bias", "rb",
        "arb_percent", "rmse", "zstar_mean", "zstar_var", "variance_kind", "verdict",
    ]
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {VERDICTS_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            w.writerow([
                r.condition_id, r.n_replications, _fmt(r.truth), _fmt(r.mean_estimate),
                _fmt(r.bias), _fmt(r.rb), _fmt(r.arb_percent), _fmt(r.rmse),
                _fmt(r.zstar_mean), _fmt(r.zstar_var), r.variance_kind, r.verdict.verdict.value,
            ])
    return path


def diagnose(estimates_csv, truths_csv, out_dir, variance_kind: str = "population") -> list[BiasReport]:
    """Evaluate externally produced estimates and write JSON + CSV outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = [summarize(s, variance_kind) for s in read_estimates(estimates_csv, truths_csv)]
    for r in reports:
        write_report_json(r, out / f"report_{_safe_name(r.condition_id)}.json")
    write_verdicts_csv(reports, out / "verdicts.csv")
    return reports


def report_summary(report: BiasReport) -> dict:
    """Scalar fields only (no per-replication vectors)."""
    d = report.to_dict()
    d.pop("zstar")
    d.pop("estimates")
    return d


__all__ = [
    "Verdict", "BtbaVerdict", "EstimateSample", "BiasReport", "ZStarTransformer",
    "relative_bias", "arb_percent", "rmse", "zstar", "zstar_moments", "classify",
    "summarize", "read_estimates", "diagnose", "write_report_json", "read_report_json",
    "write_verdicts_csv", "report_summary",
]
