"""Condition grid execution, persistence and verdict tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import PROFILES, SimulationConfig
from .datagen import RNG_METHOD, SeedPlan, sample_mvn
from .diagnostics import (
    BiasReport,
    EstimateSample,
    Verdict,
    read_report_json,
    summarize,
    write_report_json,
)
from .errors import BTBAError, EmptySample, MissingCell
from .estimator import OptimizerSettings, ParamLayout, fit
from .missingness import MissingDesign, apply_design, swmd6
from .model import ModelShape, PopulationParams, implied_moments, set_slope_correlation

log = logging.getLogger(__name__)

RECORDS_SCHEMA = "btba.records/1"
MANIFEST_SCHEMA = "btba.manifest/1"
TABLE_SCHEMA = "btba.verdict_table/1"
NEAR_UNIT = 0.999
N_GROUPS = 6


@dataclass(frozen=True)
class ConditionSpec:
    rho: float
    n_per_group: int
    data_condition: str
    replications: int
    population: PopulationParams
    shape: ModelShape = field(default_factory=ModelShape)
    design: MissingDesign = field(default_factory=swmd6)
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)
    seed_index: int = 0

    @property
    def condition_id(self) -> str:
        return f"{self.data_condition}_rho{self.rho:g}_n{self.n_per_group}"

    @property
    def label(self) -> str:
        return f"n={self.n_per_group} {self.data_condition}"

    def metadata(self) -> dict:
        return {
            "rho": self.rho,
            "n_per_group": self.n_per_group,
            "n_total": N_GROUPS * self.n_per_group,
            "data_condition": self.data_condition,
            "replications": self.replications,
            "seed_index": self.seed_index,
        }


@dataclass
class ReplicationRecord:
    condition_id: str
    replication_id: int
    base_seed: int
    seed_condition_index: int
    seed_replication_index: int
    converged: bool
    estimate: float
    loglik: float
    iterations: int
    gradient_norm: float
    reason: str
    wall_time_ms: int = 0


RECORD_COLUMNS = [f.name for f in fields(ReplicationRecord)]
_TIMING_COLUMNS = {"wall_time_ms"}


def grid_specs(config: SimulationConfig, replications: int) -> list[ConditionSpec]:
    """Enumerate conditions in a fixed order.

    Paired Complete/SWMD6_FIML cells share a seed index so they analyse the
    same generated datasets.
    """
    specs = []
    cells = [(rho, n) for rho in config.rhos for n in config.n_per_group]
    for dc in config.data_conditions:
        for idx, (rho, n) in enumerate(cells):
            specs.append(
                ConditionSpec(
                    rho=rho,
                    n_per_group=n,
                    data_condition=dc,
                    replications=replications,
                    population=config.population,
                    shape=config.shape,
                    design=config.design,
                    settings=config.settings,
                    seed_index=idx,
                )
            )
    return specs


def _one_replication(spec: ConditionSpec, moments, layout, base_seed: int, r: int) -> ReplicationRecord:
    seed = SeedPlan(base_seed, spec.seed_index, r)
    t0 = time.perf_counter()
    estimate = loglik = gnorm = float("nan")
    iterations = 0
    try:
        data = sample_mvn(moments, N_GROUPS * spec.n_per_group, seed, N_GROUPS, spec.condition_id)
        if spec.data_condition == "SWMD6_FIML":
            data = apply_design(data, spec.design, spec.shape)
        res = fit(data, settings=spec.settings, layout=layout)
        estimate, loglik, gnorm, iterations = res.target_estimate, res.loglik, res.gradient_norm, res.iterations
        converged, reason = res.converged, res.message
        if converged and abs(estimate) >= NEAR_UNIT:
            converged, reason = False, "near-unit correlation"
    except (BTBAError, np.linalg.LinAlgError, FloatingPointError) as exc:
        converged, reason = False, f"error: {type(exc).__name__}"
    wall = int(round((time.perf_counter() - t0) * 1000))
    return ReplicationRecord(
        spec.condition_id, r, base_seed, spec.seed_index, r, bool(converged),
        float(estimate), float(loglik), int(iterations), float(gnorm), reason, wall,
    )


def _run_chunk(spec: ConditionSpec, base_seed: int, reps: list[int]) -> list[ReplicationRecord]:
    params = set_slope_correlation(spec.population, spec.rho)
    moments = implied_moments(params, spec.shape)
    layout = ParamLayout(spec.shape)
    return [_one_replication(spec, moments, layout, base_seed, r) for r in reps]


def run_condition(spec: ConditionSpec, base_seed: int, jobs: int = 1, executor=None) -> list[ReplicationRecord]:
    """Run every replication of one condition; order of execution is irrelevant."""
    reps = list(range(spec.replications))
    if not reps:
        return []
    if jobs <= 1 and executor is None:
        records = _run_chunk(spec, base_seed, reps)
    else:
        chunks = [c.tolist() for c in np.array_split(reps, max(1, min(len(reps), 4 * max(jobs, 1))))]
        own = executor is None
        pool = executor or ProcessPoolExecutor(max_workers=jobs)
        try:
            futures = [pool.submit(_run_chunk, spec, base_seed, c) for c in chunks if c]
            records = [rec for f in futures for rec in f.result()]
        finally:
            if own:
                pool.shutdown()
    records.sort(key=lambda r: r.replication_id)
    return records


# -- record files ---------------------------------------------------------------


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records, include_timing: bool = True) -> str:
    cols = [c for c in RECORD_COLUMNS if include_timing or c not in _TIMING_COLUMNS]
    buf = io.StringIO()
    buf.write(f"# schema: {RECORDS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in records:
        w.writerow([_cell(getattr(rec, c)) for c in cols])
    return buf.getvalue()


def records_digest(records) -> str:
    """SHA-256 of the record table without timing columns."""
    return hashlib.sha256(records_to_csv(records, include_timing=False).encode()).hexdigest()


def write_records(records, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(records_to_csv(records))
    os.replace(tmp, path)
    return path


def read_records(path) -> list[ReplicationRecord]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append(
            ReplicationRecord(
                condition_id=row["condition_id"],
                replication_id=int(row["replication_id"]),
                base_seed=int(row["base_seed"]),
                seed_condition_index=int(row["seed_condition_index"]),
                seed_replication_index=int(row["seed_replication_index"]),
                converged=row["converged"] == "true",
                estimate=float(row["estimate"]),
                loglik=float(row["loglik"]),
                iterations=int(row["iterations"]),
                gradient_norm=float(row["gradient_norm"]),
                reason=row["reason"],
                wall_time_ms=int(row.get("wall_time_ms") or 0),
            )
        )
    return out


def condition_report(spec: ConditionSpec, records, variance_kind: str = "population") -> BiasReport:
    """BiasReport over the converged replications of one condition."""
    ok = [r.estimate for r in records if r.converged]
    reasons: dict[str, int] = {}
    for r in records:
        if not r.converged:
            reasons[r.reason] = reasons.get(r.reason, 0) + 1
    meta = spec.metadata()
    meta.update(
        label=spec.label,
        attempted=len(records),
        nonconverged=len(records) - len(ok),
        nonconvergence_reasons=dict(sorted(reasons.items())),
    )
    sample = EstimateSample(np.array(ok), spec.rho, condition_id=spec.condition_id, metadata=meta)
    return summarize(sample, variance_kind)


# -- grid runs ----------------------------------------------------------------------


def _write_json(path: Path, payload) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_grid(
    specs: list[ConditionSpec],
    base_seed: int,
    out_dir,
    jobs: int = 1,
    config_digest: str = "",
    figures: bool = True,
) -> Path:
    """Execute all conditions and write records, reports, tables and figures.

    A manifest records a digest per finished condition; rerunning into the
    same directory reuses intact record files and recomputes the rest.
    """
    from .plots import boxplot_reports, ridgeline_estimates, ridgeline_zstar, write_svg

    out = Path(out_dir)
    for sub in ("records", "reports", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "tool_version": __version__,
        "base_seed": int(base_seed),
        "config_hash": config_digest,
        "rng": RNG_METHOD,
        "conditions": {},
    }
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
            if old.get("base_seed") == manifest["base_seed"] and old.get("config_hash") == config_digest:
                manifest["conditions"] = old.get("conditions", {})
        except (json.JSONDecodeError, OSError):
            log.warning("ignoring unreadable manifest %s", manifest_path)

    executor = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    reports = []
    try:
        for spec in specs:
            cid = spec.condition_id
            rec_path = out / "records" / f"{cid}.csv"
            entry = manifest["conditions"].get(cid)
            records = None
            if entry and rec_path.exists():
                try:
                    cached = read_records(rec_path)
                    if records_digest(cached) == entry.get("records_digest") and len(cached) == spec.replications:
                        records = cached
                except (ValueError, KeyError):
                    records = None
            if records is None:
                log.info("running %s (%d replications)", cid, spec.replications)
                records = run_condition(spec, base_seed, jobs, executor)
                write_records(records, rec_path)
            entry = {
                "records": f"records/{cid}.csv",
                "records_digest": records_digest(records),
                "replications": spec.replications,
                "converged": sum(r.converged for r in records),
            }
            try:
                report = condition_report(spec, records)
            except EmptySample:
                log.warning("%s: no converged replications, cell left empty", cid)
            else:
                write_report_json(report, out / "reports" / f"{cid}.json")
                reports.append(report)
                entry["report"] = f"reports/{cid}.json"
            manifest["conditions"][cid] = entry
            _write_json(manifest_path, manifest)
    finally:
        if executor is not None:
            executor.shutdown()

    table = verdict_table(
        reports,
        n_values=[s.n_per_group for s in specs],
        rhos=[s.rho for s in specs],
        data_conditions=list(dict.fromkeys(s.data_condition for s in specs)),
    )
    (out / "verdict_table.csv").write_text(table.to_csv())
    (out / "verdict_table.txt").write_text(table.to_text())
    if figures:
        for dc in sorted({r.metadata["data_condition"] for r in reports}):
            subset = [r for r in reports if r.metadata["data_condition"] == dc and r.n_replications >= 2]
            if not subset:
                continue
            write_svg(ridgeline_estimates(subset), out / "figures" / f"ridgeline_estimates_{dc}.svg")
            write_svg(ridgeline_zstar(subset), out / "figures" / f"ridgeline_zstar_{dc}.svg")
            write_svg(boxplot_reports(subset), out / "figures" / f"boxplot_{dc}.svg")
    return out


def simulate(config: SimulationConfig, base_seed: int, out_dir, profile: str = "ci", jobs: int = 1,
             replications: int | None = None) -> Path:
    reps = replications or config.replications or PROFILES[profile]
    specs = grid_specs(config, reps)
    digest = hashlib.sha256(f"{config.digest()}:{reps}".encode()).hexdigest()
    return run_grid(specs, base_seed, out_dir, jobs, digest)


# -- verdict tables -------------------------------------------------------------------

_SHORT = {"Complete": "Complete", "SWMD6_FIML": "FIML"}


@dataclass
class VerdictTable:
    n_values: list
    columns: list  # (data_condition, rho)
    cells: dict  # (n, data_condition, rho) -> Verdict | None
    missing: list = field(default_factory=list)

    def header(self) -> list[str]:
        return ["n_per_group"] + [f"{_SHORT.get(dc, dc)} (rho={rho:g})" for dc, rho in self.columns]

    def rows(self) -> list[list[str]]:
        out = []
        for n in self.n_values:
            row = [str(n)]
            for dc, rho in self.columns:
                v = self.cells.get((n, dc, rho))
                row.append(v.value if v is not None else "MISSING")
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TABLE_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        table = [self.header()] + self.rows()
        widths = [max(len(r[j]) for r in table) for j in range(len(table[0]))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in table]
        if self.missing:
            lines.append("")
            lines += [f"missing cell: n={n} {dc} rho={rho:g}" for n, dc, rho in self.missing]
        return "\n".join(lines) + "\n"


def verdict_table(reports, n_values=None, rhos=None, data_conditions=None, strict: bool = False) -> VerdictTable:
    """Grid of verdicts keyed by (n_per_group, data_condition, rho).

    Cells without a report are listed in ``missing``; ``strict`` raises
    :class:`MissingCell` instead.
    """
    cells = {}
    for r in reports:
        m = r.metadata
        cells[(int(m["n_per_group"]), m["data_condition"], float(m["rho"]))] = Verdict(r.verdict.verdict)
    n_values = sorted(set(n_values or {k[0] for k in cells}), reverse=True)
    rhos = sorted(set(rhos or {k[2] for k in cells}))
    present = {k[1] for k in cells}
    data_conditions = list(data_conditions or [dc for dc in ("Complete", "SWMD6_FIML") if dc in present]
                           + sorted(present - {"Complete", "SWMD6_FIML"}))
    columns = [(dc, rho) for dc in data_conditions for rho in rhos]
    missing = [(n, dc, rho) for n in n_values for dc, rho in columns if (n, dc, rho) not in cells]
    if strict and missing:
        raise MissingCell(f"no report for cells {missing}")
    return VerdictTable(n_values, columns, cells, missing)


def load_reports(report_dir) -> list[BiasReport]:
    d = Path(report_dir)
    if (d / "reports").is_dir():
        d = d / "reports"
    return [read_report_json(p) for p in sorted(d.glob("*.json"))]
