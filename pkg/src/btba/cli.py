"""Command-line entry point: ``btba simulate | diagnose | plot | verdict``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import PROFILES, load_config
from .diagnostics import diagnose, write_verdicts_csv
from .errors import BTBAError
from .orchestration import load_reports, simulate, verdict_table
from .plots import boxplot_reports, ridgeline_estimates, ridgeline_zstar, write_svg

PLOT_KINDS = {
    "ridgeline-est": ridgeline_estimates,
    "ridgeline-zstar": ridgeline_zstar,
    "boxplot": boxplot_reports,
}


def _seed(arg: int | None) -> int:
    env = os.environ.get("BTBA_SEED")
    if env is not None:
        return int(env)
    return 20240101 if arg is None else arg


def _cmd_simulate(a) -> int:
    cfg = load_config(a.config)
    out = simulate(cfg, _seed(a.seed), a.out, a.profile, a.jobs, a.replications)
    print((out / "verdict_table.txt").read_text(), end="")
    print(f"outputs written to {out}")
    return 0


def _cmd_diagnose(a) -> int:
    reports = diagnose(a.estimates, a.truths, a.out, a.variance)
    for r in reports:
        print(f"{r.condition_id}: M={r.zstar_mean:.4f} V={r.zstar_var:.4f} -> {r.verdict.verdict.value}")
    return 0


def _cmd_plot(a) -> int:
    reports = load_reports(a.reports)
    if not reports:
        print(f"no reports found under {a.reports}", file=sys.stderr)
        return 2
    if a.data_condition:
        reports = [r for r in reports if r.metadata.get("data_condition") == a.data_condition]
    write_svg(PLOT_KINDS[a.kind](reports), a.out)
    print(f"wrote {a.out}")
    return 0


def _cmd_verdict(a) -> int:
    reports = load_reports(a.reports)
    table = verdict_table(reports, strict=a.strict)
    print(table.to_text(), end="")
    if a.csv:
        Path(a.csv).write_text(table.to_csv())
    if a.flat:
        write_verdicts_csv(reports, a.flat)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="btba", description="Z*-based bias acceptance simulations and diagnostics")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the condition grid")
    s.add_argument("--config", help="TOML config (defaults to the shipped one)")
    s.add_argument("--seed", type=int, help="base seed; BTBA_SEED overrides")
    s.add_argument("--profile", choices=sorted(PROFILES), default="ci")
    s.add_argument("--replications", type=int, help="override the profile's replication count")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)

    d = sub.add_parser("diagnose", help="evaluate externally produced estimates")
    d.add_argument("--estimates", required=True)
    d.add_argument("--truths", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--variance", choices=["population", "sample"], default="population")
    d.set_defaults(func=_cmd_diagnose)

    pl = sub.add_parser("plot", help="render a figure from saved reports")
    pl.add_argument("--reports", required=True, help="run directory or reports/ directory")
    pl.add_argument("--kind", choices=sorted(PLOT_KINDS), required=True)
    pl.add_argument("--data-condition", help="restrict to one data condition")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plot)

    v = sub.add_parser("verdict", help="print the verdict table of saved reports")
    v.add_argument("--reports", required=True)
    v.add_argument("--csv", help="also write the grid table here")
    v.add_argument("--flat", help="also write one row per condition here")
    v.add_argument("--strict", action="store_true", help="fail on missing cells")
    v.set_defaults(func=_cmd_verdict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BTBAError, OSError, KeyError, ValueError) as exc:
        print(f"btba: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
