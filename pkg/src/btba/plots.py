"""Self-contained SVG ridgeline and boxplot renderings.

Output is byte-deterministic: coordinates use fixed formatting and nothing
time-dependent is written.  Numeric annotations carry their value in a
``data-value`` attribute so they can be checked programmatically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .errors import DegenerateSample, LayoutError

SVG_NS = "http://www.w3.org/2000/svg"


@dataclass(frozen=True)
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n: int

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def mode(self) -> float:
        return float(self.grid[int(np.argmax(self.density))])


def silverman_bandwidth(x) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n ** -0.2``; falls back to sd when IQR is 0."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** -0.2


def kde(sample, bandwidth_rule="silverman", grid_size: int = 512) -> DensityCurve:
    """Gaussian kernel density on an evenly spaced grid.

    ``bandwidth_rule`` is ``"silverman"`` or a positive number used as-is.
    The grid spans three bandwidths beyond the sample range.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < 2 or not np.all(np.isfinite(x)):
        raise DegenerateSample("need at least two finite values")
    if np.std(x) == 0:
        raise DegenerateSample("sample has zero spread")
    bw = silverman_bandwidth(x) if bandwidth_rule == "silverman" else float(bandwidth_rule)
    if not bw > 0:
        raise DegenerateSample("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, grid_size)
    dens = np.zeros(grid_size)
    for chunk in np.array_split(x, max(1, x.size // 2048)):
        u = (grid[:, None] - chunk[None, :]) / bw
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * bw * np.sqrt(2 * np.pi)
    return DensityCurve(grid, dens, bw, int(x.size))


@dataclass(frozen=True)
class PanelLayout:
    width: float = 320.0
    row_height: float = 34.0
    overlap: float = 1.6
    margin_left: float = 150.0
    margin_top: float = 40.0
    margin_bottom: float = 40.0
    grid_size: int = 512
    bandwidth_rule: object = "silverman"
    decimals: int = 3
    whisker: float = 1.5
    facet_by: str | None = "rho"
    variance_kind: str = "population"
    show_mode: bool = False


@dataclass
class Series:
    """One row of a panel: a labelled sample plus its ordering metadata."""

    label: str
    values: np.ndarray
    truth: float
    facet: str = ""
    order: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()


@dataclass
class RidgeRow:
    label: str
    curve: DensityCurve | None  # None for degenerate samples
    mean: float
    variance: float
    sd: float
    mode: float | None = None

    @property
    def spike_at(self) -> float | None:
        return self.mean if self.curve is None else None


@dataclass
class RidgePanel:
    title: str
    rows: list
    reference_lines: list = field(default_factory=list)  # (x, style, caption)
    x_range: tuple = (0.0, 1.0)

    def annotations(self, decimals: int = 3) -> list[tuple[str, str, str]]:
        fmt = f"{{:.{decimals}f}}"
        return [(r.label, "M: " + fmt.format(r.mean), "V: " + fmt.format(r.variance)) for r in self.rows]


def _ddof(kind: str) -> int:
    return {"population": 0, "sample": 1}[kind]


def build_row(label: str, values, layout: PanelLayout) -> RidgeRow:
    v = np.asarray(values, dtype=float)
    mean = float(np.mean(v))
    var = float(np.var(v, ddof=_ddof(layout.variance_kind))) if v.size > 1 else 0.0
    try:
        curve = kde(v, layout.bandwidth_rule, layout.grid_size)
    except DegenerateSample:
        curve = None
    mode = curve.mode() if (curve is not None and layout.show_mode) else None
    return RidgeRow(label, curve, mean, var, float(np.sqrt(var)), mode)


def _facets(series: list[Series], layout: PanelLayout) -> list[tuple[str, list[Series]]]:
    if not series:
        raise LayoutError("no conditions to plot")
    groups: dict[str, list[Series]] = {}
    for s in series:
        key = s.facet if layout.facet_by else ""
        groups.setdefault(key, []).append(s)
    out = []
    for key in sorted(groups, key=_facet_sort_key):
        rows = sorted(groups[key], key=lambda s: (-s.order, s.label))
        labels = [s.label for s in rows]
        if len(set(labels)) != len(labels):
            raise LayoutError(f"duplicate row labels in facet {key!r}")
        out.append((key, rows))
    return out


def _facet_sort_key(key: str):
    try:
        return (0, float(key.split("=")[-1]), key)
    except ValueError:
        return (1, 0.0, key)


def build_panels(series: list[Series], layout: PanelLayout, zstar: bool = False) -> list[RidgePanel]:
    panels = []
    for key, rows in _facets(series, layout):
        ridge_rows = [build_row(s.label, s.values, layout) for s in rows]
        lo = min(float(np.min(s.values)) for s in rows)
        hi = max(float(np.max(s.values)) for s in rows)
        for r in ridge_rows:
            if r.curve is not None:
                lo, hi = min(lo, r.curve.grid[0]), max(hi, r.curve.grid[-1])
        if zstar:
            refs = [(0.0, "dotted", "ideal Z* = 0"), (-0.1, "dashed", "-0.1"), (0.1, "dashed", "+0.1")]
        else:
            truths = sorted({float(s.truth) for s in rows})
            if len(truths) != 1:
                raise LayoutError(f"facet {key!r} mixes population values {truths}")
            refs = [(truths[0], "solid", "population value")]
        for x, _, _ in refs:
            lo, hi = min(lo, x), max(hi, x)
        pad = 0.04 * (hi - lo if hi > lo else 1.0)
        panels.append(RidgePanel(key, ridge_rows, refs, (lo - pad, hi + pad)))
    return panels


# -- SVG writing ----------------------------------------------------------------


def _n(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


class _Svg:
    def __init__(self):
        self.parts: list[str] = []

    def add(self, tag: str, text: str | None = None, **attrs):
        items = []
        for k, v in attrs.items():
            if v is None:
                continue
            name = k.rstrip("_").replace("__", ":").replace("_", "-")
            val = _n(v) if isinstance(v, float) else str(v)
            items.append(f"{name}={quoteattr(val)}")
        head = f"<{tag} " + " ".join(items) if items else f"<{tag}"
        if text is None:
            self.parts.append(head + "/>")
        else:
            self.parts.append(f"{head}>{escape(text)}</{tag}>")

    def open(self, tag: str, **attrs):
        self.add(tag, **attrs)
        self.parts[-1] = self.parts[-1][:-2] + ">"

    def close(self, tag: str):
        self.parts.append(f"</{tag}>")

    def document(self, width: float, height: float, title: str) -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'
            f'<svg xmlns="{SVG_NS}" version="1.1" width="{_n(width)}" height="{_n(height)}" '
            f'viewBox="0 0 {_n(width)} {_n(height)}" font-family="sans-serif" font-size="11">\n'
            f"<title>{escape(title)}</title>\n"
        )
        return head + "\n".join(self.parts) + "\n</svg>\n"


_DASH = {"solid": None, "dashed": "5,3", "dotted": "1,3"}


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    raw = (hi - lo) / max(n, 1)
    mag = 10 ** np.floor(np.log10(raw)) if raw > 0 else 1.0
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 1e-12, step)


def _render_ridge(svg: _Svg, panel: RidgePanel, layout: PanelLayout, x0: float, kind: str):
    lo, hi = panel.x_range
    width = layout.width
    top = layout.margin_top
    n_rows = len(panel.rows)
    h = layout.row_height
    bottom = top + h * n_rows + h * 0.6
    fmt = f"{{:.{layout.decimals}f}}"

    def sx(v):
        return x0 + (v - lo) / (hi - lo) * width

    svg.open("g", class_="facet", data_facet=panel.title)
    svg.add("text", panel.title or kind, x=x0 + width / 2, y=top - 22.0, text_anchor="middle", font_weight="bold")
    peak = max((float(r.curve.density.max()) for r in panel.rows if r.curve is not None), default=1.0)
    for i, row in enumerate(panel.rows):
        base = top + h * (i + 1)
        svg.open("g", class_="ridge", data_row=row.label)
        if row.curve is not None:
            scale = layout.overlap * h / peak
            pts = [f"{_n(sx(float(gx)))},{_n(base - float(d) * scale)}" for gx, d in zip(row.curve.grid, row.curve.density)]
            path = f"M{_n(sx(float(row.curve.grid[0])))},{_n(base)} L" + " L".join(pts) + f" L{_n(sx(float(row.curve.grid[-1])))},{_n(base)} Z"
            svg.add("path", d=path, fill="#9ecae1", fill_opacity="0.6", stroke="#08519c", stroke_width="1", class_="density", data_bandwidth=repr(row.curve.bandwidth))
        else:
            svg.add("line", x1=sx(row.mean), x2=sx(row.mean), y1=base, y2=base - layout.overlap * h, stroke="#08519c", stroke_width="2", class_="spike")
        svg.add("line", x1=sx(row.mean - row.sd), x2=sx(row.mean + row.sd), y1=base + 4.0, y2=base + 4.0, stroke="black", stroke_width="1.5", class_="sd-bar")
        svg.add("circle", cx=sx(row.mean), cy=base + 4.0, r="2.5", fill="black", class_="mean-dot")
        if row.mode is not None:
            svg.add("text", "Mo: " + fmt.format(row.mode), x=x0 + width + 6.0, y=base + 9.0, class_="annot-mode", data_value=repr(row.mode))
        svg.add("text", row.label, x=x0 - 6.0, y=base, text_anchor="end", class_="row-label")
        svg.add("text", "M: " + fmt.format(row.mean), x=x0 + width + 6.0, y=base - 10.0, class_="annot-m", data_value=repr(row.mean))
        svg.add("text", "V: " + fmt.format(row.variance), x=x0 + width + 6.0, y=base, class_="annot-v", data_value=repr(row.variance))
        svg.close("g")
    for x, style, caption in panel.reference_lines:
        svg.add("line", x1=sx(x), x2=sx(x), y1=top - 10.0, y2=bottom, stroke="black", stroke_width="1", stroke_dasharray=_DASH[style], class_=f"ref-{style}", data_value=repr(float(x)))
    svg.add("line", x1=x0, x2=x0 + width, y1=bottom, y2=bottom, stroke="black", class_="axis")
    for t in _ticks(lo, hi):
        svg.add("line", x1=sx(float(t)), x2=sx(float(t)), y1=bottom, y2=bottom + 4.0, stroke="black")
        svg.add("text", f"{t:.2f}", x=sx(float(t)), y=bottom + 15.0, text_anchor="middle")
    svg.add("text", kind, x=x0 + width / 2, y=bottom + 30.0, text_anchor="middle")
    svg.close("g")
    return bottom + layout.margin_bottom


def render_ridgeline(panels: list[RidgePanel], layout: PanelLayout, title: str, x_label: str) -> str:
    svg = _Svg()
    col = layout.margin_left + layout.width + 90.0
    height = 0.0
    for j, panel in enumerate(panels):
        height = max(height, _render_ridge(svg, panel, layout, layout.margin_left + j * col, x_label))
    return svg.document(col * len(panels) + 20.0, height, title)


def _series_from_reports(reports, zstar: bool) -> list[Series]:
    out = []
    for r in reports:
        meta = getattr(r, "metadata", {}) or {}
        if zstar:
            values = np.asarray(r.zstar, dtype=float)
        else:
            if r.estimates is None:
                raise LayoutError(f"report {r.condition_id!r} carries no estimates")
            values = np.asarray(r.estimates, dtype=float)
        facet = f"rho={meta['rho']}" if "rho" in meta else ""
        if "data_condition" in meta and facet:
            facet = f"{meta['data_condition']} {facet}"
        label = meta.get("label") or r.condition_id
        out.append(Series(label, values, r.truth, facet, float(meta.get("n_per_group", 0))))
    return out


def _with_facet(series: list[Series], layout: PanelLayout, reports) -> list[Series]:
    if layout.facet_by == "data_condition":
        for s, r in zip(series, reports):
            meta = getattr(r, "metadata", {}) or {}
            s.facet = str(meta.get("data_condition", ""))
            s.label = f"{s.label} rho={meta.get('rho', '')}"
    elif layout.facet_by == "rho":
        for s, r in zip(series, reports):
            meta = getattr(r, "metadata", {}) or {}
            if "rho" in meta:
                s.facet = f"rho={meta['rho']}"
                if "data_condition" in meta and "label" not in meta:
                    s.label = f"n={meta.get('n_per_group')} {meta['data_condition']}"
    return series


def estimate_panels(reports, layout: PanelLayout = PanelLayout()) -> list[RidgePanel]:
    series = _with_facet(_series_from_reports(reports, False), layout, reports)
    return build_panels(series, layout)


def zstar_panels(reports, layout: PanelLayout = PanelLayout()) -> list[RidgePanel]:
    series = _with_facet(_series_from_reports(reports, True), layout, reports)
    return build_panels(series, layout, zstar=True)


def ridgeline_estimates(reports, layout: PanelLayout = PanelLayout()) -> str:
    """Ridgeline of replication estimates with the population value marked."""
    return render_ridgeline(estimate_panels(reports, layout), layout, "Ridgeline plot of estimates", "estimate")


def ridgeline_zstar(reports, layout: PanelLayout = PanelLayout()) -> str:
    """Ridgeline of Z* with the ideal line at 0 and the +/-0.1 acceptance band."""
    return render_ridgeline(zstar_panels(reports, layout), layout, "Ridgeline plot of Z*", "Z*")


# -- boxplots -----------------------------------------------------------------------


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    mean: float
    outliers: tuple


def box_stats(sample, whisker: float = 1.5) -> BoxStats:
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise DegenerateSample("empty sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo = max(q1 - whisker * iqr, float(x.min()))
    hi = min(q3 + whisker * iqr, float(x.max()))
    outliers = tuple(float(v) for v in np.sort(x[(x < lo) | (x > hi)]))
    return BoxStats(float(med), float(q1), float(q3), float(lo), float(hi), float(np.mean(x)), outliers)


def boxplot_panel(samples, truth: float, labels=None, layout: PanelLayout = PanelLayout(), title: str = "") -> str:
    """Boxplots with a sideways density per group and a dashed truth line."""
    samples = [np.asarray(s, dtype=float).ravel() for s in samples]
    if not samples:
        raise LayoutError("no samples to plot")
    labels = list(labels) if labels is not None else [f"group {i + 1}" for i in range(len(samples))]
    if len(set(labels)) != len(labels):
        raise LayoutError("duplicate labels")
    svg = _Svg()
    _render_boxes(svg, samples, labels, float(truth), layout, 0.0, title)
    slot = 90.0
    return svg.document(layout.margin_left + slot * len(samples) + 40.0, 320.0, title or "Boxplots")


def _render_boxes(svg, samples, labels, truth, layout, y_off, title):
    stats = [box_stats(s, layout.whisker) for s in samples]
    curves = []
    for s in samples:
        try:
            curves.append(kde(s, layout.bandwidth_rule, layout.grid_size))
        except DegenerateSample:
            curves.append(None)
    lo = min([truth] + [float(s.min()) for s in samples])
    hi = max([truth] + [float(s.max()) for s in samples])
    pad = 0.05 * (hi - lo if hi > lo else 1.0)
    lo, hi = lo - pad, hi + pad
    top, height = y_off + 40.0, 230.0
    slot = 90.0
    x0 = layout.margin_left
    fmt = f"{{:.{layout.decimals}f}}"

    def sy(v):
        return top + height - (v - lo) / (hi - lo) * height

    svg.open("g", class_="box-panel", data_facet=title)
    if title:
        svg.add("text", title, x=x0 + slot * len(samples) / 2, y=top - 18.0, text_anchor="middle", font_weight="bold")
    svg.add("line", x1=x0 - 10.0, x2=x0 + slot * len(samples), y1=sy(truth), y2=sy(truth), stroke="black", stroke_dasharray="5,3", class_="truth-line", data_value=repr(truth))
    for t in _ticks(lo, hi):
        svg.add("text", f"{t:.2f}", x=x0 - 14.0, y=sy(float(t)) + 4.0, text_anchor="end")
    for i, (st, curve, label) in enumerate(zip(stats, curves, labels)):
        cx = x0 + slot * i + 25.0
        svg.open("g", class_="box", data_row=label)
        svg.add("line", x1=cx, x2=cx, y1=sy(st.whisker_lo), y2=sy(st.q1), stroke="black", class_="whisker", data_value=repr(st.whisker_lo))
        svg.add("line", x1=cx, x2=cx, y1=sy(st.q3), y2=sy(st.whisker_hi), stroke="black", class_="whisker", data_value=repr(st.whisker_hi))
        svg.add("rect", x=cx - 12.0, y=sy(st.q3), width="24", height=_n(sy(st.q1) - sy(st.q3)), fill="#fdd0a2", stroke="black", class_="iqr-box", data_q1=repr(st.q1), data_q3=repr(st.q3))
        svg.add("line", x1=cx - 12.0, x2=cx + 12.0, y1=sy(st.median), y2=sy(st.median), stroke="black", stroke_width="2", class_="median", data_value=repr(st.median))
        svg.add("circle", cx=cx, cy=sy(st.mean), r="2.5", fill="red", class_="mean-dot", data_value=repr(st.mean))
        for o in st.outliers:
            svg.add("circle", cx=cx, cy=sy(o), r="1.5", fill="none", stroke="gray", class_="outlier")
        if curve is not None:
            scale = 40.0 / float(curve.density.max())
            pts = " L".join(f"{_n(cx + 16.0 + float(d) * scale)},{_n(sy(float(g)))}" for g, d in zip(curve.grid, curve.density))
            svg.add("path", d="M" + pts, fill="none", stroke="#a63603", class_="density", data_bandwidth=repr(curve.bandwidth))
        svg.add("text", label, x=cx, y=top + height + 16.0, text_anchor="middle", class_="row-label")
        svg.add("text", "Mdn: " + fmt.format(st.median), x=cx, y=top + height + 30.0, text_anchor="middle", class_="annot-median", data_value=repr(st.median))
        svg.close("g")
    svg.close("g")
    return top + height + 50.0


def boxplot_reports(reports, layout: PanelLayout = PanelLayout()) -> str:
    """One boxplot panel per population value, stacked vertically."""
    series = _with_facet(_series_from_reports(reports, False), layout, reports)
    svg = _Svg()
    y = 0.0
    widest = 1
    for key, rows in _facets(series, layout):
        truths = {float(s.truth) for s in rows}
        if len(truths) != 1:
            raise LayoutError(f"facet {key!r} mixes population values")
        y = _render_boxes(svg, [s.values for s in rows], [s.label for s in rows], truths.pop(), layout, y, key)
        widest = max(widest, len(rows))
    return svg.document(layout.margin_left + 90.0 * widest + 40.0, y, "Boxplots of estimates")


def write_svg(text: str, path) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path


def write_density_csv(panels: list[RidgePanel], path) -> Path:
    """Companion table ``(facet, row, grid, density)`` for external replotting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("# schema: btba.density/1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["facet", "row", "grid", "density"])
        for p in panels:
            for r in p.rows:
                if r.curve is None:
                    continue
                for g, d in zip(r.curve.grid, r.curve.density):
                    w.writerow([p.title, r.label, repr(float(g)), repr(float(d))])
    return path
