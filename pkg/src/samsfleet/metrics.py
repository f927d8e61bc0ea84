"""Service-quality and fleet-efficiency measures, reports and zone heatmaps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .domain import RequestState

QUINTILES = (0.2, 0.4, 0.6, 0.8)

# Row names follow the evaluation table; None marks an absent value.
REPORT_FIELDS = (
    "mean_wait", "std_wait", "served_count", "unserved_count",
    "pct_empty_distance", "pct_empty_pickup", "pct_empty_reposition",
    "total_distance", "mean_censored_wait",
)

PALETTE = ("#fef0d9", "#fdcc8a", "#fc8d59", "#e34a33", "#b30000")
ABSENT_FILL = "#d9d9d9"


@dataclass
class ServiceMetrics:
    mean_wait: Optional[float]
    std_wait: Optional[float]
    served_count: int
    unserved_count: int
    pct_empty_distance: Optional[float]
    pct_empty_pickup: Optional[float]
    pct_empty_reposition: Optional[float]
    total_distance: float = 0.0
    mean_censored_wait: Optional[float] = None
    per_zone_wait: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


def compute_metrics(trace) -> ServiceMetrics:
    """Waits over served requests (pickup minus request time) and the fleet
    distance split into loaded, pickup and repositioning legs."""
    n_zones = trace.region["n_cols"] * trace.region["n_rows"]
    per_zone = [[] for _ in range(n_zones)]
    waits = []
    censored = []
    horizon_end = trace.window[1]
    for rid, t_r, ox, oy, dx, dy, state, pu, do, oz in trace.requests:
        if state == RequestState.SERVED:
            w = pu - t_r
            waits.append(w)
            per_zone[oz].append(w)
        else:
            censored.append((pu if pu is not None else horizon_end) - t_r)
    loaded = sum(v[1] for v in trace.vehicles)
    pickup = sum(v[2] for v in trace.vehicles)
    repo = sum(v[3] for v in trace.vehicles)
    total = loaded + pickup + repo
    if total > 0:
        p_pick, p_repo = pickup / total, repo / total
        p_empty = (pickup + repo) / total
    else:
        p_pick = p_repo = p_empty = None
    w = np.asarray(waits, dtype=float)
    return ServiceMetrics(
        mean_wait=float(w.mean()) if w.size else None,
        std_wait=float(w.std()) if w.size else None,
        served_count=len(waits), unserved_count=len(censored),
        pct_empty_distance=p_empty, pct_empty_pickup=p_pick, pct_empty_reposition=p_repo,
        total_distance=float(total),
        mean_censored_wait=float(np.mean(censored)) if censored else None,
        per_zone_wait=per_zone)


def quintile_breaks(values: Sequence[float]) -> list[float]:
    """Quintile breakpoints by linear interpolation between order statistics."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return []
    return [float(x) for x in np.quantile(v, QUINTILES, method="linear")]


def quintile_class(value: float, breaks: Sequence[float]) -> int:
    """0..4; values on a breakpoint fall in the lower class."""
    for k, b in enumerate(breaks):
        if value <= b:
            return k
    return len(breaks)


def zone_mean_waits(metrics: ServiceMetrics) -> list[Optional[float]]:
    return [float(np.mean(z)) if z else None for z in metrics.per_zone_wait]


def _report_dict(metrics: ServiceMetrics) -> dict:
    zone_means = zone_mean_waits(metrics)
    all_waits = [w for z in metrics.per_zone_wait for w in z]
    return {"metrics": metrics.row(),
            "per_zone_mean_wait": zone_means,
            "per_zone_count": [len(z) for z in metrics.per_zone_wait],
            "wait_quintile_breaks": quintile_breaks(all_waits),
            "zone_quintile_breaks": quintile_breaks(zone_means)}


def emit_report(metrics: ServiceMetrics, path, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "json"
    d = _report_dict(metrics)
    if fmt == "json":
        path.write_text(json.dumps(d, indent=2, sort_keys=True))
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["field", "value"])
        for k in REPORT_FIELDS:
            v = d["metrics"][k]
            w.writerow([k, "" if v is None else repr(v)])
        for i, (m, c) in enumerate(zip(d["per_zone_mean_wait"], d["per_zone_count"])):
            w.writerow([f"zone_{i}_mean_wait", "" if m is None else repr(m)])
            w.writerow([f"zone_{i}_count", c])
        for i, b in enumerate(d["wait_quintile_breaks"]):
            w.writerow([f"wait_quintile_{i + 1}", repr(b)])
        path.write_text(buf.getvalue())
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> dict:
    """Parse a report written by :func:`emit_report` back into a dict."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    rows = dict(list(csv.reader(path.read_text().splitlines()))[1:])
    metrics = {}
    for k in REPORT_FIELDS:
        v = rows.get(k, "")
        metrics[k] = None if v == "" else (int(v) if k.endswith("_count") else float(v))
    zm, zc = [], []
    i = 0
    while f"zone_{i}_mean_wait" in rows:
        v = rows[f"zone_{i}_mean_wait"]
        zm.append(None if v == "" else float(v))
        zc.append(int(rows[f"zone_{i}_count"]))
        i += 1
    qb = [float(rows[k]) for k in sorted(r for r in rows if r.startswith("wait_quintile_"))]
    return {"metrics": metrics, "per_zone_mean_wait": zm, "per_zone_count": zc,
            "wait_quintile_breaks": qb}


def emit_zone_heatmap(values: Sequence[Optional[float]], region: dict, path,
                      title: str = "Request wait at pickup zone (s)") -> Path:
    """SVG grid of zones shaded by quintile class, with a breakpoint legend.

    Fixed 400-unit-wide viewBox; zone rows are drawn with the region's y axis
    pointing up.
    """
    n_cols, n_rows = region["n_cols"], region["n_rows"]
    if len(values) != n_cols * n_rows:
        raise ValueError("one value per zone required")
    breaks = quintile_breaks(values)
    cell = 400.0 / max(n_cols, n_rows)
    gw, gh = cell * n_cols, cell * n_rows
    legend_h = 20.0 * 6
    H = gh + legend_h + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 420 {H:.1f}" '
           f'width="420" height="{H:.1f}">',
           f'<text x="10" y="16" font-size="12" font-family="sans-serif">{title}</text>']
    for k, v in enumerate(values):
        r, c = divmod(k, n_cols)
        x = 10 + c * cell
        y = 24 + (n_rows - 1 - r) * cell
        fill = ABSENT_FILL if v is None else PALETTE[quintile_class(v, breaks)]
        label = "n/a" if v is None else f"{v:.0f}"
        out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cell:.1f}" height="{cell:.1f}" '
                   f'fill="{fill}" stroke="#333" stroke-width="1"/>')
        out.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2:.1f}" font-size="10" '
                   f'text-anchor="middle" font-family="sans-serif">{k}: {label}</text>')
    ly = 24 + gh + 16
    edges = [None] + list(breaks) + [None]
    for i in range(len(breaks) + 1 if breaks else 0):
        lo = "min" if edges[i] is None else f"{edges[i]:.1f}"
        hi = "max" if edges[i + 1] is None else f"{edges[i + 1]:.1f}"
        out.append(f'<rect x="10" y="{ly + 20 * i:.1f}" width="14" height="14" '
                   f'fill="{PALETTE[i]}" stroke="#333"/>')
        out.append(f'<text x="30" y="{ly + 20 * i + 11:.1f}" font-size="10" '
                   f'font-family="sans-serif">{lo} - {hi}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def summarize(metrics: Sequence[ServiceMetrics]) -> dict:
    """Seed-averaged metrics (absent values skipped)."""
    out = {}
    for k in REPORT_FIELDS:
        vals = [getattr(m, k) for m in metrics if getattr(m, k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out
