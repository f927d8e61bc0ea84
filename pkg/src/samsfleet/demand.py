"""Trip-record ingestion, demand sampling and synthetic Poisson demand."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .domain import ConfigError, Position, ServiceRegion, zone_of

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "pickup_datetime", "dropoff_datetime",
    "pickup_longitude", "pickup_latitude",
    "dropoff_longitude", "dropoff_latitude",
    "trip_distance", "passenger_count",
)

EARTH_RADIUS_M = 6371008.8


class SchemaError(ValueError):
    """The CSV header lacks a required column."""


class DataError(ValueError):
    """A row could not be parsed (raised only in strict mode)."""


@dataclass(frozen=True)
class TripRecord:
    pickup_datetime: dt.datetime
    dropoff_datetime: dt.datetime
    pickup: Position
    dropoff: Position
    trip_distance: float
    passenger_count: int
    # seconds since the configured horizon origin
    t: float = 0.0


@dataclass
class IngestReport:
    rows: int = 0
    kept: int = 0
    dropped: dict = field(default_factory=lambda: {
        "zero_distance": 0, "out_of_region": 0, "malformed": 0, "time_order": 0})
    malformed_lines: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "kept": self.kept, "dropped": self.dropped,
                           "malformed_lines": self.malformed_lines}, indent=2, sort_keys=True)


@dataclass(frozen=True)
class DemandStream:
    """Time-ordered (request_time, origin, destination) triples."""
    requests: tuple
    seed: int = 0
    demand_fraction: float = 1.0
    window: tuple = (0.0, math.inf)

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "demand_fraction": self.demand_fraction,
                "window": list(self.window),
                "requests": [[t, o.x, o.y, d.x, d.y] for t, o, d in self.requests]}

    @classmethod
    def from_dict(cls, d: dict) -> "DemandStream":
        reqs = tuple((float(t), Position(ox, oy), Position(dx_, dy_))
                     for t, ox, oy, dx_, dy_ in d["requests"])
        return cls(reqs, int(d.get("seed", 0)), float(d.get("demand_fraction", 1.0)),
                   tuple(d.get("window", (0.0, math.inf))))


def project(lon: float, lat: float, region: ServiceRegion) -> Position:
    """Equirectangular projection about the region's center latitude."""
    if region.origin_lonlat is None:
        raise ConfigError("region has no lon/lat origin; cannot project coordinates")
    lon0, lat0 = region.origin_lonlat
    k = math.pi / 180.0 * EARTH_RADIUS_M
    lat_c = lat0 + (region.height / 2.0) / k
    return Position((lon - lon0) * k * math.cos(math.radians(lat_c)), (lat - lat0) * k)


def _parse_time(s: str) -> dt.datetime:
    return dt.datetime.fromisoformat(s.strip())


def ingest(source: Union[str, Path, TextIO], region: ServiceRegion,
           horizon_origin: Optional[dt.datetime] = None,
           strict: bool = False) -> tuple[list[TripRecord], IngestReport]:
    """Parse a trip CSV and drop zero-distance, out-of-region and malformed rows.

    Times are expressed as seconds since ``horizon_origin`` (defaults to the
    midnight before the earliest pickup in the file).
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return ingest(io.StringIO(fh.read()), region, horizon_origin, strict)

    report = IngestReport()
    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    if reader.fieldnames is None:
        return [], report
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")

    raw = []
    for lineno, row in enumerate(reader, start=2):
        report.rows += 1
        try:
            pu_t = _parse_time(row["pickup_datetime"])
            do_t = _parse_time(row["dropoff_datetime"])
            dist = float(row["trip_distance"])
            pax = int(float(row["passenger_count"]))
            lonlat = [float(row[c]) for c in REQUIRED_COLUMNS[2:6]]
            if not all(math.isfinite(v) for v in lonlat + [dist]):
                raise ValueError("non-finite value")
        except (ValueError, TypeError, KeyError) as exc:
            if strict:
                raise DataError(f"line {lineno}: {exc}") from exc
            report.dropped["malformed"] += 1
            report.malformed_lines.append(lineno)
            continue
        if dist <= 0:
            report.dropped["zero_distance"] += 1
            continue
        if do_t < pu_t:
            report.dropped["time_order"] += 1
            continue
        pu = project(lonlat[0], lonlat[1], region)
        do = project(lonlat[2], lonlat[3], region)
        if not (region.contains(pu) and region.contains(do)):
            report.dropped["out_of_region"] += 1
            continue
        raw.append((pu_t, do_t, pu, do, dist, pax))

    if horizon_origin is None and raw:
        first = min(r[0] for r in raw)
        horizon_origin = dt.datetime.combine(first.date(), dt.time())
    records = [TripRecord(*r, t=(r[0] - horizon_origin).total_seconds()) for r in raw]
    records.sort(key=lambda r: r.t)
    report.kept = len(records)
    log.info("ingest: %d rows, %d kept, dropped %s", report.rows, report.kept, report.dropped)
    return records, report


def is_weekday(rec: TripRecord) -> bool:
    return rec.pickup_datetime.weekday() < 5


def filter_days(records: Iterable[TripRecord], days: str) -> list[TripRecord]:
    """Keep ``weekday`` or ``weekend`` records (``all`` keeps everything)."""
    if days == "all":
        return list(records)
    want = days == "weekday"
    return [r for r in records if is_weekday(r) == want]


def sample_stream(records: Sequence[TripRecord], demand_fraction: float,
                  window: tuple[float, float], seed: int) -> DemandStream:
    if not 0 < demand_fraction <= 1:
        raise ConfigError("demand_fraction must lie in (0, 1]")
    start, end = window
    inwin = sorted((r for r in records if start <= r.t < end), key=lambda r: r.t)
    rng = np.random.default_rng(seed)
    keep = rng.random(len(inwin)) < demand_fraction
    reqs = tuple((r.t, r.pickup, r.dropoff) for r, k in zip(inwin, keep) if k)
    return DemandStream(reqs, seed, demand_fraction, (float(start), float(end)))


def _uniform_in_zone(rng, region: ServiceRegion, k: int) -> Position:
    z = region.zones[k]
    return Position(float(rng.uniform(z.x0, z.x1)), float(rng.uniform(z.y0, z.y1)))


def synth_poisson(rates: Sequence[float], od_matrix, window: tuple[float, float],
                  seed: int, region: ServiceRegion) -> DemandStream:
    """Homogeneous Poisson arrivals per origin zone (``rates`` in requests/hour)."""
    rates = np.asarray(rates, dtype=float)
    od = np.asarray(od_matrix, dtype=float)
    n = region.n_zones
    if rates.shape != (n,) or od.shape != (n, n):
        raise ConfigError(f"rates/od_matrix must be sized for {n} zones")
    if (rates < 0).any():
        raise ConfigError("arrival rates must be non-negative")
    if (od < 0).any() or not np.allclose(od.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("each od_matrix row must be a probability vector")
    start, end = window
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = start
        scale = 3600.0 / rates[i] if rates[i] > 0 else None
        while scale is not None:
            t += rng.exponential(scale)
            if t >= end:
                break
            j = int(rng.choice(n, p=od[i]))
            out.append((float(t), _uniform_in_zone(rng, region, i), _uniform_in_zone(rng, region, j)))
    out.sort(key=lambda r: r[0])
    return DemandStream(tuple(out), seed, 1.0, (float(start), float(end)))


def zone_counts(stream: Iterable, region: ServiceRegion, interval: float,
                start: float = 0.0, n_intervals: Optional[int] = None) -> np.ndarray:
    """Origin counts per zone (rows) and interval (columns).

    Column m covers request times in ``[start + m*interval, start + (m+1)*interval)``.
    """
    if interval <= 0:
        raise ConfigError("interval must be positive")
    reqs = list(stream)
    if n_intervals is None:
        last = max((r[0] for r in reqs), default=start)
        n_intervals = int(math.floor((last - start) / interval)) + 1
    counts = np.zeros((region.n_zones, n_intervals), dtype=np.int64)
    for t, o, _ in reqs:
        m = int(math.floor((t - start) / interval))
        if 0 <= m < n_intervals:
            counts[zone_of(o, region), m] += 1
    return counts


def demand_centroids(records_or_stream: Iterable, region: ServiceRegion) -> list[Position]:
    """Mean pickup position per zone; zones without demand keep the geometric center."""
    n = region.n_zones
    sx = np.zeros(n); sy = np.zeros(n); c = np.zeros(n)
    for r in records_or_stream:
        p = r.pickup if isinstance(r, TripRecord) else r[1]
        k = zone_of(p, region)
        sx[k] += p.x; sy[k] += p.y; c[k] += 1
    return [Position(sx[k] / c[k], sy[k] / c[k]) if c[k] else region.zones[k].center
            for k in range(n)]
