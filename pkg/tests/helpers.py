"""Small builders shared by the test modules."""
from __future__ import annotations

import csv
import datetime as dt
import math

import numpy as np

from samsfleet.demand import EARTH_RADIUS_M, DemandStream
from samsfleet.domain import Position, ServiceRegion, VehicleState
from samsfleet.sim import SimConfig, init_world

NYC_ORIGIN = (-74.02, 40.70)


def world_with(region, requests=(), positions=(), horizon=3600.0, **cfg):
    """World with vehicles at ``positions`` and requests given as (t, (ox, oy), (dx, dy))."""
    cfg.setdefault("fleet_size", max(len(positions), 1))
    config = SimConfig(**cfg)
    reqs = tuple((float(t), Position(*o), Position(*d)) for t, o, d in requests)
    stream = DemandStream(reqs, window=(0.0, horizon))
    w = init_world(config, region, stream, seed=0)
    for v, p in zip(w.vehicles, positions):
        v.position = Position(*p)
    return w


def unproject(x: float, y: float, region: ServiceRegion) -> tuple[float, float]:
    """Inverse of the equirectangular projection used by ingest."""
    lon0, lat0 = region.origin_lonlat
    k = math.pi / 180.0 * EARTH_RADIUS_M
    lat_c = lat0 + (region.height / 2.0) / k
    return lon0 + x / (k * math.cos(math.radians(lat_c))), lat0 + y / k


def write_trip_csv(path, rows) -> None:
    """rows: dicts keyed by the required column names."""
    cols = ["pickup_datetime", "dropoff_datetime", "pickup_longitude", "pickup_latitude",
            "dropoff_longitude", "dropoff_latitude", "trip_distance", "passenger_count"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def trip_row(region, t0: dt.datetime, pick, drop, minutes=10.0, dist=1.5, pax=1) -> dict:
    plon, plat = unproject(*pick, region)
    dlon, dlat = unproject(*drop, region)
    return {"pickup_datetime": t0.isoformat(),
            "dropoff_datetime": (t0 + dt.timedelta(minutes=minutes)).isoformat(),
            "pickup_longitude": repr(plon), "pickup_latitude": repr(plat),
            "dropoff_longitude": repr(dlon), "dropoff_latitude": repr(dlat),
            "trip_distance": repr(dist), "passenger_count": str(pax)}


def synthetic_month(region, path, n_per_day: int = 200, seed: int = 0,
                    days: int = 7, start=dt.datetime(2016, 4, 1)) -> None:
    """Random trips in [5am, 1pm) of ``days`` consecutive days."""
    rng = np.random.default_rng(seed)
    rows = []
    for d in range(days):
        for _ in range(n_per_day):
            t = start + dt.timedelta(days=d, seconds=float(rng.uniform(5 * 3600, 13 * 3600)))
            p = (rng.uniform(1, region.width - 1), rng.uniform(1, region.height - 1))
            q = (rng.uniform(1, region.width - 1), rng.uniform(1, region.height - 1))
            rows.append(trip_row(region, t.replace(microsecond=0), p, q, dist=2.0))
    rows.sort(key=lambda r: r["pickup_datetime"])
    write_trip_csv(path, rows)


def idle_count(world) -> int:
    return sum(v.state == VehicleState.IDLE for v in world.vehicles)
