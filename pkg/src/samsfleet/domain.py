"""Core entities, state machines and L1 geometry.

Units are meters for positions and distances, seconds for times.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence


class OutOfRegionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Position(NamedTuple):
    x: float
    y: float


class RequestState(enum.IntEnum):
    UNREQUESTED = 0
    UNASSIGNED = 1
    ASSIGNED = 2
    IN_VEHICLE = 3
    SERVED = 4


class VehicleState(enum.IntEnum):
    IDLE = 1
    EN_ROUTE_PICKUP = 2
    EN_ROUTE_DROPOFF = 3
    REPOSITIONING = 4


_I, _P, _D, _R = (VehicleState.IDLE, VehicleState.EN_ROUTE_PICKUP,
                  VehicleState.EN_ROUTE_DROPOFF, VehicleState.REPOSITIONING)

# q_v(t1) -> allowed q_v(t2), including self loops
LEGAL_VEHICLE_TRANSITIONS: dict[VehicleState, frozenset] = {
    _I: frozenset({_I, _P, _R}),
    _R: frozenset({_I, _P, _R}),
    _P: frozenset({_P, _D}),
    _D: frozenset({_D, _I}),
}


def is_legal_transition(before: VehicleState, after: VehicleState) -> bool:
    return after in LEGAL_VEHICLE_TRANSITIONS[before]


@dataclass
class Request:
    id: int
    request_time: float
    origin: Position
    destination: Position
    state: RequestState = RequestState.UNREQUESTED
    pickup_time: Optional[float] = None
    dropoff_time: Optional[float] = None
    origin_zone: int = -1
    destination_zone: int = -1

    @property
    def wait(self) -> Optional[float]:
        if self.pickup_time is None:
            return None
        return self.pickup_time - self.request_time

    def elapsed_wait(self, now: float) -> float:
        """Elapsed wait at ``now``; frozen at the pickup instant once picked up."""
        if self.pickup_time is not None:
            return self.pickup_time - self.request_time
        return max(0.0, now - self.request_time)


@dataclass
class Task:
    """What a non-idle vehicle is doing.

    ``request_id`` is set for pickup/dropoff tasks, ``target_zone`` for
    repositioning. ``dwell_left`` counts down boarding/alighting time once the
    vehicle sits at its waypoint.
    """
    target: Position
    request_id: Optional[int] = None
    target_zone: Optional[int] = None
    dwell_left: Optional[float] = None
    arrived_at: Optional[float] = None


@dataclass
class Vehicle:
    id: int
    position: Position
    state: VehicleState = VehicleState.IDLE
    task: Optional[Task] = None
    odometer_loaded: float = 0.0
    odometer_pickup: float = 0.0
    odometer_reposition: float = 0.0
    idle_since: float = 0.0
    # sum of per-leg L1 displacements, kept apart from the category odometers
    distance_moved: float = 0.0

    @property
    def odometer_total(self) -> float:
        return self.odometer_loaded + self.odometer_pickup + self.odometer_reposition


@dataclass(frozen=True)
class Zone:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, p: Position) -> bool:
        return self.x0 <= p.x <= self.x1 and self.y0 <= p.y <= self.y1

    @property
    def center(self) -> Position:
        return Position((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


@dataclass
class ServiceRegion:
    """Rectangle [0, width] x [0, height] partitioned into a grid of zones.

    Zone index runs row-major from the origin corner: ``k = row * n_cols + col``.
    """
    width: float
    height: float
    n_cols: int
    n_rows: int
    centroids: list[Position] = field(default_factory=list)
    # lon/lat of the (0, 0) corner, only needed for ingesting raw coordinates
    origin_lonlat: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.n_cols < 1 or self.n_rows < 1:
            raise ConfigError("region needs positive size and at least one zone")
        self._xs = [self.width * c / self.n_cols for c in range(self.n_cols + 1)]
        self._ys = [self.height * r / self.n_rows for r in range(self.n_rows + 1)]
        self.zones = [Zone(self._xs[c], self._ys[r], self._xs[c + 1], self._ys[r + 1])
                      for r in range(self.n_rows) for c in range(self.n_cols)]
        if not self.centroids:
            self.centroids = [z.center for z in self.zones]
        if len(self.centroids) != len(self.zones):
            raise ConfigError("one centroid per zone required")
        for k, (z, c) in enumerate(zip(self.zones, self.centroids)):
            if not z.contains(c):
                raise ConfigError(f"centroid of zone {k} lies outside the zone")

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    def contains(self, p: Position) -> bool:
        return 0.0 <= p.x <= self.width and 0.0 <= p.y <= self.height

    def with_centroids(self, centroids: Sequence[Position]) -> "ServiceRegion":
        return ServiceRegion(self.width, self.height, self.n_cols, self.n_rows,
                             [Position(*c) for c in centroids], self.origin_lonlat)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "n_cols": self.n_cols,
                "n_rows": self.n_rows, "centroids": [list(c) for c in self.centroids],
                "origin_lonlat": list(self.origin_lonlat) if self.origin_lonlat else None}

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceRegion":
        cents = [Position(*c) for c in d.get("centroids") or []]
        o = d.get("origin_lonlat")
        return cls(float(d["width"]), float(d["height"]), int(d["n_cols"]), int(d["n_rows"]),
                   cents, tuple(o) if o else None)


def _grid_index(v: float, edges: list[float]) -> int:
    # lowest cell whose closed interval contains v
    n = len(edges) - 1
    for i in range(n):
        if v <= edges[i + 1]:
            return i
    return n - 1


def zone_of(p: Position, region: ServiceRegion) -> int:
    """Index of the zone containing ``p``; shared boundaries go to the lowest index."""
    if not (math.isfinite(p.x) and math.isfinite(p.y)) or not region.contains(p):
        raise OutOfRegionError(f"position {tuple(p)} outside the service region")
    # lowest row first, then lowest column: boundary points resolve to the
    # smallest row-major index among the zones that touch them
    row = _grid_index(p.y, region._ys)
    col = _grid_index(p.x, region._xs)
    return row * region.n_cols + col


def l1(a: Position, b: Position) -> float:
    return abs(a.x - b.x) + abs(a.y - b.y)


def travel_time(a: Position, b: Position, speed: float) -> float:
    if not speed > 0:
        raise ConfigError(f"speed must be positive, got {speed}")
    return l1(a, b) / speed


def advance_along_l1(frm: Position, to: Position, speed: float, dt: float) -> Position:
    """Move ``speed * dt`` meters from ``frm`` toward ``to``, x leg first then y."""
    budget = speed * dt
    dx = to.x - frm.x
    dy = to.y - frm.y
    if budget >= abs(dx) + abs(dy):
        return to
    if budget <= abs(dx):
        return Position(frm.x + math.copysign(budget, dx), frm.y)
    rest = budget - abs(dx)
    return Position(to.x, frm.y + math.copysign(rest, dy))


@dataclass
class Clock:
    now: float
    step: float
    horizon_end: float
    start: float = 0.0
    k: int = 0

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError("clock step must be positive")
        self.start = self.now

    def tick(self) -> None:
        self.k += 1
        self.now = self.start + self.k * self.step

    @property
    def done(self) -> bool:
        return self.now >= self.horizon_end - 1e-9

    def on_grid(self, interval: float) -> bool:
        elapsed = self.k * self.step
        return abs(elapsed / interval - round(elapsed / interval)) < 1e-9
