"""Repositioning MDP: zone-graph observations, action conversion, reward, weights."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .domain import VehicleState, l1, zone_of

if TYPE_CHECKING:
    from .sim import SimWorld


class CalibrationError(ValueError):
    pass


class ActionError(ValueError):
    pass


@dataclass
class ZoneGraph:
    """Observation at a repositioning instant.

    Feature columns: idle count, inbound repositioning, inbound drop-offs,
    then ``q`` past-interval demand counts (oldest first), then an optional
    forecast block.
    """
    node_features: np.ndarray
    adjacency: np.ndarray
    q: int
    forecast_len: int = 0

    @property
    def n_zones(self) -> int:
        return self.node_features.shape[0]

    @property
    def c_idle(self):
        return self.node_features[:, 0]

    @property
    def c_rep(self):
        return self.node_features[:, 1]

    @property
    def c_arr(self):
        return self.node_features[:, 2]

    @property
    def c_pass(self):
        return self.node_features[:, 3:3 + self.q]


@dataclass
class RepositionAction:
    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ActionError("action must be a square matrix")
        if (a < -1e-12).any() or (a > 1 + 1e-12).any():
            raise ActionError("action entries must lie in [0, 1]")
        if not np.allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ActionError("action rows must sum to 1")
        self.matrix = a

    @classmethod
    def identity(cls, n: int) -> "RepositionAction":
        return cls(np.eye(n))


@dataclass(frozen=True)
class RewardWeights:
    omega: float = 0.5
    sigma: float = 0.5

    def __post_init__(self):
        if not 0 < self.omega < 1 or abs(self.omega + self.sigma - 1) > 1e-12:
            raise CalibrationError(f"invalid weights omega={self.omega}, sigma={self.sigma}")


@dataclass
class MdpStepRecord:
    time: float
    state: ZoneGraph
    action: Optional[np.ndarray]
    logp: Optional[float] = None
    # summed over the simulation steps until the next decision:
    # waiting-request count (request x steps) and requests served
    waiting: int = 0
    served: int = 0
    n_steps: int = 0
    reward: float = 0.0


class HistoryBuffer:
    """Per-zone request-origin counts binned by repositioning interval.

    Only requests already activated in the world are ever seen, so the
    buffer cannot leak future demand.
    """

    def __init__(self, n_zones: int, interval: float, start: float = 0.0):
        self.n_zones = n_zones
        self.interval = float(interval)
        self.start = float(start)
        self.bins: dict[int, np.ndarray] = {}
        self._cursor = 0

    def update(self, world: "SimWorld") -> None:
        arrivals = world.arrivals
        for t, z in arrivals[self._cursor:]:
            m = int(math.floor((t - self.start) / self.interval + 1e-9))
            b = self.bins.get(m)
            if b is None:
                b = self.bins[m] = np.zeros(self.n_zones, dtype=np.int64)
            b[z] += 1
        self._cursor = len(arrivals)

    def last(self, q: int, now: float) -> np.ndarray:
        """n x q counts for the q complete intervals before ``now``, oldest first.

        Intervals before the start of history are zero-padded.
        """
        m = int(math.floor((now - self.start) / self.interval + 1e-9))
        out = np.zeros((self.n_zones, q), dtype=np.int64)
        for col, b in enumerate(range(m - q, m)):
            if b in self.bins:
                out[:, col] = self.bins[b]
        return out


def centroid_travel_times(region, speed: float) -> np.ndarray:
    c = region.centroids
    n = len(c)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            m[i, j] = l1(c[i], c[j]) / speed
    return m


def forecast_channel(history: HistoryBuffer, horizon: int, now: float,
                     lookback: int = 12) -> np.ndarray:
    """Trailing-average arrival rate per zone, repeated over ``horizon`` future intervals."""
    m = int(math.floor((now - history.start) / history.interval + 1e-9))
    avail = max(0, min(lookback, m))
    if avail == 0 or horizon <= 0:
        return np.zeros((history.n_zones, max(horizon, 0)))
    rate = history.last(avail, now).mean(axis=1)
    return np.repeat(rate[:, None], horizon, axis=1).astype(float)


def build_state(world: "SimWorld", q: int, history: HistoryBuffer,
                forecast_horizon: int = 0) -> ZoneGraph:
    region = world.region
    n = region.n_zones
    idle = np.zeros(n)
    rep = np.zeros(n)
    arr = np.zeros(n)
    for v in world.vehicles:
        s = v.state
        if s == VehicleState.IDLE:
            idle[zone_of(v.position, region)] += 1
        elif s == VehicleState.REPOSITIONING:
            rep[v.task.target_zone] += 1
        elif s == VehicleState.EN_ROUTE_DROPOFF:
            arr[world.requests[v.task.request_id].destination_zone] += 1
    history.update(world)
    cols = [idle[:, None], rep[:, None], arr[:, None], history.last(q, world.clock.now)]
    if forecast_horizon:
        cols.append(forecast_channel(history, forecast_horizon, world.clock.now))
    feats = np.hstack(cols).astype(float)
    return ZoneGraph(feats, world.adjacency, q, forecast_horizon)


def idle_by_zone(world: "SimWorld") -> list[list]:
    """Idle vehicles per zone, longest-idle first then lowest id."""
    groups = [[] for _ in range(world.region.n_zones)]
    for v in world.vehicles:
        if v.state == VehicleState.IDLE:
            groups[zone_of(v.position, world.region)].append(v)
    for g in groups:
        g.sort(key=lambda v: (v.idle_since, v.id))
    return groups


def action_to_dispatch(action, world: "SimWorld") -> list[tuple[int, int]]:
    """Floor idle-vehicle fractions into (vehicle id, target zone) dispatches."""
    a = action.matrix if isinstance(action, RepositionAction) else RepositionAction(action).matrix
    groups = idle_by_zone(world)
    n = len(groups)
    if a.shape != (n, n):
        raise ActionError(f"action shape {a.shape} does not match {n} zones")
    out = []
    for i, vehs in enumerate(groups):
        c = len(vehs)
        if c == 0:
            continue
        k = 0
        for j in range(n):
            if j == i:
                continue
            rho = int(math.floor(a[i, j] * c + 1e-9))
            for v in vehs[k:k + rho]:
                out.append((v.id, j))
            k += rho
        assert k <= c, "dispatched more vehicles than idle"
    return out


def reward(counts: tuple[float, float], weights: RewardWeights, delta: float) -> float:
    """Per-interval reward from (waiting, served) counts.

    Linear in the counts, so counts summed over several simulation steps give
    the summed reward.
    """
    waiting, served = counts
    return -weights.omega * delta * (waiting + served) + weights.sigma * served


def calibrate_weights(total_wait: float, served: int, total_requests: int) -> RewardWeights:
    """Weights making the cumulative reward equal minus the mean wait.

    Solves -omega*W + sigma*S = -W/n with omega + sigma = 1.
    """
    W, S, n = float(total_wait), float(served), float(total_requests)
    if n <= 0:
        raise CalibrationError("need at least one request")
    if not W > S:
        raise CalibrationError(f"degenerate tallies: total wait {W} <= served {S}")
    omega = (W + n * S) / (n * (W + S))
    if not 0 < omega < 1:
        raise CalibrationError(f"calibrated omega={omega} outside (0, 1); need more than one request")
    return RewardWeights(omega, 1.0 - omega)
