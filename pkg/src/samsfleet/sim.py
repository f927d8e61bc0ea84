"""Discrete-time agent-based fleet simulation.

Each step runs, in order: request activation, assignment (on its grid),
repositioning (on its grid), vehicle movement, clock advance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import mdp
from .assignment import STRATEGIES, AssignmentInstance
from .demand import DemandStream
from .domain import (Clock, ConfigError, Position, Request, RequestState,
                     ServiceRegion, Task, Vehicle, VehicleState, advance_along_l1,
                     is_legal_transition, zone_of)

TRACE_VERSION = 1

IDLE = VehicleState.IDLE
PICKUP = VehicleState.EN_ROUTE_PICKUP
DROPOFF = VehicleState.EN_ROUTE_DROPOFF
REPOSITIONING = VehicleState.REPOSITIONING


class InvariantViolation(RuntimeError):
    pass


@dataclass
class SimConfig:
    vehicle_speed: float = 5.0
    dropoff_dwell: float = 15.0
    pickup_dwell: float = 45.0
    step: float = 15.0
    fleet_size: int = 600
    assignment_interval: float = 30.0
    repositioning_interval: float = 300.0
    initial_placement: str = "uniform_random"
    # wait-time weight of the optimal assignment (m/s); None -> vehicle speed
    alpha: Optional[float] = None
    # past repositioning intervals of demand in the observation
    q: int = 4
    # "unassigned" counts R_U in the reward, "waiting" counts R_U and R_A
    reward_count: str = "unassigned"
    # future intervals of forecast demand in the observation (0 = none)
    forecast_horizon: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.vehicle_speed <= 0 or self.step <= 0:
            raise ConfigError("speed and step must be positive")
        if self.fleet_size < 1:
            raise ConfigError("fleet_size must be >= 1")
        for name in ("assignment_interval", "repositioning_interval"):
            v = getattr(self, name)
            if v <= 0 or abs(v / self.step - round(v / self.step)) > 1e-9:
                raise ConfigError(f"{name} must be a positive multiple of step")
        if self.pickup_dwell < 0 or self.dropoff_dwell < 0:
            raise ConfigError("dwell times must be non-negative")
        if self.initial_placement not in ("uniform_random", "demand_proportional"):
            raise ConfigError(f"unknown initial_placement {self.initial_placement!r}")
        if self.reward_count not in ("unassigned", "waiting"):
            raise ConfigError(f"unknown reward_count {self.reward_count!r}")
        if self.q < 1 or self.forecast_horizon < 0:
            raise ConfigError("q must be >= 1 and forecast_horizon >= 0")

    @property
    def wait_weight(self) -> float:
        return self.vehicle_speed if self.alpha is None else self.alpha


class SimEvent(NamedTuple):
    time: float
    kind: str
    vehicle_id: int
    request_id: int
    x: float
    y: float


class StepTally(NamedTuple):
    unassigned: int
    assigned: int
    served: int


@dataclass
class SimWorld:
    clock: Clock
    region: ServiceRegion
    vehicles: list
    config: SimConfig
    stream: DemandStream
    adjacency: np.ndarray
    requests: dict = field(default_factory=dict)
    unassigned: dict = field(default_factory=dict)
    cursor: int = 0
    events: list = field(default_factory=list)
    # (request_time, origin zone) in activation order
    arrivals: list = field(default_factory=list)
    n_assigned: int = 0
    served_total: int = 0
    log_events: bool = True

    def emit(self, time, kind, vid=-1, rid=-1, pos=None):
        if self.log_events:
            self.events.append(SimEvent(time, kind, vid, rid,
                                        pos.x if pos else math.nan, pos.y if pos else math.nan))

    def vehicle_counts(self) -> dict:
        c = {s: 0 for s in VehicleState}
        for v in self.vehicles:
            c[v.state] += 1
        return c


def _uniform_point(rng, x0, y0, x1, y1) -> Position:
    return Position(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))


def init_world(config: SimConfig, region: ServiceRegion, stream: DemandStream, seed: int,
               horizon_end: Optional[float] = None, placement_weights=None,
               log_events: bool = True) -> SimWorld:
    """Place the fleet (all idle) and set the clock to the start of the stream window.

    ``placement_weights`` (per zone) overrides the stream's origin counts for
    demand-proportional placement.
    """
    config.validate()
    start, end = stream.window
    if horizon_end is not None:
        end = horizon_end
    if not math.isfinite(end):
        raise ConfigError("episode horizon must be finite")
    rng = np.random.default_rng(seed)
    n = region.n_zones
    if config.initial_placement == "uniform_random":
        zones = None
    else:
        if placement_weights is None:
            w = np.zeros(n)
            for _, o, _ in stream:
                w[zone_of(o, region)] += 1
        else:
            w = np.asarray(placement_weights, dtype=float)
        if w.sum() <= 0:
            w = np.ones(n)
        # largest-remainder apportionment, ties to the lower zone index
        quota = w / w.sum() * config.fleet_size
        counts = np.floor(quota).astype(int)
        order = sorted(range(n), key=lambda k: (-(quota[k] - counts[k]), k))
        for k in order[:config.fleet_size - counts.sum()]:
            counts[k] += 1
        zones = [k for k in range(n) for _ in range(counts[k])]
    vehicles = []
    for vid in range(config.fleet_size):
        if zones is None:
            p = _uniform_point(rng, 0.0, 0.0, region.width, region.height)
        else:
            z = region.zones[zones[vid]]
            p = _uniform_point(rng, z.x0, z.y0, z.x1, z.y1)
        vehicles.append(Vehicle(vid, p, idle_since=start))
    clock = Clock(float(start), config.step, float(end))
    adj = mdp.centroid_travel_times(region, config.vehicle_speed)
    return SimWorld(clock, region, vehicles, config, stream, adj, log_events=log_events)


# -- movement ---------------------------------------------------------------

def _arrive(world: SimWorld, v: Vehicle, t: float, cfg: SimConfig) -> None:
    task = v.task
    if v.state == REPOSITIONING:
        v.state = IDLE
        v.task = None
        v.idle_since = t
        world.emit(t, "reposition_arrive", v.id, -1, v.position)
    else:
        task.arrived_at = t
        task.dwell_left = cfg.pickup_dwell if v.state == PICKUP else cfg.dropoff_dwell


def _finish_dwell(world: SimWorld, v: Vehicle, t: float, out: list) -> None:
    task = v.task
    req = world.requests[task.request_id]
    if v.state == PICKUP:
        # the wait clock stopped on arrival, before boarding
        req.pickup_time = task.arrived_at
        req.state = RequestState.IN_VEHICLE
        world.n_assigned -= 1
        v.state = DROPOFF
        v.task = Task(req.destination, request_id=req.id)
        out.append(("pickup", t))
    else:
        req.dropoff_time = t
        req.state = RequestState.SERVED
        world.served_total += 1
        v.state = IDLE
        v.task = None
        v.idle_since = t
        out.append(("dropoff", t))


def _move(world: SimWorld, v: Vehicle, cfg: SimConfig) -> int:
    """Advance one vehicle through a step; returns requests served."""
    t = world.clock.now
    left = cfg.step
    speed = cfg.vehicle_speed
    served = 0
    done = []
    while True:
        task = v.task
        if task is None:
            break
        if task.dwell_left is not None:
            if task.dwell_left > left + 1e-9:
                task.dwell_left -= left
                break
            t += task.dwell_left
            left -= task.dwell_left
            task.dwell_left = None
            rid = task.request_id
            _finish_dwell(world, v, t, done)
            if done[-1][0] == "dropoff":
                served += 1
            if world.log_events:
                world.emit(t, done[-1][0], v.id, rid, v.position)
            continue
        if left <= 1e-12:
            break
        pos = v.position
        tgt = task.target
        dist = abs(tgt.x - pos.x) + abs(tgt.y - pos.y)
        cap = speed * left
        if cap >= dist:
            new = tgt
            traveled = dist
            t += dist / speed
            left = max(0.0, left - dist / speed)
            arrived = True
        else:
            new = advance_along_l1(pos, tgt, speed, left)
            traveled = cap
            left = 0.0
            arrived = False
        s = v.state
        if s == DROPOFF:
            v.odometer_loaded += traveled
        elif s == PICKUP:
            v.odometer_pickup += traveled
        else:
            v.odometer_reposition += traveled
        v.distance_moved += abs(new.x - pos.x) + abs(new.y - pos.y)
        v.position = new
        if not arrived:
            break
        _arrive(world, v, t, cfg)
    return served


# -- decisions --------------------------------------------------------------

def _activate(world: SimWorld) -> None:
    reqs = world.stream.requests
    now = world.clock.now
    region = world.region
    while world.cursor < len(reqs) and reqs[world.cursor][0] <= now + 1e-9:
        t, o, d = reqs[world.cursor]
        r = Request(world.cursor, t, o, d, RequestState.UNASSIGNED,
                    origin_zone=zone_of(o, region), destination_zone=zone_of(d, region))
        world.requests[r.id] = r
        world.unassigned[r.id] = r
        world.arrivals.append((t, r.origin_zone))
        world.cursor += 1
        world.emit(now, "request_arrival", -1, r.id, o)


def available_vehicles(world: SimWorld) -> list:
    return [v for v in world.vehicles if v.state == IDLE or v.state == REPOSITIONING]


def assignment_instance(world: SimWorld) -> AssignmentInstance:
    now = world.clock.now
    reqs = [(r.id, r.origin, now - r.request_time) for r in world.unassigned.values()]
    vehs = [(v.id, v.position) for v in available_vehicles(world)]
    return AssignmentInstance(reqs, vehs, world.config.wait_weight)


def _assign(world: SimWorld, strategy: Callable) -> None:
    if not world.unassigned:
        return
    inst = assignment_instance(world)
    if not inst.vehicles:
        return
    result = strategy(inst)
    now = world.clock.now
    for rid, vid in result.matches:
        r = world.unassigned.pop(rid)
        v = world.vehicles[vid]
        if v.state == REPOSITIONING:
            world.emit(now, "reposition_cancel", vid, -1, v.position)
        elif v.state != IDLE:
            raise InvariantViolation(f"vehicle {vid} assigned while in state {v.state.name}")
        r.state = RequestState.ASSIGNED
        world.n_assigned += 1
        v.state = PICKUP
        v.task = Task(r.origin, request_id=rid)
        world.emit(now, "assignment", vid, rid, v.position)


def apply_dispatch(world: SimWorld, dispatch) -> None:
    now = world.clock.now
    for vid, j in dispatch:
        v = world.vehicles[vid]
        if v.state != IDLE:
            raise InvariantViolation(f"vehicle {vid} dispatched while {v.state.name}")
        v.state = REPOSITIONING
        v.task = Task(world.region.centroids[j], target_zone=j)
        world.emit(now, "reposition_start", vid, -1, v.position)


def step(world: SimWorld, config: Optional[SimConfig] = None, assign: Optional[Callable] = None,
         reposition: Optional[Callable] = None) -> StepTally:
    """Advance the world by one step.

    ``assign`` maps an AssignmentInstance to an AssignmentResult; ``reposition``
    maps the world to a list of (vehicle id, target zone) dispatches.
    Returns the counts the reward is built from: unassigned and assigned
    requests after this step's decisions, and requests served during it.
    """
    cfg = config or world.config
    clock = world.clock
    if clock.done:
        raise InvariantViolation("step called at or past the horizon")
    _activate(world)
    if assign is not None and clock.on_grid(cfg.assignment_interval):
        _assign(world, assign)
    if reposition is not None and clock.on_grid(cfg.repositioning_interval):
        dispatch = reposition(world)
        if dispatch:
            apply_dispatch(world, dispatch)
    tally_u = len(world.unassigned)
    tally_a = world.n_assigned
    served = 0
    mark = len(world.events)
    for v in world.vehicles:
        if v.task is not None:
            served += _move(world, v, cfg)
    if world.log_events and len(world.events) > mark + 1:
        world.events[mark:] = sorted(world.events[mark:], key=lambda e: e.time)
    clock.tick()
    return StepTally(tally_u, tally_a, served)


# -- invariants -------------------------------------------------------------

class InvariantChecker:
    """Compares consecutive world snapshots against the state-machine rules."""

    def __init__(self, world: SimWorld):
        self.fleet = len(world.vehicles)
        self.vstate = [v.state for v in world.vehicles]
        self.rstate: dict[int, RequestState] = {}
        self.odo = [v.odometer_total for v in world.vehicles]
        self.checks = 0

    def check(self, world: SimWorld) -> None:
        vs = world.vehicles
        if len(vs) != self.fleet:
            raise InvariantViolation("fleet size changed")
        for i, v in enumerate(vs):
            s = v.state
            if s not in (IDLE, PICKUP, DROPOFF, REPOSITIONING):
                raise InvariantViolation(f"vehicle {v.id} in unknown state")
            if not is_legal_transition(self.vstate[i], s):
                raise InvariantViolation(
                    f"vehicle {v.id}: illegal {self.vstate[i].name}->{s.name}")
            if (v.task is None) != (s == IDLE):
                raise InvariantViolation(f"vehicle {v.id}: task/state mismatch")
            if s in (PICKUP, DROPOFF) and v.task.request_id is None:
                raise InvariantViolation(f"vehicle {v.id}: no request on a passenger task")
            tot = v.odometer_total
            if min(v.odometer_loaded, v.odometer_pickup, v.odometer_reposition) < 0 \
                    or tot < self.odo[i] - 1e-9:
                raise InvariantViolation(f"vehicle {v.id}: odometer went backwards")
            if abs(tot - v.distance_moved) > 1e-6 * max(1.0, v.distance_moved):
                raise InvariantViolation(f"vehicle {v.id}: odometer split does not close")
            self.vstate[i] = s
            self.odo[i] = tot
        now = world.clock.now
        holders = {}
        for v in vs:
            if v.state in (PICKUP, DROPOFF):
                rid = v.task.request_id
                if rid in holders:
                    raise InvariantViolation(f"request {rid} held by two vehicles")
                holders[rid] = v
        counts = [0] * 5
        for rid, r in world.requests.items():
            s = r.state
            counts[s] += 1
            prev = self.rstate.get(rid, RequestState.UNREQUESTED)
            if s < prev:
                raise InvariantViolation(f"request {rid} went back {prev.name}->{s.name}")
            if s == RequestState.UNREQUESTED or r.request_time > now + 1e-9:
                raise InvariantViolation(f"request {rid} activated before its time")
            if (r.pickup_time is not None) != (s >= RequestState.IN_VEHICLE):
                raise InvariantViolation(f"request {rid}: pickup_time/state mismatch")
            if (r.dropoff_time is not None) != (s == RequestState.SERVED):
                raise InvariantViolation(f"request {rid}: dropoff_time/state mismatch")
            if r.pickup_time is not None and r.pickup_time < r.request_time - 1e-9:
                raise InvariantViolation(f"request {rid} picked up before request")
            if s in (RequestState.ASSIGNED, RequestState.IN_VEHICLE) and rid not in holders:
                raise InvariantViolation(f"request {rid} in {s.name} without a vehicle")
            if s == RequestState.UNASSIGNED and rid not in world.unassigned:
                raise InvariantViolation(f"request {rid} missing from the unassigned pool")
            self.rstate[rid] = s
        if counts[1] != len(world.unassigned) or counts[2] != world.n_assigned:
            raise InvariantViolation("request subset bookkeeping out of sync")
        if sum(counts[1:]) != len(world.requests):
            raise InvariantViolation("request subsets not exhaustive")
        self.checks += 1

    def check_dispatch(self, action, world: SimWorld, dispatch) -> None:
        """Row-stochastic action and, per origin zone, no more moves than idle vehicles."""
        a = np.asarray(action, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or (a < 0).any() or (a > 1).any() \
                or np.abs(a.sum(axis=1) - 1.0).max() > 1e-9:
            raise InvariantViolation("repositioning action is not row-stochastic")
        idle = np.zeros(a.shape[0], dtype=int)
        for v in world.vehicles:
            if v.state == IDLE:
                idle[zone_of(v.position, world.region)] += 1
        moved = np.zeros_like(idle)
        for vid, j in dispatch:
            v = world.vehicles[vid]
            if v.state != IDLE:
                raise InvariantViolation(f"dispatch of non-idle vehicle {vid}")
            i = zone_of(v.position, world.region)
            if i == j:
                raise InvariantViolation(f"vehicle {vid} dispatched to its own zone")
            moved[i] += 1
        if (moved > idle).any():
            raise InvariantViolation("more vehicles dispatched than idle in a zone")


# -- episodes ---------------------------------------------------------------

@dataclass
class EpisodeTrace:
    config: dict
    seed: int
    window: tuple
    region: dict
    mdp: list
    # one row per simulation step: unassigned, assigned, served
    tallies: np.ndarray
    requests: list
    vehicles: list
    events: list
    n_unactivated: int
    weights: tuple = (0.5, 0.5)

    @property
    def step_seconds(self) -> float:
        return float(self.config["step"])

    @property
    def reward_count(self) -> str:
        return self.config.get("reward_count", "unassigned")

    def waiting_counts(self) -> np.ndarray:
        if len(self.tallies) == 0:
            return np.zeros(0)
        w = self.tallies[:, 0].astype(float)
        if self.reward_count == "waiting":
            w = w + self.tallies[:, 1]
        return w

    def reward_tallies(self) -> tuple[float, int, int]:
        """(total wait W, served S, activated requests n) as seen by the reward."""
        served = self.tallies[:, 2] if len(self.tallies) else np.zeros(0)
        W = self.step_seconds * float((self.waiting_counts() + served).sum())
        return W, int(served.sum()), len(self.requests)

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.mdp]

    def to_dict(self, include_states: bool = True) -> dict:
        mdp_rows = []
        for r in self.mdp:
            row = {"time": r.time, "waiting": r.waiting, "served": r.served,
                   "n_steps": r.n_steps, "reward": r.reward, "logp": r.logp,
                   "action": None if r.action is None else np.asarray(r.action).tolist()}
            if include_states:
                row["features"] = r.state.node_features.tolist()
            mdp_rows.append(row)
        return {
            "version": TRACE_VERSION, "config": self.config, "seed": self.seed,
            "window": list(self.window), "region": self.region,
            "weights": list(self.weights),
            "adjacency": self.mdp[0].state.adjacency.tolist() if self.mdp else None,
            "q": self.mdp[0].state.q if self.mdp else None,
            "forecast_len": self.mdp[0].state.forecast_len if self.mdp else 0,
            "mdp": mdp_rows,
            "tallies": np.asarray(self.tallies).astype(int).tolist(),
            "requests": self.requests, "vehicles": self.vehicles,
            "events": [list(e) for e in self.events],
            "n_unactivated": self.n_unactivated,
        }

    def save(self, path, include_states: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_states), sort_keys=True,
                                         allow_nan=True))

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeTrace":
        if d.get("version") != TRACE_VERSION:
            raise ValueError(f"unsupported trace version {d.get('version')}")
        adj = np.asarray(d["adjacency"]) if d.get("adjacency") is not None else None
        recs = []
        for r in d["mdp"]:
            feats = np.asarray(r.get("features", []), dtype=float)
            st = mdp.ZoneGraph(feats, adj, d.get("q") or 0, d.get("forecast_len", 0))
            recs.append(mdp.MdpStepRecord(r["time"], st,
                                          None if r["action"] is None else np.asarray(r["action"]),
                                          r["logp"], r["waiting"], r["served"], r["n_steps"],
                                          r["reward"]))
        return cls(d["config"], d["seed"], tuple(d["window"]), d["region"], recs,
                   np.asarray(d["tallies"], dtype=np.int64).reshape(-1, 3), d["requests"],
                   d["vehicles"], [SimEvent(*e) for e in d["events"]], d["n_unactivated"],
                   tuple(d.get("weights", (0.5, 0.5))))

    @classmethod
    def load(cls, path) -> "EpisodeTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


class NoRepositioning:
    """Baseline: never moves idle vehicles."""
    needs_state = False

    def decide(self, state, rng):
        return None, None


class FixedAction:
    """Applies the same row-stochastic matrix at every decision."""
    needs_state = False

    def __init__(self, matrix):
        self.matrix = mdp.RepositionAction(matrix).matrix

    def decide(self, state, rng):
        return self.matrix, None


def run_episode(world: SimWorld, config: Optional[SimConfig] = None,
                assignment="s1", policy=None, weights: Optional[mdp.RewardWeights] = None,
                seed: int = 0, checker: Optional[InvariantChecker] = None) -> EpisodeTrace:
    """Step ``world`` to its horizon, recording one MDP tuple per repositioning instant.

    ``policy`` exposes ``decide(state, rng) -> (matrix or None, logp or None)``.
    The reward of each tuple sums the per-step rewards until the next decision.
    """
    cfg = config or world.config
    assign = STRATEGIES[assignment] if isinstance(assignment, str) else assignment
    policy = policy or NoRepositioning()
    weights = weights or mdp.RewardWeights()
    rng = np.random.default_rng(seed)
    history = mdp.HistoryBuffer(world.region.n_zones, cfg.repositioning_interval,
                                world.clock.start)
    records: list[mdp.MdpStepRecord] = []

    def reposition(w: SimWorld):
        state = mdp.build_state(w, cfg.q, history, cfg.forecast_horizon)
        action, logp = policy.decide(state, rng)
        records.append(mdp.MdpStepRecord(w.clock.now, state, action, logp))
        if action is None:
            return []
        dispatch = mdp.action_to_dispatch(action, w)
        if checker is not None:
            checker.check_dispatch(action, w, dispatch)
        return dispatch

    tallies = []
    waiting_mode = cfg.reward_count == "waiting"
    while not world.clock.done:
        tally = step(world, cfg, assign, reposition)
        if checker is not None:
            checker.check(world)
        tallies.append(tally)
        rec = records[-1]
        rec.waiting += tally.unassigned + (tally.assigned if waiting_mode else 0)
        rec.served += tally.served
        rec.n_steps += 1
    for rec in records:
        rec.reward = mdp.reward((rec.waiting, rec.served), weights, cfg.step)

    reqs = [[r.id, r.request_time, r.origin.x, r.origin.y, r.destination.x, r.destination.y,
             int(r.state), r.pickup_time, r.dropoff_time, r.origin_zone]
            for r in world.requests.values()]
    vehs = [[v.id, v.odometer_loaded, v.odometer_pickup, v.odometer_reposition,
             v.distance_moved] for v in world.vehicles]
    return EpisodeTrace(
        config=asdict(cfg), seed=seed, window=(world.clock.start, world.clock.horizon_end),
        region=world.region.to_dict(), mdp=records,
        tallies=np.asarray(tallies, dtype=np.int64).reshape(-1, 3), requests=reqs,
        vehicles=vehs, events=list(world.events),
        n_unactivated=len(world.stream) - world.cursor,
        weights=(weights.omega, weights.sigma))


REQUEST_COLUMNS = ("id", "request_time", "ox", "oy", "dx", "dy", "state",
                   "pickup_time", "dropoff_time", "origin_zone")
VEHICLE_COLUMNS = ("id", "loaded", "pickup", "reposition", "distance_moved")


def write_events_jsonl(events, path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e._asdict() if hasattr(e, "_asdict") else
                                dict(zip(SimEvent._fields, e)), allow_nan=True) + "\n")
