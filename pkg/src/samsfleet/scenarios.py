"""Scenario configuration: region, demand source, simulation and training settings.

A scenario file is JSON or YAML validated against ``SCENARIO_SCHEMA``; unknown
keys are rejected. ``tableIV/1`` .. ``tableIV/8`` are built-in presets over the
Manhattan-style 16-zone region (they need the trip CSV under the data root);
``toy2`` and ``imbalance4`` are synthetic desk-scale scenarios.
"""
from __future__ import annotations

import copy
import datetime as dt
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import yaml

from . import demand as dm
from .domain import ConfigError, ServiceRegion
from .mdp import RewardWeights
from .sim import EpisodeTrace, SimConfig, init_world, run_episode

DATA_ROOT_ENV = "SAMSFLEET_DATA"

_num = {"type": "number"}
_int = {"type": "integer"}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "samsfleet scenario",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "preset": {"type": "string"},
        "region": {
            "type": "object", "additionalProperties": False,
            "required": ["width", "height", "n_cols", "n_rows"],
            "properties": {
                "width": _num, "height": _num, "n_cols": _int, "n_rows": _int,
                "origin_lonlat": {"type": ["array", "null"], "items": _num},
                "centroids": {"type": ["array", "string", "null"]},
            },
        },
        "demand": {
            "type": "object", "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["synthetic", "csv"]},
                "rates": {"type": "array", "items": _num},
                "od_matrix": {"type": "array", "items": {"type": "array", "items": _num}},
                "path": {"type": "string"},
                "demand_fraction": _num,
                "horizon_origin": {"type": "string"},
                "period": {"enum": ["am_peak", "full_day"]},
                "days": {"enum": ["weekday", "weekend", "all"]},
            },
        },
        "window": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "sim": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "vehicle_speed": _num, "dropoff_dwell": _num, "pickup_dwell": _num,
                "step": _num, "fleet_size": _int, "assignment_interval": _num,
                "repositioning_interval": _num,
                "initial_placement": {"enum": ["uniform_random", "demand_proportional"]},
                "alpha": {"type": ["number", "null"]}, "q": _int,
                "reward_count": {"enum": ["unassigned", "waiting"]},
                "forecast_horizon": _int,
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "gamma": _num, "actor_lr": _num, "critic_lr": _num, "entropy_coef": _num,
                "episodes": _int, "workers": _int, "processes": _int, "seed": _int,
                "eval_mode": {"enum": ["sample", "mean"]}, "eval_every": _int,
                "eval_seeds": _int, "hidden": _int, "tau": _num,
                "discount_score": {"type": "boolean"}, "calibration_episodes": _int,
                "checkpoint_every": _int, "time_feature": {"type": "boolean"},
                "grad_clip": {"type": ["number", "null"]},
            },
        },
        "assignment": {"enum": ["s1", "s2"]},
        "agent": {"enum": ["isr", "egr", "baseline_none"]},
        "weights": {"type": ["array", "null"], "items": _num},
        "seeds": {"type": "array", "items": _int},
        "placement_weights": {"type": ["array", "null"], "items": _num},
        "prediction_horizon_s": _num,
    },
}

PERIODS = {"am_peak": (5 * 3600.0, 13 * 3600.0), "full_day": (3 * 3600.0, 24 * 3600.0)}

# Rectangle around Manhattan split into 2 x 8 sub-areas of roughly 2.3 x 2.5 km.
NYC16_REGION = {"width": 4600.0, "height": 20000.0, "n_cols": 2, "n_rows": 8,
                "origin_lonlat": [-74.020, 40.700], "centroids": "demand"}


def _table_iv(period: str, days: str, assignment: str) -> dict:
    return {
        "region": copy.deepcopy(NYC16_REGION),
        "demand": {"source": "csv", "path": "yellow_tripdata_2016-04.csv",
                   "demand_fraction": 0.1, "period": period, "days": days,
                   "horizon_origin": "2016-04-01T00:00:00"},
        "sim": {"fleet_size": 600},
        "assignment": assignment,
        "agent": "isr",
    }


PRESETS: dict[str, dict] = {
    f"tableIV/{i + 1}": _table_iv(p, d, a)
    for i, (p, d, a) in enumerate(
        (p, d, a) for p in ("am_peak", "full_day") for d in ("weekday", "weekend")
        for a in ("s1", "s2"))
}

# Two side-by-side zones; every trip starts in zone 1 and ends in zone 0,
# while the fleet starts in zone 0.
PRESETS["toy2"] = {
    "region": {"width": 4000.0, "height": 2000.0, "n_cols": 2, "n_rows": 1},
    "demand": {"source": "synthetic", "rates": [0.0, 12.0],
               "od_matrix": [[1.0, 0.0], [1.0, 0.0]]},
    "window": [0.0, 7200.0],
    "sim": {"fleet_size": 8, "initial_placement": "demand_proportional",
            "reward_count": "waiting"},
    "train": {"actor_lr": 3e-3, "critic_lr": 3e-3, "calibration_episodes": 4},
    "placement_weights": [1.0, 0.0],
    "assignment": "s1",
    "agent": "isr",
}

# 2 x 2 zones, stationary imbalance: most trips start in zone 0 and end in zone 3.
PRESETS["imbalance4"] = {
    "region": {"width": 4000.0, "height": 4000.0, "n_cols": 2, "n_rows": 2},
    "demand": {"source": "synthetic", "rates": [30.0, 4.0, 4.0, 2.0],
               "od_matrix": [[0.1, 0.1, 0.1, 0.7], [0.25, 0.25, 0.25, 0.25],
                             [0.25, 0.25, 0.25, 0.25], [0.25, 0.25, 0.25, 0.25]]},
    "window": [0.0, 7200.0],
    "sim": {"fleet_size": 20, "reward_count": "waiting"},
    "train": {"actor_lr": 3e-3, "critic_lr": 3e-3, "calibration_episodes": 4},
    "assignment": "s1",
    "agent": "isr",
}


@dataclass
class TrainConfig:
    gamma: float = 0.99
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    entropy_coef: float = 0.0
    episodes: int = 500
    workers: int = 8
    processes: int = 1
    seed: int = 0
    eval_mode: str = "mean"
    eval_every: int = 10
    eval_seeds: int = 10
    hidden: int = 32
    tau: float = 0.5
    discount_score: bool = True
    calibration_episodes: int = 10
    checkpoint_every: int = 10
    time_feature: bool = True
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.workers < 1 or self.episodes < 0:
            raise ConfigError("workers must be >= 1 and episodes >= 0")
        if self.eval_mode not in ("sample", "mean"):
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}")


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def episode_seeds(seed: int) -> tuple[int, int, int]:
    """(demand, placement, policy) seeds derived from one episode seed."""
    ss = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(s.generate_state(1)[0]) for s in ss)


@dataclass
class Scenario:
    """Everything needed to roll out an episode for a given seed."""
    name: str
    region: ServiceRegion
    sim: SimConfig
    assignment: str = "s1"
    agent: str = "isr"
    window: tuple = (0.0, 7200.0)
    rates: Optional[list] = None
    od_matrix: Optional[list] = None
    records: Optional[list] = None
    demand_fraction: float = 1.0
    days: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: Optional[RewardWeights] = None
    initial_weights: Optional[list] = None
    raw: dict = field(default_factory=dict)

    def stream(self, seed: int) -> dm.DemandStream:
        dseed = episode_seeds(seed)[0]
        if self.records is None:
            return dm.synth_poisson(self.rates, self.od_matrix, self.window, dseed, self.region)
        day = self.days[seed % len(self.days)] if self.days else 0
        start, end = self.window
        off = day * 86400.0
        return dm.sample_stream(self.records, self.demand_fraction, (off + start, off + end), dseed)

    def placement_weights(self):
        if self.initial_weights is not None:
            return np.asarray(self.initial_weights, float)
        if self.rates is not None:
            return np.asarray(self.rates, float)
        return None

    def make_world(self, seed: int, log_events: bool = True):
        _, pseed, _ = episode_seeds(seed)
        s = self.stream(seed)
        start, end = s.window
        return init_world(self.sim, self.region, s, pseed, horizon_end=end,
                          placement_weights=self.placement_weights(), log_events=log_events)

    def run(self, policy=None, seed: int = 0, weights: Optional[RewardWeights] = None,
            log_events: bool = True, checker_cls=None) -> EpisodeTrace:
        world = self.make_world(seed, log_events)
        checker = checker_cls(world) if checker_cls else None
        return run_episode(world, self.sim, self.assignment, policy,
                           weights or self.weights, seed=episode_seeds(seed)[2], checker=checker)

    def manifest(self) -> dict:
        d = copy.deepcopy(self.raw)
        d["sim"] = asdict(self.sim)
        d["train"] = asdict(self.train)
        d["assignment"] = self.assignment
        d["agent"] = self.agent
        d["window"] = list(self.window)
        d["region"] = self.region.to_dict()
        d["weights"] = [self.weights.omega, self.weights.sigma] if self.weights else None
        return d


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(doc: dict) -> dict:
    """Expand a ``preset`` reference and validate against the schema."""
    jsonschema.validate(doc, SCENARIO_SCHEMA)
    if "preset" in doc:
        if doc["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {doc['preset']!r}")
        doc = _deep_merge(PRESETS[doc["preset"]], {k: v for k, v in doc.items() if k != "preset"})
        doc.setdefault("name", doc.get("name") or "preset")
    jsonschema.validate(doc, SCENARIO_SCHEMA)
    return doc


def load_document(path_or_preset: str) -> dict:
    if path_or_preset in PRESETS:
        return {"preset": path_or_preset, "name": path_or_preset}
    text = Path(path_or_preset).read_text()
    if path_or_preset.endswith((".yaml", ".yml")):
        return yaml.safe_load(text) or {}
    return json.loads(text)


def build(doc: dict, records: Optional[list] = None) -> Scenario:
    """Construct a Scenario from a (possibly preset-referencing) document."""
    try:
        doc = resolve(doc)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"scenario schema violation: {exc.message}") from exc
    reg_doc = dict(doc["region"])
    cent = reg_doc.pop("centroids", None)
    region = ServiceRegion.from_dict({**reg_doc, "centroids": None})
    sim = SimConfig(**doc.get("sim", {}))
    train = TrainConfig(**doc.get("train", {}))
    dem = doc["demand"]
    sc = Scenario(name=doc.get("name", "scenario"), region=region, sim=sim,
                  assignment=doc.get("assignment", "s1"), agent=doc.get("agent", "isr"),
                  train=train, initial_weights=doc.get("placement_weights"), raw=doc)
    if doc.get("weights"):
        sc.weights = RewardWeights(*doc["weights"])
    if dem["source"] == "synthetic":
        n = region.n_zones
        sc.rates = list(dem.get("rates", [0.0] * n))
        sc.od_matrix = dem.get("od_matrix") or (np.full((n, n), 1.0 / n)).tolist()
        sc.window = tuple(doc.get("window", (0.0, 7200.0)))
    else:
        if records is None:
            path = Path(dem["path"])
            if not path.is_absolute():
                path = data_root() / path
            origin = dt.datetime.fromisoformat(dem["horizon_origin"]) if "horizon_origin" in dem else None
            records, _ = dm.ingest(path, region, origin)
        records = dm.filter_days(records, dem.get("days", "all"))
        sc.records = records
        sc.demand_fraction = float(dem.get("demand_fraction", 1.0))
        sc.window = tuple(doc.get("window") or PERIODS[dem.get("period", "am_peak")])
        sc.days = sorted({int(r.t // 86400) for r in records})
    if cent == "demand" and sc.records:
        sc.region = region.with_centroids(dm.demand_centroids(sc.records, region))
    elif isinstance(cent, list) and cent:
        sc.region = region.with_centroids(cent)
    if doc.get("prediction_horizon_s") and sc.agent == "egr":
        sc.sim.forecast_horizon = int(round(doc["prediction_horizon_s"] / sc.sim.repositioning_interval))
    elif sc.agent == "egr" and sc.sim.forecast_horizon == 0:
        # 90-minute horizon in repositioning intervals
        sc.sim.forecast_horizon = int(round(5400.0 / sc.sim.repositioning_interval))
    if sc.agent != "egr" and sc.sim.forecast_horizon:
        raise ConfigError("forecast channel is only available to the egr agent")
    return sc


def load(path_or_preset: str, overrides: Optional[dict] = None) -> Scenario:
    doc = load_document(path_or_preset)
    if overrides:
        doc = _deep_merge(resolve(doc), overrides)
    return build(doc)
