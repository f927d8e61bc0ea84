"""Request-to-vehicle assignment: FCFS nearest (S1) and optimal matching (S2)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .domain import Position, l1


@dataclass
class AssignmentInstance:
    # (request id, origin, elapsed wait in seconds)
    requests: list
    # (vehicle id, position)
    vehicles: list
    alpha: float = 5.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if len({r[0] for r in self.requests}) != len(self.requests):
            raise ValueError("duplicate request ids")
        if len({v[0] for v in self.vehicles}) != len(self.vehicles):
            raise ValueError("duplicate vehicle ids")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha,
                "requests": [[r, o.x, o.y, w] for r, o, w in self.requests],
                "vehicles": [[v, p.x, p.y] for v, p in self.vehicles]}

    @classmethod
    def from_dict(cls, d: dict) -> "AssignmentInstance":
        return cls([(int(r), Position(x, y), float(w)) for r, x, y, w in d["requests"]],
                   [(int(v), Position(x, y)) for v, x, y in d["vehicles"]],
                   float(d.get("alpha", 5.0)))


@dataclass
class AssignmentResult:
    matches: list = field(default_factory=list)  # (request id, vehicle id)
    objective_value: float = 0.0

    def to_dict(self) -> dict:
        return {"matches": [list(m) for m in self.matches],
                "objective_value": self.objective_value}


def objective(instance: AssignmentInstance, matches: Sequence[tuple[int, int]]) -> float:
    """Regime-dependent objective: distance minus alpha-weighted wait when
    requests outnumber vehicles, plain distance otherwise."""
    req = {r: (o, w) for r, o, w in instance.requests}
    veh = dict(instance.vehicles)
    wait_bonus = len(instance.requests) > len(instance.vehicles)
    total = 0.0
    for r, v in matches:
        o, w = req[r]
        total += l1(o, veh[v]) - (instance.alpha * w if wait_bonus else 0.0)
    return total


def min_cost_matching(cost: Sequence[Sequence[float]]) -> list[int]:
    """Rectangular min-cost assignment for an n x m matrix with n <= m.

    Every row is matched to a distinct column; returns the column per row.
    Shortest augmenting paths with row/column potentials, so negative costs
    are fine.
    """
    n = len(cost)
    m = len(cost[0]) if n else 0
    if n > m:
        raise ValueError("need rows <= cols")
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)      # p[j]: row (1-based) matched to column j, 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def assign_s2(instance: AssignmentInstance) -> AssignmentResult:
    reqs = sorted(instance.requests, key=lambda r: r[0])
    vehs = sorted(instance.vehicles, key=lambda v: v[0])
    if not reqs or not vehs:
        return AssignmentResult()
    if len(reqs) > len(vehs):
        # every vehicle matched; older requests earn a wait bonus
        cost = [[l1(o, p) - instance.alpha * w for _, o, w in reqs] for _, p in vehs]
        cols = min_cost_matching(cost)
        matches = [(reqs[c][0], vehs[i][0]) for i, c in enumerate(cols)]
    else:
        cost = [[l1(o, p) for _, p in vehs] for _, o, _ in reqs]
        cols = min_cost_matching(cost)
        matches = [(reqs[i][0], vehs[c][0]) for i, c in enumerate(cols)]
    matches.sort()
    return AssignmentResult(matches, objective(instance, matches))


def assign_s1(instance: AssignmentInstance) -> AssignmentResult:
    """First-come first-served: oldest request grabs the nearest free vehicle."""
    order = sorted(instance.requests, key=lambda r: (-r[2], r[0]))
    free = sorted(instance.vehicles, key=lambda v: v[0])
    matches = []
    for rid, o, _ in order:
        if not free:
            break
        best = min(range(len(free)), key=lambda k: (l1(o, free[k][1]), free[k][0]))
        matches.append((rid, free.pop(best)[0]))
    return AssignmentResult(matches, objective(instance, matches))


STRATEGIES = {"s1": assign_s1, "s2": assign_s2}


def load_instance(path) -> AssignmentInstance:
    with open(path) as fh:
        return AssignmentInstance.from_dict(json.load(fh))
