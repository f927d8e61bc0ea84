"""Command-line entry point: ``samsfleet {ingest,simulate,train,evaluate,report,assign}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime fault.
Every command that reads a scenario writes ``manifest.json`` into its output
directory; passing that file back as ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import yaml
from scipy import stats

from . import agent as ag
from . import assignment as asg
from . import demand as dm
from . import diffnet as dn
from . import scenarios as scn
from .domain import ConfigError, ServiceRegion
from .diffnet.checkpoint import CheckpointError
from .mdp import CalibrationError
from .metrics import (REPORT_FIELDS, compute_metrics, emit_report, emit_zone_heatmap, summarize,
                      zone_mean_waits)
from .sim import EpisodeTrace, InvariantChecker, NoRepositioning, write_events_jsonl

log = logging.getLogger("samsfleet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FAULT = 0, 2, 3, 4

REGION_PRESETS = {"nyc16": scn.NYC16_REGION}


# -- config assembly -----------------------------------------------------------

def _parse_value(text: str):
    return yaml.safe_load(text)


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def scenario_document(args) -> tuple[dict, dict]:
    """Merged scenario document and the run block of a reloaded manifest (if any)."""
    if args.config not in scn.PRESETS and not Path(args.config).is_file():
        raise ConfigError(f"no such scenario file or preset: {args.config}")
    doc = scn.load_document(args.config)
    run = {}
    if "scenario" in doc and "command" in doc:
        run = doc.get("run", {})
        doc = doc["scenario"]
    doc = scn.resolve(doc)
    over: dict = {}
    for flag, path in (("fleet_size", "sim.fleet_size"), ("assignment", "assignment"),
                       ("agent", "agent"), ("episodes", "train.episodes"),
                       ("workers", "train.workers"), ("processes", "train.processes"),
                       ("train_seed", "train.seed"), ("reward_count", "sim.reward_count")):
        v = getattr(args, flag, None)
        if v is not None:
            _set_path(over, path, v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(over, k.strip(), _parse_value(v))
    return scn._deep_merge(doc, over), run


def _write_manifest(out: Path, command: str, scenario: scn.Scenario, run: dict) -> None:
    manifest = {"command": command, "scenario": scenario.manifest(), "run": run}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _policy(spec: str, mode: str):
    if spec in ("baseline_none", "none"):
        return NoRepositioning()
    actor, _ = ag.load_actor(spec)
    return ag.ActorPolicy(actor, mode)


# -- commands ------------------------------------------------------------------

def cmd_ingest(args) -> int:
    reg = args.region
    if reg in REGION_PRESETS:
        rdoc = dict(REGION_PRESETS[reg])
    else:
        rdoc = json.loads(Path(reg).read_text())
    if isinstance(rdoc.get("centroids"), str):
        rdoc["centroids"] = None
    region = ServiceRegion.from_dict(rdoc)
    origin = dt.datetime.fromisoformat(args.horizon_origin) if args.horizon_origin else None
    records, report = dm.ingest(args.input, region, origin, strict=args.strict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trips.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "pickup_datetime", "dropoff_datetime", "px", "py", "dx", "dy",
                    "trip_distance", "passenger_count"])
        for r in records:
            w.writerow([repr(r.t), r.pickup_datetime.isoformat(), r.dropoff_datetime.isoformat(),
                        repr(r.pickup.x), repr(r.pickup.y), repr(r.dropoff.x), repr(r.dropoff.y),
                        repr(r.trip_distance), r.passenger_count])
    (out / "ingest_report.json").write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc, run = scenario_document(args)
    sc = scn.build(doc)
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    policy_spec = args.policy or run.get("policy") or "baseline_none"
    mode = args.mode or run.get("mode", "mean")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = {"seed": seed, "policy": policy_spec, "mode": mode}
    _write_manifest(out, "simulate", sc, run)
    checker = InvariantChecker if args.check else None
    trace = sc.run(_policy(policy_spec, mode), seed, log_events=args.events, checker_cls=checker)
    trace.save(out / "trace.json")
    if args.events:
        write_events_jsonl(trace.events, out / "events.jsonl")
    m = compute_metrics(trace)
    emit_report(m, out / "report.json")
    emit_report(m, out / "report.csv")
    emit_zone_heatmap(zone_mean_waits(m), trace.region, out / "wait_heatmap.svg")
    print(json.dumps(m.row(), sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    doc, run = scenario_document(args)
    sc = scn.build(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "train", sc, {"resume": args.resume})
    res = ag.train(sc, sc.train, out, resume=args.resume,
                   log=None if args.quiet else (lambda s: print(s, flush=True)))
    print(f"trained {res.episodes} episodes; checkpoint at {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def paired_stats(ref: list, other: list) -> dict:
    """Per-seed differences other - ref and a one-sided paired t-test (other < ref)."""
    a = np.asarray(ref, float)
    b = np.asarray(other, float)
    d = b - a
    out = {"differences": d.tolist(), "mean_difference": float(d.mean()) if d.size else None,
           "t_statistic": None, "p_value": None}
    if d.size > 1 and np.any(d != d[0]):
        r = stats.ttest_rel(b, a, alternative="less")
        out["t_statistic"], out["p_value"] = float(r.statistic), float(r.pvalue)
    return out


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = ag.heldout_seeds(args.seeds) if args.seed_base is None else \
        [args.seed_base + i for i in range(args.seeds)]
    grid, paired, manifests = [], [], {}
    for cfg in args.config_list:
        args.config = cfg
        doc, _ = scenario_document(args)
        sc = scn.build(doc)
        manifests[cfg] = sc.manifest()
        per_policy = {}
        for spec in args.policies:
            ms = ag.evaluate_policy(sc, _policy(spec, args.mode), seeds)
            per_policy[spec] = ms
            grid.append({"scenario": cfg, "policy": spec, **summarize(ms)})
        ref = args.policies[0]
        for spec in args.policies[1:]:
            pairs = [(r.mean_wait, o.mean_wait) for r, o in zip(per_policy[ref], per_policy[spec])
                     if r.mean_wait is not None and o.mean_wait is not None]
            paired.append({"scenario": cfg, "reference": ref, "policy": spec, "metric": "mean_wait",
                           **paired_stats([p[0] for p in pairs], [p[1] for p in pairs])})
    (out / "manifest.json").write_text(json.dumps(
        {"command": "evaluate", "scenarios": manifests,
         "run": {"policies": args.policies, "seeds": seeds, "mode": args.mode}},
        indent=2, sort_keys=True))
    (out / "comparison.json").write_text(json.dumps({"grid": grid, "paired": paired},
                                                    indent=2, sort_keys=True))
    cols = ["scenario", "policy"] + list(REPORT_FIELDS)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in grid:
            w.writerow(["" if row.get(c) is None else row[c] for c in cols])
    for row in grid:
        mw = row.get("mean_wait")
        print(f"{row['scenario']:>16} {row['policy']:>24} mean_wait="
              + ("n/a" if mw is None else f"{mw:.1f}"))
    return EXIT_OK


def cmd_report(args) -> int:
    trace = EpisodeTrace.load(args.trace)
    m = compute_metrics(trace)
    emit_report(m, args.out, args.format)
    if args.heatmap:
        emit_zone_heatmap(zone_mean_waits(m), trace.region, args.heatmap)
    return EXIT_OK


def cmd_assign(args) -> int:
    inst = asg.load_instance(args.instance)
    res = asg.STRATEGIES[args.strategy](inst)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any scenario field, e.g. sim.fleet_size=40")
    p.add_argument("--fleet-size", dest="fleet_size", type=int)
    p.add_argument("--assignment", choices=["s1", "s2"])
    p.add_argument("--agent", choices=["isr", "egr", "baseline_none"])
    p.add_argument("--reward-count", dest="reward_count", choices=["unassigned", "waiting"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="samsfleet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a trip CSV into a normalized store")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--region", required=True, help="region JSON file or 'nyc16'")
    p.add_argument("--out", required=True)
    p.add_argument("--horizon-origin")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("simulate", help="run one episode and write trace + report")
    p.add_argument("--config", required=True, help="scenario file, preset name or manifest")
    p.add_argument("--policy", help="baseline_none or a checkpoint path")
    p.add_argument("--mode", choices=["mean", "sample"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--events", action="store_true", help="also log the event stream")
    p.add_argument("--check", action="store_true", help="check invariants after every step")
    _scenario_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the repositioning agent")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--processes", type=int)
    p.add_argument("--seed", dest="train_seed", type=int)
    p.add_argument("--quiet", action="store_true")
    _scenario_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compare policies over seeded episodes")
    p.add_argument("--config", dest="config_list", nargs="+", required=True)
    p.add_argument("--policies", nargs="+", default=["baseline_none"])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed-base", type=int)
    p.add_argument("--mode", choices=["mean", "sample"], default="mean")
    p.add_argument("--out", required=True)
    _scenario_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="metrics report from a saved trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("--heatmap", help="also write an SVG wait heatmap")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("assign", help="solve one assignment instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--strategy", choices=sorted(asg.STRATEGIES), default="s2")
    p.set_defaults(func=cmd_assign)
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CalibrationError, jsonschema.ValidationError, json.JSONDecodeError,
            yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dm.SchemaError, dm.DataError, CheckpointError, dn.ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime fault
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
