"""Command-line front end: single runs, fleet-size sweeps, attack/resilience
experiments, risk curves, and scenario validation.

Exit codes: 0 on success, 2 for configuration or validation problems, 3 when
a run finished but recorded an invariant-violation incident. Diagnostics go
to stderr; results and file paths go to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .security import (ATTACK_KINDS, AttackSpec, DEFAULT_INTENSITY, RiskParams,
                       empirical_resilience, interference_peak_time,
                       sample_risk_trace)
from .simcore import ScenarioConfig, ScenarioError, load_scenario, run_simulation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCIDENT = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", metavar="PATH", default=None,
                        help="scenario file of 'key = value' lines")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="directory for report files")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the simulation seed")
    parser.add_argument("--set", dest="overrides", metavar="KEY=VALUE",
                        action="append", default=[],
                        help="override one scenario key; repeatable, applied "
                             "left to right")


def _load(args) -> ScenarioConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"sim.seed={args.seed}")
    return load_scenario(args.scenario, overrides)


def _print_run_summary(result) -> None:
    s = result.summary()
    con = s["consensus"]
    msg = s["messages"]
    lat = s["latency_ms"]["all"]
    print(f"blocks committed: {con['blocks_committed']}")
    print(f"transactions committed: {con['txs_committed']} "
          f"of {con['txs_submitted']} submitted "
          f"({con['mean_tps']:.2f} tx/s)")
    print(f"view changes: {con['view_changes']}  evictions: {con['evictions']}")
    ratio = msg["delivery_ratio"]
    print(f"messages delivered: {msg['delivered']} of {msg['sent']} "
          f"(ratio {ratio:.4f})" if ratio is not None else "no messages settled")
    if lat is not None:
        print(f"latency ms: mean {lat['mean']:.1f}  p95 {lat['p95']:.1f}  "
              f"p99 {lat['p99']:.1f}")
    if s["incidents"]:
        for line in s["incidents"]:
            print(f"incident: {line}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = _load(args)
    out_dir = Path(args.out) if args.out else None
    result = run_simulation(cfg, out_dir)
    _print_run_summary(result)
    if out_dir is not None:
        print(f"reports written to {out_dir}")
    return EXIT_INCIDENT if result.metrics.incidents else EXIT_OK


def cmd_sweep(args) -> int:
    try:
        sizes = [int(x) for x in args.nodes.split(",") if x.strip()]
    except ValueError:
        print(f"--nodes must be a comma-separated integer list, "
              f"got {args.nodes!r}", file=sys.stderr)
        return EXIT_CONFIG
    if not sizes:
        print("--nodes is empty", file=sys.stderr)
        return EXIT_CONFIG

    base = _load(args)
    base.duration_s = args.duration
    rows = []
    incidents = False
    for n in sizes:
        if n < 4:
            print(f"skipping fleet size {n}: consensus needs at least 4 nodes",
                  file=sys.stderr)
            continue
        cfg = replace(base, n_uavs=n, attacks=list(base.attacks),
                      obstacles=list(base.obstacles))
        sub = Path(args.out) / f"n{n}" if args.out else None
        result = run_simulation(cfg, sub)
        incidents = incidents or bool(result.metrics.incidents)
        s = result.summary()
        lat = s["latency_ms"]["all"]
        finality = result.metrics.finality_latencies_s(cfg.block_time_s)
        rows.append({
            "n_uavs": n,
            "mean_tps": s["consensus"]["mean_tps"],
            "latency_p95_ms": lat["p95"] if lat else None,
            "latency_mean_ms": lat["mean"] if lat else None,
            "finality_mean_ms": (
                1e3 * sum(finality) / len(finality) if finality else None
            ),
            "delivery_ratio": s["messages"]["delivery_ratio"],
            "view_changes": s["consensus"]["view_changes"],
        })
        fin = rows[-1]["finality_mean_ms"]
        ratio = rows[-1]["delivery_ratio"]
        print(f"n={n:5d}  tps={rows[-1]['mean_tps']:8.2f}  "
              f"finality={'%.0f ms' % fin if fin is not None else 'n/a'}  "
              f"delivery={'%.4f' % ratio if ratio is not None else 'n/a'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.json", "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"sweep table written to {out / 'sweep.json'}")
    return EXIT_INCIDENT if incidents else EXIT_OK


def cmd_attack(args) -> int:
    base = _load(args)
    if base.attacks:
        print("scenario already defines attacks; --attack adds another",
              file=sys.stderr)
    intensity = args.intensity if args.intensity is not None \
        else DEFAULT_INTENSITY[args.attack]
    try:
        spec = AttackSpec(kind=args.attack, start_s=args.start, stop_s=args.stop,
                          intensity=intensity,
                          targets=tuple(args.targets or ()))
    except ValueError as exc:
        print(f"bad attack: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    baseline_cfg = replace(base, attacks=[], obstacles=list(base.obstacles))
    attacked_cfg = replace(base, attacks=list(base.attacks) + [spec],
                           obstacles=list(base.obstacles))
    out = Path(args.out) if args.out else None
    baseline = run_simulation(baseline_cfg, out / "baseline" if out else None)
    attacked = run_simulation(attacked_cfg, out / "attacked" if out else None)

    b_tps = baseline.metrics.mean_tps(baseline_cfg.duration_s)
    a_tps = attacked.metrics.mean_tps(attacked_cfg.duration_s)
    try:
        resilience = empirical_resilience(b_tps, a_tps)
    except ValueError as exc:
        print(f"cannot score resilience: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"attack: {args.attack} [{args.start:.0f}s, {args.stop:.0f}s) "
          f"intensity {intensity}")
    print(f"throughput: baseline {b_tps:.2f} tx/s, under attack {a_tps:.2f} tx/s")
    print(f"resilience: {resilience:.4f}")
    print(f"evictions under attack: {len(attacked.evicted)}")
    if out is not None:
        with open(out / "resilience.json", "w", encoding="utf-8") as fh:
            json.dump({
                "attack": args.attack, "start_s": args.start, "stop_s": args.stop,
                "intensity": intensity, "baseline_tps": b_tps,
                "attacked_tps": a_tps, "resilience": resilience,
                "evictions": sorted(attacked.evicted),
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"resilience report written to {out / 'resilience.json'}")
    bad = baseline.metrics.incidents or attacked.metrics.incidents
    for line in list(baseline.metrics.incidents) + list(attacked.metrics.incidents):
        print(f"incident: {line}", file=sys.stderr)
    return EXIT_INCIDENT if bad else EXIT_OK


def cmd_risk(args) -> int:
    if args.t_max <= 0.0 or args.points < 2:
        print("--t-max must be positive and --points at least 2", file=sys.stderr)
        return EXIT_CONFIG
    params = RiskParams()
    times = [args.t_max * i / (args.points - 1) for i in range(args.points)]
    trace = sample_risk_trace(params, times)
    rows = list(zip(trace.times_s, trace.disaster, trace.stress,
                    trace.interference, trace.malicious, trace.aggregate,
                    trace.resilience))
    print(f"interference pulse peaks at t = {interference_peak_time(params):.3f}")
    worst = max(rows, key=lambda r: r[5])
    print(f"aggregate risk peaks near t = {worst[0]:.3f} at {worst[5]:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "risk.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_s", "disaster", "stress", "interference",
                             "malicious", "aggregate", "resilience"])
            for row in rows:
                writer.writerow([f"{x:.9g}" for x in row])
        print(f"risk curves written to {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(f"scenario ok: {cfg.n_uavs} UAVs for {cfg.duration_s:.0f} s "
          f"at dt {cfg.dt_s} s, seed {cfg.seed}")
    print(f"consensus: {min(cfg.n_delegates, cfg.n_uavs)} delegates, "
          f"{cfg.block_time_s} s blocks, epoch {cfg.epoch_blocks}")
    print(f"attacks: {len(cfg.attacks)}  obstacles: {len(cfg.obstacles)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uavnet",
        description="deterministic simulator of blockchain-coordinated UAV fleets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one simulation run")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat a run across fleet sizes")
    _add_common(p)
    p.add_argument("--nodes", default="10,50,100,200,500",
                   help="comma-separated fleet sizes")
    p.add_argument("--duration", type=float, default=150.0,
                   help="simulated seconds per sweep point")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", help="baseline vs attacked run with resilience score")
    _add_common(p)
    p.add_argument("--attack", required=True, choices=sorted(ATTACK_KINDS))
    p.add_argument("--start", type=float, default=60.0, help="attack start, seconds")
    p.add_argument("--stop", type=float, default=120.0, help="attack stop, seconds")
    p.add_argument("--intensity", type=float, default=None,
                   help="attack-specific intensity; defaults per kind")
    p.add_argument("--targets", type=int, nargs="*", default=None,
                   help="explicit victim node ids")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("risk", help="closed-form attack risk and resilience curves")
    p.add_argument("--out", metavar="DIR", default=None)
    p.add_argument("--t-max", type=float, default=10.0)
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("validate", help="check a scenario without running it")
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
