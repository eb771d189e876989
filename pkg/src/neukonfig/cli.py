"""Command-line front end: plan tables, experiment runs, sweeps, verification.

Subcommands:

``plan``
    Print the per-split latency table for a profile under given conditions.
``run``
    Run one experiment (simulated or live) and write ``events.jsonl``,
    ``summary.csv``, and ``manifest.json`` into the output directory.
``sweep``
    Run a stress grid and write ``sweep.csv`` plus a manifest.
``verify``
    Re-derive the summary from the raw event log and compare byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Config files
are JSON; see ``ExperimentConfig.from_dict`` for the schema and the README
for examples.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__
from .planner import NetworkConditions, PlannerError, estimate_latency, optimal_split
from .profiles import ProfileError, resolve_profile
from .sim import (
    ExperimentConfig,
    MetricsLog,
    SimError,
    SweepGrid,
    run_experiment,
    summarize,
    sweep,
)
from .strategies import STRATEGY_NAMES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SUMMARY_COLUMNS = (
    "transition",
    "time_ms",
    "strategy",
    "downtime_kind",
    "downtime_ms",
    "frames_dropped",
    "frames_degraded",
    "memory_initial_mb",
    "memory_additional_mb",
    "memory_total_mb",
    "memory_transient",
)

SWEEP_COLUMNS = (
    "cpu_pct",
    "mem_pct",
    "fps",
    "strategy",
    "bandwidth_change",
    "downtime_ms",
    "drops",
    "degraded",
    "infeasible",
)


class ConfigurationError(Exception):
    """Bad flags or config file contents; exits with code 2."""


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, columns: tuple[str, ...], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])


def _render_csv(columns: tuple[str, ...], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(col)) for col in columns])
    return buf.getvalue()


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{what} {path} must hold a JSON object")
    return doc


def _load_experiment(args) -> tuple[ExperimentConfig, dict]:
    doc = _load_json(args.config, "config file")
    if "artifact_version" in doc and "config" in doc:
        doc = dict(doc["config"])  # a manifest; rerun from its snapshot
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    try:
        config = ExperimentConfig.from_dict(doc)
    except (SimError, ProfileError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    if config.strategy not in STRATEGY_NAMES:
        raise ConfigurationError(
            f"config field 'strategy' is {config.strategy!r}; expected one of "
            f"{', '.join(STRATEGY_NAMES)}")
    return config, doc


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(outdir: str, mode: str, config: ExperimentConfig,
                    outputs: dict[str, str], started: str) -> str:
    manifest = {
        "artifact_version": __version__,
        "mode": mode,
        "seed": config.seed,
        "config": config.to_dict(),
        "outputs": outputs,
        "started_at": started,
        "finished_at": _now_iso(),
    }
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# -- plan ---------------------------------------------------------------------


def cmd_plan(args) -> int:
    profile = resolve_profile(args.profile)
    conditions = NetworkConditions(
        bandwidth=args.bandwidth,
        latency=args.latency,
        cpu_availability=args.cpu,
    )
    chosen = optimal_split(profile, conditions)
    print(f"profile {profile.name}: {len(profile.units)} units, "
          f"input {profile.input_size:g} Mb")
    print(f"conditions: {conditions.bandwidth:g} Mbps, {conditions.latency:g} ms "
          f"latency, cpu {conditions.cpu_availability * 100:g}%")
    print(f"{'':2}{'split':>5} {'t_edge':>10} {'t_transfer':>11} "
          f"{'t_cloud':>10} {'t_total':>10}")
    for split in range(len(profile.units) + 1):
        b = estimate_latency(profile, split, conditions)
        marker = "* " if split == chosen.split else "  "
        print(f"{marker}{split:>5} {b.t_edge:>10.3f} {b.t_transfer:>11.3f} "
              f"{b.t_cloud:>10.3f} {b.t_total:>10.3f}")
    print(f"chosen split: {chosen.split} "
          f"(t_total {chosen.breakdown.t_total:.3f} ms)")
    return EXIT_OK


# -- run ----------------------------------------------------------------------


def _sim_summary_rows(summary: dict) -> list[dict]:
    rows = []
    for idx, tr in enumerate(summary["transitions"], start=1):
        rows.append({"transition": idx, **tr})
    return rows


def _live_summary_rows(replies: list[dict]) -> list[dict]:
    rows = []
    for idx, doc in enumerate(replies, start=1):
        initial = doc["memory_initial_tenths"] / 10
        additional = doc["memory_additional_tenths"] / 10
        rows.append({
            "transition": idx,
            "time_ms": doc["window_end_us"] / 1000,
            "strategy": doc["strategy"],
            "downtime_kind": doc["downtime_kind"],
            "downtime_ms": (doc["window_end_us"] - doc["window_start_us"]) / 1000,
            "frames_dropped": doc["frames_dropped"],
            "frames_degraded": doc["frames_degraded"],
            "memory_initial_mb": initial,
            "memory_additional_mb": additional,
            "memory_total_mb": initial + additional,
            "memory_transient": bool(doc["memory_transient"]),
        })
    return rows


def _trace_bandwidth_change(config: ExperimentConfig) -> tuple[float, float]:
    bandwidths = []
    for _, cond in config.trace:
        if not bandwidths or bandwidths[-1] != cond.bandwidth:
            bandwidths.append(cond.bandwidth)
    if len(bandwidths) != 2:
        raise ConfigurationError(
            "live mode runs exactly one bandwidth change; the trace must move "
            f"between two bandwidth values, got {bandwidths}")
    return bandwidths[0], bandwidths[1]


def _run_live_once(config: ExperimentConfig, settle_s: float = 1.0):
    """Bring up the role processes, flip the bandwidth once, measure."""
    from .live import LiveConfig, start_roles

    if not isinstance(config.profile, str):
        raise ConfigurationError(
            "live mode loads profiles by name in every role process; "
            "inline profiles only work in sim mode")
    base, alt = _trace_bandwidth_change(config)
    standby_mode = "worker" if config.strategy == "dyn_A_case1" else "lane"
    live_config = LiveConfig(
        profile=config.profile,
        fps=config.fps,
        queue_capacity=config.queue_capacity,
        bandwidth_mbps=base,
        alt_bandwidth_mbps=alt,
        latency_ms=config.trace[0][1].latency,
        container_mb=config.container_mb,
        pipeline_mb=config.pipeline_mb,
        standby_mode=standby_mode,
    )
    with start_roles(live_config) as harness:
        time.sleep(settle_s)
        harness.run_transition(config.strategy, config.timing)
        time.sleep(settle_s)
        events = harness.events()
        replies = list(harness.transition_replies)
    return events, replies


def _events_jsonl_live(events: list[dict], replies: list[dict]) -> str:
    lines = [json.dumps(doc, sort_keys=True, separators=(",", ":"))
             for doc in events]
    lines.extend(json.dumps({"event": "transition_done", **doc},
                            sort_keys=True, separators=(",", ":"))
                 for doc in replies)
    return "".join(line + "\n" for line in lines)


def cmd_run(args) -> int:
    config, _ = _load_experiment(args)
    os.makedirs(args.out, exist_ok=True)
    started = _now_iso()
    events_path = os.path.join(args.out, "events.jsonl")
    summary_path = os.path.join(args.out, "summary.csv")

    if args.mode == "sim":
        log = run_experiment(config)
        with open(events_path, "w", encoding="utf-8") as fh:
            fh.write(log.to_jsonl())
        rows = _sim_summary_rows(summarize(log))
    else:
        events, replies = _run_live_once(config)
        with open(events_path, "w", encoding="utf-8") as fh:
            fh.write(_events_jsonl_live(events, replies))
        rows = _live_summary_rows(replies)

    _write_csv(summary_path, SUMMARY_COLUMNS, rows)
    _write_manifest(args.out, args.mode, config,
                    {"events": "events.jsonl", "summary": "summary.csv"}, started)
    for row in rows:
        print(f"transition {row['transition']}: {row['strategy']} "
              f"downtime {row['downtime_ms']:.2f} ms "
              f"({row['downtime_kind']}), {row['frames_dropped']} dropped, "
              f"{row['frames_degraded']} degraded, "
              f"memory {row['memory_total_mb']:.1f} MB")
    if not rows:
        print("no transitions occurred")
    print(f"wrote {events_path}, {summary_path}")
    return EXIT_OK


# -- sweep --------------------------------------------------------------------


def _sweep_rows(cells) -> list[dict]:
    rows = []
    for cell in cells:
        rows.append({
            "cpu_pct": cell.cpu_pct,
            "mem_pct": cell.mem_pct,
            "fps": cell.fps,
            "strategy": cell.strategy,
            "bandwidth_change": cell.bandwidth_change,
            "downtime_ms": cell.downtime_ms,
            "drops": cell.drops,
            "degraded": cell.degraded,
            "infeasible": cell.infeasible,
        })
    return rows


def cmd_sweep(args) -> int:
    config, doc = _load_experiment(args)
    if args.mode != "sim":
        raise ConfigurationError(
            "sweeps run in sim mode; live mode cannot throttle the host's cpu "
            "or memory availability")
    try:
        grid = SweepGrid.from_dict(doc.get("grid", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad sweep grid: {exc}") from exc
    os.makedirs(args.out, exist_ok=True)
    started = _now_iso()
    cells = sweep(config, grid)
    rows = _sweep_rows(cells)
    sweep_path = os.path.join(args.out, "sweep.csv")
    _write_csv(sweep_path, SWEEP_COLUMNS, rows)
    _write_manifest(args.out, args.mode, config, {"sweep": "sweep.csv"}, started)
    feasible = sum(1 for row in rows if not row["infeasible"])
    print(f"{len(rows)} cells ({feasible} feasible), wrote {sweep_path}")
    return EXIT_OK


# -- verify -------------------------------------------------------------------


def cmd_verify(args) -> int:
    manifest_path = os.path.join(args.out, "manifest.json")
    manifest = _load_json(manifest_path, "manifest")
    outputs = manifest.get("outputs", {})
    if "summary" not in outputs or "events" not in outputs:
        raise ConfigurationError(
            f"manifest {manifest_path} does not reference an event log and "
            "summary (was this a sweep?)")
    events_path = os.path.join(args.out, outputs["events"])
    summary_path = os.path.join(args.out, outputs["summary"])

    if manifest.get("mode") == "sim":
        try:
            with open(events_path, encoding="utf-8") as fh:
                log = MetricsLog.from_jsonl(fh.read())
        except OSError as exc:
            raise ConfigurationError(f"cannot read event log: {exc}") from exc
        rows = _sim_summary_rows(summarize(log))
    else:
        try:
            with open(events_path, encoding="utf-8") as fh:
                docs = [json.loads(line) for line in fh if line.strip()]
        except OSError as exc:
            raise ConfigurationError(f"cannot read event log: {exc}") from exc
        replies = [doc for doc in docs if doc.get("event") == "transition_done"]
        rows = _live_summary_rows(replies)

    expected = _render_csv(SUMMARY_COLUMNS, rows)
    try:
        with open(summary_path, encoding="utf-8", newline="") as fh:
            actual = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read summary: {exc}") from exc
    if actual != expected:
        print("summary.csv does not match the event log:", file=sys.stderr)
        for got, want in zip(actual.splitlines(), expected.splitlines()):
            if got != want:
                print(f"  stored:     {got}", file=sys.stderr)
                print(f"  recomputed: {want}", file=sys.stderr)
                break
        return EXIT_RUNTIME
    print(f"{summary_path} matches the event log ({len(rows)} transitions)")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neukonfig",
        description="Partition planning and repartition-downtime experiments.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="print the per-split latency table")
    plan.add_argument("--profile", required=True,
                      help="bundled profile name or path to a profile file")
    plan.add_argument("--bandwidth", type=float, required=True, help="Mbps")
    plan.add_argument("--latency", type=float, default=0.0, help="one-way ms")
    plan.add_argument("--cpu", type=float, default=1.0,
                      help="edge cpu availability in (0, 1]")
    plan.set_defaults(func=cmd_plan)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config file")
    common.add_argument("--mode", choices=["sim", "live"], default="sim")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config's seed")

    run = sub.add_parser("run", parents=[common],
                         help="run one experiment and write its artifacts")
    run.set_defaults(func=cmd_run)

    swp = sub.add_parser("sweep", parents=[common],
                         help="run a stress grid and write sweep.csv")
    swp.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify",
                            help="recompute the summary from the event log")
    verify.add_argument("--out", required=True,
                        help="directory holding manifest.json")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProfileError, PlannerError, SimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: the run itself broke
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
