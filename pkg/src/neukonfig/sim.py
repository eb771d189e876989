"""Deterministic discrete-event harness for repartitioning experiments.

Virtual time is an integer count of microseconds. Events are dispatched in
(time, insertion order), so two runs of the same configuration produce
byte-identical logs. Frames occupy a pipeline exclusively for the total
latency of its current plan re-costed under the conditions in force when
service starts; a paused pipeline freezes its in-flight frame and finishes it
after resuming.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .pipeline import (
    DEFAULT_CONTAINER_MB,
    DEFAULT_PIPELINE_MB,
    DEFAULT_TIMING,
    Deployment,
    Frame,
    Pipeline,
    PipelineRole,
    Placement,
    TimingParams,
)
from .planner import NetworkConditions, estimate_latency, optimal_split, should_repartition
from .profiles import DnnProfile, resolve_profile
from .strategies import (
    STRATEGY_NAMES,
    TransitionOutcome,
    TransitionReport,
    steps_for,
)
from .timebase import ms_to_us, us_to_ms

EVENT_KINDS = (
    "frame_arrive",
    "frame_start",
    "frame_complete",
    "frame_drop",
    "net_change",
    "transition_start",
    "transition_end",
    "container_state",
)


class SimError(ValueError):
    """Raised for invalid experiment configurations or log queries."""


class SimClock:
    """The event loop's clock; only the loop may move it."""

    def __init__(self):
        self._now = 0

    def now_us(self) -> int:
        return self._now

    def sleep_us(self, duration_us: int) -> None:
        raise RuntimeError(
            "cannot sleep inside the simulator; yield durations from a "
            "transition step generator instead"
        )

    def _advance_to(self, t_us: int) -> None:
        if t_us < self._now:
            raise RuntimeError(f"time cannot move backwards ({t_us} < {self._now})")
        self._now = t_us


class EventQueue:
    """A (time, insertion order) priority queue of callbacks."""

    def __init__(self, clock: SimClock):
        self._clock = clock
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def push(self, time_us: int, action: Callable[[], None]) -> None:
        if time_us < self._clock.now_us():
            raise RuntimeError(
                f"event scheduled in the past ({time_us} < {self._clock.now_us()})"
            )
        heapq.heappush(self._heap, (time_us, next(self._seq), action))

    def run(self) -> None:
        while self._heap:
            time_us, _, action = heapq.heappop(self._heap)
            self._clock._advance_to(time_us)
            action()

    def __len__(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class LogRecord:
    time_us: int
    kind: str
    payload: dict


class MetricsLog:
    """Ordered event records plus the transition reports derived from them."""

    def __init__(self):
        self.records: list[LogRecord] = []
        self.reports: list[TransitionReport] = []

    def append(self, time_us: int, kind: str, payload: dict) -> None:
        if kind not in EVENT_KINDS:
            raise SimError(f"unknown event kind {kind!r}")
        self.records.append(LogRecord(time_us, kind, payload))

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r.kind == kind)

    def in_window(self, kind: str, start_us: int, end_us: int) -> list[LogRecord]:
        return [
            r
            for r in self.records
            if r.kind == kind and start_us <= r.time_us < end_us
        ]

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "time_us": r.time_us,
                        "time_ms": us_to_ms(r.time_us),
                        "kind": r.kind,
                        "payload": r.payload,
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")

    @staticmethod
    def from_jsonl(text: str) -> "MetricsLog":
        log = MetricsLog()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                log.append(int(doc["time_us"]), str(doc["kind"]), dict(doc["payload"]))
            except (KeyError, ValueError) as exc:
                raise SimError(f"bad log line {lineno}: {exc}") from exc
        return log


@dataclass(frozen=True)
class TracePoint:
    time_us: int
    conditions: NetworkConditions


def build_trace(points: Iterable[tuple[float, NetworkConditions]]) -> list[TracePoint]:
    """Validate and convert a (time_ms, conditions) trace."""
    trace = [
        TracePoint(ms_to_us(t, what="trace time"), cond) for t, cond in points
    ]
    if not trace:
        raise SimError("trace must contain at least the initial conditions")
    if trace[0].time_us != 0:
        raise SimError("trace must start at time 0")
    for a, b in zip(trace, trace[1:]):
        if b.time_us <= a.time_us:
            raise SimError("trace times must be strictly increasing")
    return trace


@dataclass
class ExperimentConfig:
    """Everything a simulated run depends on."""

    profile: str | DnnProfile
    trace: list[tuple[float, NetworkConditions]]
    strategy: str = "pause_resume"
    timing: TimingParams = DEFAULT_TIMING
    fps: float = 10.0
    duration_ms: float = 20000.0
    queue_capacity: int = 1
    seed: int = 0
    min_gain: float = 0.0
    container_mb: float = DEFAULT_CONTAINER_MB
    pipeline_mb: float = DEFAULT_PIPELINE_MB
    memory_budget_mb: float | None = None

    def resolve(self) -> DnnProfile:
        if isinstance(self.profile, DnnProfile):
            return self.profile
        return resolve_profile(self.profile)

    def to_dict(self) -> dict:
        if isinstance(self.profile, DnnProfile):
            profile_ref: str | dict = {
                "name": self.profile.name,
                "input_size_mb": self.profile.input_size,
                "layers": [
                    {
                        "id": lo,
                        "label": u.label,
                        "edge_time_ms": u.edge_time,
                        "cloud_time_ms": u.cloud_time,
                        "output_size_mb": u.output_size,
                    }
                    for u, (lo, _) in zip(self.profile.units, self.profile.block_map)
                ],
            }
        else:
            profile_ref = self.profile
        return {
            "profile": profile_ref,
            "trace": [
                [
                    t,
                    {
                        "bandwidth_mbps": c.bandwidth,
                        "latency_ms": c.latency,
                        "cpu_availability": c.cpu_availability,
                        "memory_availability": c.memory_availability,
                    },
                ]
                for t, c in self.trace
            ],
            "strategy": self.strategy,
            "timing": {
                "t_update_ms": self.timing.t_update,
                "t_switch_ms": self.timing.t_switch,
                "t_initialisation_ms": self.timing.t_initialisation,
                "t_exec_ms": self.timing.t_exec,
                "t_build_ms": self.timing.t_build,
                "t_plan_update_ms": self.timing.t_plan_update,
            },
            "fps": self.fps,
            "duration_ms": self.duration_ms,
            "queue_capacity": self.queue_capacity,
            "seed": self.seed,
            "min_gain": self.min_gain,
            "container_mb": self.container_mb,
            "pipeline_mb": self.pipeline_mb,
            "memory_budget_mb": self.memory_budget_mb,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        try:
            profile = doc["profile"]
            if isinstance(profile, dict):
                from .profiles import parse_profile

                profile = parse_profile(profile, "layer-list", where="inline profile")
            trace = [
                (
                    float(t),
                    NetworkConditions(
                        bandwidth=float(c["bandwidth_mbps"]),
                        latency=float(c.get("latency_ms", 0.0)),
                        cpu_availability=float(c.get("cpu_availability", 1.0)),
                        memory_availability=float(c.get("memory_availability", 1.0)),
                    ),
                )
                for t, c in doc["trace"]
            ]
            timing_doc = doc.get("timing", {})
            timing = TimingParams(
                t_update=float(timing_doc.get("t_update_ms", 6000.0)),
                t_switch=float(timing_doc.get("t_switch_ms", 0.98)),
                t_initialisation=float(timing_doc.get("t_initialisation_ms", 1900.0)),
                t_exec=float(timing_doc.get("t_exec_ms", 600.0)),
                t_build=float(timing_doc.get("t_build_ms", 0.0)),
                t_plan_update=float(timing_doc.get("t_plan_update_ms", 0.0)),
            )
            budget = doc.get("memory_budget_mb")
            return ExperimentConfig(
                profile=profile,
                trace=trace,
                strategy=str(doc.get("strategy", "pause_resume")),
                timing=timing,
                fps=float(doc.get("fps", 10.0)),
                duration_ms=float(doc.get("duration_ms", 20000.0)),
                queue_capacity=int(doc.get("queue_capacity", 1)),
                seed=int(doc.get("seed", 0)),
                min_gain=float(doc.get("min_gain", 0.0)),
                container_mb=float(doc.get("container_mb", DEFAULT_CONTAINER_MB)),
                pipeline_mb=float(doc.get("pipeline_mb", DEFAULT_PIPELINE_MB)),
                memory_budget_mb=None if budget is None else float(budget),
            )
        except (KeyError, TypeError) as exc:
            raise SimError(f"bad experiment config: {exc}") from exc


class _Transition:
    """Book-keeping for one in-flight strategy execution."""

    def __init__(self, steps, start_us: int, start_record_idx: int, to_split: int):
        self.steps = steps
        self.start_us = start_us
        self.start_record_idx = start_record_idx
        self.to_split = to_split


class _Simulation:
    def __init__(self, config: ExperimentConfig):
        if config.strategy not in STRATEGY_NAMES:
            raise SimError(f"unknown strategy {config.strategy!r}")
        if config.fps < 0:
            raise SimError("fps must be >= 0")
        if config.queue_capacity < 0:
            raise SimError("queue_capacity must be >= 0")
        if config.min_gain < 0:
            raise SimError("min_gain must be >= 0")
        self.config = config
        self.profile = config.resolve()
        self.trace = build_trace(config.trace)
        self.duration_us = ms_to_us(config.duration_ms, what="duration")
        if self.duration_us <= 0:
            raise SimError("duration_ms must be > 0")
        self.clock = SimClock()
        self.queue = EventQueue(self.clock)
        self.log = MetricsLog()
        self.conditions = self.trace[0].conditions
        self.transition: _Transition | None = None
        self._service_epoch: dict[int, int] = {}
        self._service_meta: dict[int, tuple[int, int]] = {}  # pid -> (started_us, duration_us)
        self._frozen_remaining: dict[int, int] = {}
        self._next_seq = 0
        self.deployment = Deployment(
            clock=self.clock,
            queue_capacity=config.queue_capacity,
            container_mb=config.container_mb,
            pipeline_mb=config.pipeline_mb,
            memory_budget_mb=config.memory_budget_mb,
            on_event=self._on_deployment_event,
        )
        plan = optimal_split(self.profile, self.conditions)
        self.deployment.add_baseline(plan)
        if config.strategy == "dyn_A_case1":
            standby = self.deployment.create_pipeline(plan, Placement.NEW_CONTAINERS)
            self.deployment.container_begin_init(standby.id)
            self.deployment.container_set_running(standby.id)
        elif config.strategy == "dyn_A_case2":
            self.deployment.create_pipeline(plan, Placement.EXISTING_CONTAINERS)

        for point in self.trace:
            self.queue.push(point.time_us, lambda p=point: self._on_net_change(p))
        if config.fps > 0:
            self.queue.push(0, lambda: self._on_frame_arrive(0))

    # -- deployment hook -----------------------------------------------------

    def _on_deployment_event(self, kind: str, payload: dict) -> None:
        self.log.append(self.clock.now_us(), kind, payload)
        if kind != "container_state":
            return
        pid = self._pipeline_for_pair(payload["pair"])
        if pid is None:
            return
        if payload["state"] == "paused":
            self._freeze_service(pid)
        elif payload["state"] == "running" and pid in self._frozen_remaining:
            self._thaw_service(pid)

    def _pipeline_for_pair(self, pair_id: int) -> int | None:
        for p in self.deployment.pipelines.values():
            if p.pair.id == pair_id and p.in_flight is not None:
                return p.id
        for p in self.deployment.pipelines.values():
            if p.pair.id == pair_id and p.id in self._frozen_remaining:
                return p.id
        return None

    def _freeze_service(self, pid: int) -> None:
        meta = self._service_meta.get(pid)
        if meta is None:
            return
        started, duration = meta
        elapsed = self.clock.now_us() - started
        self._frozen_remaining[pid] = max(0, duration - elapsed)
        self._service_epoch[pid] = self._service_epoch.get(pid, 0) + 1
        del self._service_meta[pid]

    def _thaw_service(self, pid: int) -> None:
        remaining = self._frozen_remaining.pop(pid)
        self._begin_service_timer(pid, remaining)

    # -- frame service ---------------------------------------------------------

    def _service_us(self, pipeline: Pipeline) -> int:
        total_ms = estimate_latency(
            self.profile, pipeline.plan.split, self.conditions
        ).t_total
        return max(1, round(total_ms * 1000))

    def _begin_service_timer(self, pid: int, duration_us: int) -> None:
        epoch = self._service_epoch.get(pid, 0)
        now = self.clock.now_us()
        self._service_meta[pid] = (now, duration_us)
        self.queue.push(now + duration_us, lambda: self._on_complete(pid, epoch))

    def _start_service(self, pipeline: Pipeline, frame: Frame) -> None:
        self.log.append(
            self.clock.now_us(),
            "frame_start",
            {"seq": frame.seq, "pipeline": pipeline.id, "split": pipeline.plan.split},
        )
        self._begin_service_timer(pipeline.id, self._service_us(pipeline))

    def _kick(self, pid: int) -> None:
        frame = self.deployment.start_next(pid)
        if frame is not None:
            self._start_service(self.deployment.pipeline(pid), frame)

    # -- event handlers ----------------------------------------------------------

    def _on_frame_arrive(self, k: int) -> None:
        now = self.clock.now_us()
        seq = self._next_seq
        self._next_seq += 1
        frame = Frame(seq=seq, arrival_us=now, payload_size=self.profile.input_size)
        self.log.append(now, "frame_arrive", {"seq": seq})
        disposition, pipeline = self.deployment.offer(frame)
        if disposition == "started":
            self._start_service(pipeline, frame)
        elif disposition == "dropped":
            self.log.append(now, "frame_drop", {"seq": seq, "pipeline": pipeline.id})
        next_t = round((k + 1) * 1_000_000 / self.config.fps)
        if next_t < self.duration_us:
            self.queue.push(next_t, lambda: self._on_frame_arrive(k + 1))

    def _on_complete(self, pid: int, epoch: int) -> None:
        if self._service_epoch.get(pid, 0) != epoch:
            return  # frozen or rescheduled while this timer was in the heap
        pipeline = self.deployment.pipeline(pid)
        frame = self.deployment.complete(pid)
        self._service_meta.pop(pid, None)
        self.log.append(
            self.clock.now_us(),
            "frame_complete",
            {"seq": frame.seq, "pipeline": pid, "split": pipeline.plan.split},
        )
        if pipeline.role is PipelineRole.DRAINING and pipeline.idle:
            self.deployment.finish_draining(pid)
            return
        self._kick(pid)

    def _on_net_change(self, point: TracePoint) -> None:
        self.conditions = point.conditions
        c = point.conditions
        self.log.append(
            point.time_us,
            "net_change",
            {
                "bandwidth_mbps": c.bandwidth,
                "latency_ms": c.latency,
                "cpu_availability": c.cpu_availability,
                "memory_availability": c.memory_availability,
            },
        )
        if point.time_us == 0 or self.transition is not None:
            # Initial conditions are not a change; overlapping transitions
            # are out of scope and the repartition check is skipped while
            # one is in flight.
            return
        current = self.deployment.active_pipeline.plan
        decision, plan = should_repartition(
            current, self.profile, c, self.config.min_gain
        )
        if not decision:
            return
        self.log.append(
            point.time_us,
            "transition_start",
            {
                "strategy": self.config.strategy,
                "from_split": current.split,
                "to_split": plan.split,
            },
        )
        steps = steps_for(self.config.strategy, self.deployment, plan, self.config.timing)
        self.transition = _Transition(
            steps=steps,
            start_us=point.time_us,
            start_record_idx=len(self.log.records),
            to_split=plan.split,
        )
        self._step_transition()

    def _step_transition(self) -> None:
        assert self.transition is not None
        try:
            delay = next(self.transition.steps)
            while delay == 0:
                delay = next(self.transition.steps)
            self.queue.push(self.clock.now_us() + delay, self._step_transition)
        except StopIteration as stop:
            self._finish_transition(stop.value)

    def _finish_transition(self, outcome: TransitionOutcome) -> None:
        transition = self.transition
        assert transition is not None
        self.transition = None
        end_us = self.clock.now_us()
        dropped = 0
        degraded = 0
        target_id = self.deployment.dispatcher_target
        for record in self.log.records[transition.start_record_idx:]:
            if record.kind == "frame_drop":
                dropped += 1
            elif record.kind == "frame_complete" and record.payload["pipeline"] != target_id:
                degraded += 1
        report = TransitionReport(
            strategy=outcome.strategy,
            downtime_kind=outcome.downtime_kind,
            window_start_us=transition.start_us,
            window_end_us=end_us,
            frames_dropped=dropped,
            frames_degraded=degraded,
            memory=outcome.memory,
        )
        self.log.reports.append(report)
        self.log.append(
            end_us,
            "transition_end",
            {
                "strategy": report.strategy,
                "downtime_kind": report.downtime_kind,
                "downtime_ms": report.t_downtime_ms,
                "window_start_us": report.window_start_us,
                "window_end_us": report.window_end_us,
                "frames_dropped": report.frames_dropped,
                "frames_degraded": report.frames_degraded,
                "memory_initial_mb": report.memory.initial_mb,
                "memory_additional_mb": report.memory.additional_mb,
                "memory_total_mb": report.memory.total_mb,
                "memory_transient": report.memory.transient,
            },
        )
        if outcome.drain_pipeline_id is not None:
            old = self.deployment.pipeline(outcome.drain_pipeline_id)
            if old.role is PipelineRole.DRAINING and old.idle:
                self.deployment.finish_draining(old.id)
        self._kick(self.deployment.dispatcher_target)

    # -- run ------------------------------------------------------------------

    def run(self) -> MetricsLog:
        self.queue.run()
        self.deployment.check_invariants()
        arrived = self.log.count("frame_arrive")
        completed = self.log.count("frame_complete")
        dropped = self.log.count("frame_drop")
        if arrived != completed + dropped:
            raise RuntimeError(
                f"frame conservation violated: {arrived} arrived, "
                f"{completed} completed, {dropped} dropped"
            )
        return self.log


def run_experiment(config: ExperimentConfig) -> MetricsLog:
    """Run one experiment to quiescence and return its log."""
    return _Simulation(config).run()


def frame_drop_rate(log: MetricsLog, window_start_ms: float, window_end_ms: float) -> float:
    """Dropped frames per second over a half-open wall window."""
    start_us = ms_to_us(window_start_ms, what="window start")
    end_us = ms_to_us(window_end_ms, what="window end")
    if end_us <= start_us:
        raise SimError("window must have positive length")
    drops = len(log.in_window("frame_drop", start_us, end_us))
    return drops / ((end_us - start_us) / 1_000_000)


def measured_downtime_us(log: MetricsLog, report: TransitionReport) -> int:
    """Re-derive a transition's downtime from the raw event records.

    Full outages are the longest admission-free interval inside the window;
    degraded windows are the window itself.
    """
    if report.downtime_kind != "full_outage":
        return report.window_us
    admissions = sorted(
        r.time_us
        for r in log.in_window("frame_start", report.window_start_us, report.window_end_us)
    )
    edges = [report.window_start_us, *admissions, report.window_end_us]
    return max(b - a for a, b in zip(edges, edges[1:]))


def summarize(log: MetricsLog) -> dict:
    """Reduce a log to the summary table; pure function of the records."""
    transitions = []
    for record in log.records:
        if record.kind == "transition_end":
            row = dict(record.payload)
            row["time_ms"] = us_to_ms(record.time_us)
            transitions.append(row)
    return {
        "frames_arrived": log.count("frame_arrive"),
        "frames_completed": log.count("frame_complete"),
        "frames_dropped": log.count("frame_drop"),
        "net_changes": log.count("net_change"),
        "transitions": transitions,
    }


@dataclass(frozen=True)
class SweepCell:
    cpu_pct: float
    mem_pct: float
    fps: float
    strategy: str
    bandwidth_change: str
    infeasible: bool
    downtime_ms: float | None = None
    drops: int | None = None
    degraded: int | None = None


@dataclass
class SweepGrid:
    cpu_pct: list[float] = field(default_factory=lambda: [100.0])
    mem_pct: list[float] = field(default_factory=lambda: [100.0])
    fps: list[float] | None = None
    strategies: list[str] | None = None

    @staticmethod
    def from_dict(doc: dict) -> "SweepGrid":
        return SweepGrid(
            cpu_pct=[float(x) for x in doc.get("cpu_pct", [100.0])],
            mem_pct=[float(x) for x in doc.get("mem_pct", [100.0])],
            fps=[float(x) for x in doc["fps"]] if "fps" in doc else None,
            strategies=list(doc["strategies"]) if "strategies" in doc else None,
        )


INFEASIBLE_MEMORY_PCT = 10.0


def _bandwidth_change(config: ExperimentConfig) -> str:
    bandwidths = []
    for _, cond in config.trace:
        if not bandwidths or bandwidths[-1] != cond.bandwidth:
            bandwidths.append(cond.bandwidth)
    if len(bandwidths) < 2:
        return "none"
    return "->".join(f"{b:g}" for b in bandwidths)


def sweep(config: ExperimentConfig, grid: SweepGrid) -> list[SweepCell]:
    """Run the experiment across a stress grid.

    Memory availability at or below 10% marks the cell infeasible (partitions
    cannot be hosted on the edge at all) instead of producing numbers.
    """
    cells = []
    fps_values = grid.fps if grid.fps is not None else [config.fps]
    strategies = grid.strategies if grid.strategies is not None else [config.strategy]
    change = _bandwidth_change(config)
    for strategy in strategies:
        for fps in fps_values:
            for cpu_pct in grid.cpu_pct:
                for mem_pct in grid.mem_pct:
                    if mem_pct <= INFEASIBLE_MEMORY_PCT:
                        cells.append(
                            SweepCell(
                                cpu_pct=cpu_pct,
                                mem_pct=mem_pct,
                                fps=fps,
                                strategy=strategy,
                                bandwidth_change=change,
                                infeasible=True,
                            )
                        )
                        continue
                    trace = [
                        (
                            t,
                            replace(
                                cond,
                                cpu_availability=cpu_pct / 100.0,
                                memory_availability=mem_pct / 100.0,
                            ),
                        )
                        for t, cond in config.trace
                    ]
                    cell_config = replace(
                        config, trace=trace, strategy=strategy, fps=fps
                    )
                    log = run_experiment(cell_config)
                    report = log.reports[0] if log.reports else None
                    cells.append(
                        SweepCell(
                            cpu_pct=cpu_pct,
                            mem_pct=mem_pct,
                            fps=fps,
                            strategy=strategy,
                            bandwidth_change=change,
                            infeasible=False,
                            downtime_ms=None if report is None else report.t_downtime_ms,
                            drops=log.count("frame_drop"),
                            degraded=None if report is None else report.frames_degraded,
                        )
                    )
    return cells
