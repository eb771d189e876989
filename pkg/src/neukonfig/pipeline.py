"""Container, pipeline, and dispatcher state machines with memory accounting.

A deployment holds one or more edge/cloud container pairs, each hosting one
or more inference pipelines. Exactly one pipeline is active (receives new
frames) at any instant; others are redundant standbys, draining, or dead.
State changes here are instantaneous; elapsed time between them is owned by
whoever drives the deployment (a transition driver, the simulator, or the
live coordinator), all against the same injected clock.

Memory is accounted in tenths of MB so that table-style totals compare
exactly: a container pair costs ``container_mb`` while alive, an extra
pipeline inside an existing pair costs ``pipeline_mb``.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

from .planner import PartitionPlan
from .timebase import ms_to_us

DEFAULT_CONTAINER_MB = 763.1
DEFAULT_PIPELINE_MB = 0.0


class StateError(RuntimeError):
    """An operation was attempted from a state that does not allow it."""


class MemoryBudgetError(StateError):
    """Spawning would exceed the deployment's memory budget."""


class Clock(Protocol):
    def now_us(self) -> int: ...

    def sleep_us(self, duration_us: int) -> None: ...


class ManualClock:
    """A clock that only moves when told to; the default for direct drives."""

    def __init__(self, start_us: int = 0):
        self._now = start_us

    def now_us(self) -> int:
        return self._now

    def sleep_us(self, duration_us: int) -> None:
        if duration_us < 0:
            raise ValueError("cannot sleep a negative duration")
        self._now += duration_us


class WallClock:
    """Real time, microsecond resolution."""

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def sleep_us(self, duration_us: int) -> None:
        if duration_us > 0:
            time.sleep(duration_us / 1e6)


class ContainerState(Enum):
    ABSENT = "absent"
    BUILDING = "building"
    INITIALISING = "initialising"
    RUNNING = "running"
    PAUSED = "paused"
    TERMINATED = "terminated"


_LEGAL_TRANSITIONS = {
    (ContainerState.ABSENT, ContainerState.BUILDING),
    (ContainerState.BUILDING, ContainerState.INITIALISING),
    (ContainerState.INITIALISING, ContainerState.RUNNING),
    (ContainerState.RUNNING, ContainerState.PAUSED),
    (ContainerState.PAUSED, ContainerState.RUNNING),
    (ContainerState.RUNNING, ContainerState.TERMINATED),
}

_ALIVE_STATES = frozenset(
    {
        ContainerState.BUILDING,
        ContainerState.INITIALISING,
        ContainerState.RUNNING,
        ContainerState.PAUSED,
    }
)


class Container:
    """One container with a guarded state machine.

    The build phase may be skipped (absent -> initialising) only when the
    base image is already cached on the host.
    """

    def __init__(self, name: str, base_image_cached: bool = True):
        self.name = name
        self.base_image_cached = base_image_cached
        self.state = ContainerState.ABSENT

    def to(self, new_state: ContainerState) -> None:
        edge = (self.state, new_state)
        if edge == (ContainerState.ABSENT, ContainerState.INITIALISING):
            if not self.base_image_cached:
                raise StateError(
                    f"container {self.name}: cannot skip build, base image not cached"
                )
        elif edge not in _LEGAL_TRANSITIONS:
            raise StateError(
                f"container {self.name}: illegal transition "
                f"{self.state.value} -> {new_state.value}"
            )
        self.state = new_state

    @property
    def alive(self) -> bool:
        return self.state in _ALIVE_STATES


class ContainerPair:
    """The edge container and cloud container backing one pipeline slot."""

    def __init__(self, pair_id: int, base_image_cached: bool = True):
        self.id = pair_id
        self.edge = Container(f"edge-{pair_id}", base_image_cached)
        self.cloud = Container(f"cloud-{pair_id}", base_image_cached)

    def to(self, new_state: ContainerState) -> None:
        self.edge.to(new_state)
        self.cloud.to(new_state)

    @property
    def state(self) -> ContainerState:
        return self.edge.state

    @property
    def alive(self) -> bool:
        return self.edge.alive or self.cloud.alive


class PipelineRole(Enum):
    ACTIVE = "active"
    REDUNDANT = "redundant"
    DRAINING = "draining"
    DEAD = "dead"


class Placement(Enum):
    NEW_CONTAINERS = "new_containers"
    EXISTING_CONTAINERS = "existing_containers"


class RetirePolicy(Enum):
    """What happens to a draining pipeline once its queue empties."""

    STANDBY = "standby"  # becomes the redundant pipeline again
    TERMINATE_CONTAINERS = "terminate_containers"
    EXIT_PROCESS = "exit_process"  # pipeline dies, shared containers stay


class FrameStatus(Enum):
    QUEUED = "queued"
    IN_FLIGHT = "in_flight"
    COMPLETED = "completed"
    DROPPED = "dropped"


_FRAME_TRANSITIONS = {
    (FrameStatus.QUEUED, FrameStatus.IN_FLIGHT),
    (FrameStatus.IN_FLIGHT, FrameStatus.COMPLETED),
    (FrameStatus.QUEUED, FrameStatus.DROPPED),
}


@dataclass
class Frame:
    seq: int
    arrival_us: int
    payload_size: float  # Mb
    status: FrameStatus = FrameStatus.QUEUED

    def advance(self, new_status: FrameStatus) -> None:
        if (self.status, new_status) not in _FRAME_TRANSITIONS:
            raise StateError(
                f"frame {self.seq}: illegal status change "
                f"{self.status.value} -> {new_status.value}"
            )
        self.status = new_status


@dataclass(frozen=True)
class TimingParams:
    """Durations (ms) for the transition building blocks.

    ``t_initialisation`` is the total time for new containers to reach
    running; when the base image is not cached, ``t_build`` of it is spent in
    the build phase. ``t_plan_update`` charges updating an idle redundant
    pipeline's metadata, zero by default since the pipeline serves nothing
    while it happens.
    """

    t_update: float = 6000.0
    t_switch: float = 0.98
    t_initialisation: float = 1900.0
    t_exec: float = 600.0
    t_build: float = 0.0
    t_plan_update: float = 0.0

    def __post_init__(self):
        if self.t_build > self.t_initialisation:
            raise ValueError("t_build cannot exceed t_initialisation")

    @property
    def update_us(self) -> int:
        return ms_to_us(self.t_update, what="t_update")

    @property
    def switch_us(self) -> int:
        return ms_to_us(self.t_switch, what="t_switch")

    @property
    def initialisation_us(self) -> int:
        return ms_to_us(self.t_initialisation, what="t_initialisation")

    @property
    def exec_us(self) -> int:
        return ms_to_us(self.t_exec, what="t_exec")

    @property
    def build_us(self) -> int:
        return ms_to_us(self.t_build, what="t_build")

    @property
    def plan_update_us(self) -> int:
        return ms_to_us(self.t_plan_update, what="t_plan_update")


DEFAULT_TIMING = TimingParams()


class Pipeline:
    """One inference pipeline bound to a container pair."""

    def __init__(
        self,
        pipeline_id: int,
        plan: PartitionPlan,
        pair: ContainerPair,
        placement: Placement,
        queue_capacity: int,
        transient: bool = False,
    ):
        self.id = pipeline_id
        self.plan = plan
        self.pair = pair
        self.placement = placement
        self.role = PipelineRole.REDUNDANT
        self.queue: deque[Frame] = deque()
        self.queue_capacity = queue_capacity
        self.in_flight: Frame | None = None
        self.transient = transient
        self.retire_policy = RetirePolicy.STANDBY

    @property
    def paused(self) -> bool:
        return self.pair.state is ContainerState.PAUSED

    @property
    def can_serve(self) -> bool:
        return (
            self.pair.edge.state is ContainerState.RUNNING
            and self.pair.cloud.state is ContainerState.RUNNING
            and self.role in (PipelineRole.ACTIVE, PipelineRole.DRAINING)
        )

    @property
    def idle(self) -> bool:
        return self.in_flight is None and not self.queue


@dataclass(frozen=True)
class MemoryFootprint:
    """Memory accounting snapshot, exact in tenths of MB."""

    initial_tenths: int
    additional_tenths: int
    transient: bool

    @property
    def total_tenths(self) -> int:
        return self.initial_tenths + self.additional_tenths

    @property
    def initial_mb(self) -> float:
        return self.initial_tenths / 10

    @property
    def additional_mb(self) -> float:
        return self.additional_tenths / 10

    @property
    def total_mb(self) -> float:
        return self.total_tenths / 10


def _mb_to_tenths(mb: float) -> int:
    tenths = round(mb * 10)
    if abs(mb * 10 - tenths) > 1e-6:
        raise ValueError(f"memory sizes are accounted in 0.1 MB steps, got {mb}")
    return tenths


class Deployment:
    """All pipelines and containers serving one device's stream."""

    def __init__(
        self,
        clock: Clock | None = None,
        queue_capacity: int = 1,
        container_mb: float = DEFAULT_CONTAINER_MB,
        pipeline_mb: float = DEFAULT_PIPELINE_MB,
        memory_budget_mb: float | None = None,
        base_image_cached: bool = True,
        on_event: Callable[[str, dict], None] | None = None,
    ):
        self.clock: Clock = clock if clock is not None else ManualClock()
        self.queue_capacity = queue_capacity
        self.container_tenths = _mb_to_tenths(container_mb)
        self.pipeline_tenths = _mb_to_tenths(pipeline_mb)
        self.budget_tenths = (
            None if memory_budget_mb is None else _mb_to_tenths(memory_budget_mb)
        )
        self.base_image_cached = base_image_cached
        self.on_event = on_event
        self.pipelines: dict[int, Pipeline] = {}
        self.pairs: dict[int, ContainerPair] = {}
        self.dispatcher_target: int | None = None
        self._next_pipeline = 0
        self._next_pair = 0

    # -- helpers -----------------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> None:
        if self.on_event is not None:
            self.on_event(kind, payload)

    def _emit_pair_state(self, pair: ContainerPair) -> None:
        self._emit(
            "container_state",
            {"pair": pair.id, "state": pair.state.value},
        )

    def pipeline(self, pipeline_id: int) -> Pipeline:
        try:
            return self.pipelines[pipeline_id]
        except KeyError:
            raise StateError(f"no pipeline {pipeline_id} in this deployment") from None

    @property
    def active_pipeline(self) -> Pipeline:
        if self.dispatcher_target is None:
            raise StateError("deployment has no active pipeline")
        return self.pipelines[self.dispatcher_target]

    def redundant_pipeline(self) -> Pipeline | None:
        for p in self.pipelines.values():
            if p.role is PipelineRole.REDUNDANT:
                return p
        return None

    def live_pairs(self) -> list[ContainerPair]:
        return [pair for pair in self.pairs.values() if pair.alive]

    # -- construction ------------------------------------------------------

    def _new_pair(self) -> ContainerPair:
        pair = ContainerPair(self._next_pair, self.base_image_cached)
        self._next_pair += 1
        self.pairs[pair.id] = pair
        return pair

    def _check_budget(self, extra_tenths: int) -> None:
        if self.budget_tenths is None:
            return
        footprint = self.memory_footprint()
        if footprint.total_tenths + extra_tenths > self.budget_tenths:
            raise MemoryBudgetError(
                f"memory budget exceeded: need "
                f"{(footprint.total_tenths + extra_tenths) / 10} MB, "
                f"budget {self.budget_tenths / 10} MB"
            )

    def add_baseline(self, plan: PartitionPlan) -> Pipeline:
        """Create the initial pipeline with its containers already running."""
        if self.pipelines:
            raise StateError("deployment already has a baseline pipeline")
        pair = self._new_pair()
        if not self.base_image_cached:
            pair.to(ContainerState.BUILDING)
        pair.to(ContainerState.INITIALISING)
        pair.to(ContainerState.RUNNING)
        pipeline = Pipeline(
            self._next_pipeline, plan, pair, Placement.NEW_CONTAINERS,
            self.queue_capacity,
        )
        self._next_pipeline += 1
        pipeline.role = PipelineRole.ACTIVE
        self.pipelines[pipeline.id] = pipeline
        self.dispatcher_target = pipeline.id
        self._emit_pair_state(pair)
        return pipeline

    def create_pipeline(
        self, plan: PartitionPlan, placement: Placement, transient: bool = False
    ) -> Pipeline:
        """Register a pipeline; its containers start absent (new placement)
        or are shared with the active pipeline (existing placement)."""
        if placement is Placement.NEW_CONTAINERS:
            self._check_budget(self.container_tenths)
            pair = self._new_pair()
        else:
            live = [p for p in self.pipelines.values() if p.pair.alive]
            if not live:
                raise StateError(
                    "existing_containers placement requested with no live container"
                )
            self._check_budget(self.pipeline_tenths)
            pair = self.active_pipeline.pair
        pipeline = Pipeline(
            self._next_pipeline, plan, pair, placement, self.queue_capacity, transient
        )
        self._next_pipeline += 1
        self.pipelines[pipeline.id] = pipeline
        return pipeline

    # -- container lifecycle (instantaneous edges) --------------------------

    def container_begin_build(self, pipeline_id: int) -> None:
        pair = self.pipeline(pipeline_id).pair
        pair.to(ContainerState.BUILDING)
        self._emit_pair_state(pair)

    def container_begin_init(self, pipeline_id: int) -> None:
        pair = self.pipeline(pipeline_id).pair
        pair.to(ContainerState.INITIALISING)
        self._emit_pair_state(pair)

    def container_set_running(self, pipeline_id: int) -> None:
        pair = self.pipeline(pipeline_id).pair
        pair.to(ContainerState.RUNNING)
        self._emit_pair_state(pair)

    # -- pipeline operations -------------------------------------------------

    def pause(self, pipeline_id: int) -> None:
        pipeline = self.pipeline(pipeline_id)
        pipeline.pair.to(ContainerState.PAUSED)
        self._emit_pair_state(pipeline.pair)

    def resume(self, pipeline_id: int) -> None:
        pipeline = self.pipeline(pipeline_id)
        pipeline.pair.to(ContainerState.RUNNING)
        self._emit_pair_state(pipeline.pair)

    def set_plan(self, pipeline_id: int, plan: PartitionPlan) -> None:
        pipeline = self.pipeline(pipeline_id)
        if not pipeline.paused and not (
            pipeline.role is PipelineRole.REDUNDANT and pipeline.idle
        ):
            raise StateError(
                f"pipeline {pipeline_id}: plan can only change while paused "
                "or while an idle standby"
            )
        pipeline.plan = plan

    def switch_to(self, pipeline_id: int, retire_policy: RetirePolicy) -> Pipeline:
        """Atomically point the dispatcher at a redundant running pipeline.

        The previously active pipeline starts draining under the given retire
        policy. Returns the old pipeline.
        """
        target = self.pipeline(pipeline_id)
        if target.role is not PipelineRole.REDUNDANT:
            raise StateError(f"pipeline {pipeline_id} is {target.role.value}, not redundant")
        if not (
            target.pair.edge.state is ContainerState.RUNNING
            and target.pair.cloud.state is ContainerState.RUNNING
        ):
            raise StateError(f"pipeline {pipeline_id} containers are not running")
        old = self.active_pipeline
        old.role = PipelineRole.DRAINING
        old.retire_policy = retire_policy
        target.role = PipelineRole.ACTIVE
        self.dispatcher_target = target.id
        return old

    def finish_draining(self, pipeline_id: int) -> None:
        """Retire a drained pipeline according to its policy."""
        pipeline = self.pipeline(pipeline_id)
        if pipeline.role is not PipelineRole.DRAINING:
            raise StateError(f"pipeline {pipeline_id} is not draining")
        if not pipeline.idle:
            raise StateError(f"pipeline {pipeline_id} still has frames in flight")
        if pipeline.retire_policy is RetirePolicy.STANDBY:
            pipeline.role = PipelineRole.REDUNDANT
            return
        pipeline.role = PipelineRole.DEAD
        if pipeline.retire_policy is RetirePolicy.TERMINATE_CONTAINERS:
            pipeline.pair.to(ContainerState.TERMINATED)
            self._emit_pair_state(pipeline.pair)

    # -- frame flow ----------------------------------------------------------

    def offer(self, frame: Frame) -> tuple[str, Pipeline]:
        """Route an arriving frame to the dispatcher's target pipeline.

        Returns the disposition: ``started`` (admitted straight into
        service), ``queued``, or ``dropped`` (queue full).
        """
        pipeline = self.active_pipeline
        if pipeline.can_serve and pipeline.in_flight is None:
            frame.advance(FrameStatus.IN_FLIGHT)
            pipeline.in_flight = frame
            return "started", pipeline
        if len(pipeline.queue) < pipeline.queue_capacity:
            pipeline.queue.append(frame)
            return "queued", pipeline
        frame.advance(FrameStatus.DROPPED)
        return "dropped", pipeline

    def complete(self, pipeline_id: int) -> Frame:
        pipeline = self.pipeline(pipeline_id)
        if pipeline.in_flight is None:
            raise StateError(f"pipeline {pipeline_id} has no frame in flight")
        frame = pipeline.in_flight
        frame.advance(FrameStatus.COMPLETED)
        pipeline.in_flight = None
        return frame

    def start_next(self, pipeline_id: int) -> Frame | None:
        """Pull the next queued frame into service, if the pipeline may serve."""
        pipeline = self.pipeline(pipeline_id)
        if not pipeline.can_serve or pipeline.in_flight is not None:
            return None
        if not pipeline.queue:
            return None
        frame = pipeline.queue.popleft()
        frame.advance(FrameStatus.IN_FLIGHT)
        pipeline.in_flight = frame
        return frame

    # -- memory ---------------------------------------------------------------

    def memory_footprint(self) -> MemoryFootprint:
        """Current memory demand relative to a single-pipeline baseline."""
        live_pairs = self.live_pairs()
        pair_cost = len(live_pairs) * self.container_tenths
        extras = 0
        transient_contribution = False
        for pair in live_pairs:
            sharing = [
                p
                for p in self.pipelines.values()
                if p.pair is pair and p.role is not PipelineRole.DEAD
            ]
            extras += max(0, len(sharing) - 1)
        total = pair_cost + extras * self.pipeline_tenths
        additional = total - self.container_tenths
        if additional > 0:
            for p in self.pipelines.values():
                if p.role is PipelineRole.DEAD:
                    continue
                if p.transient or (
                    p.role is PipelineRole.DRAINING
                    and p.retire_policy is RetirePolicy.TERMINATE_CONTAINERS
                ):
                    transient_contribution = True
        return MemoryFootprint(
            initial_tenths=self.container_tenths,
            additional_tenths=additional,
            transient=transient_contribution,
        )

    def check_invariants(self) -> None:
        active = [p for p in self.pipelines.values() if p.role is PipelineRole.ACTIVE]
        if len(active) != 1:
            raise StateError(
                f"expected exactly one active pipeline, found "
                f"{[p.id for p in active]}"
            )
        if self.dispatcher_target != active[0].id:
            raise StateError("dispatcher does not target the active pipeline")


# -- direct-drive operation wrappers ----------------------------------------
# These express the elapsed time of each operation against the deployment's
# clock. The simulator steps the same state changes through its event queue
# instead (see the transition step generators in the strategies module).


def spawn_pipeline(
    deployment: Deployment,
    plan: PartitionPlan,
    placement: Placement,
    timing: TimingParams = DEFAULT_TIMING,
    transient: bool = False,
) -> Pipeline:
    """Bring up a redundant pipeline, taking the configured start-up time.

    New containers pass through building (skipped when the base image is
    cached) and initialising for ``t_initialisation`` total; a pipeline in
    existing containers only needs a process start of ``t_exec``.
    """
    pipeline = deployment.create_pipeline(plan, placement, transient)
    clock = deployment.clock
    if placement is Placement.NEW_CONTAINERS:
        if deployment.base_image_cached:
            deployment.container_begin_init(pipeline.id)
            clock.sleep_us(timing.initialisation_us)
        else:
            deployment.container_begin_build(pipeline.id)
            clock.sleep_us(timing.build_us)
            deployment.container_begin_init(pipeline.id)
            clock.sleep_us(timing.initialisation_us - timing.build_us)
        deployment.container_set_running(pipeline.id)
    else:
        clock.sleep_us(timing.exec_us)
    return pipeline


def update_metadata(
    deployment: Deployment,
    pipeline_id: int,
    plan: PartitionPlan,
    t_update_ms: float,
) -> None:
    """Rewrite a paused pipeline's partition metadata, taking ``t_update_ms``."""
    pipeline = deployment.pipeline(pipeline_id)
    if not pipeline.paused:
        raise StateError(f"pipeline {pipeline_id} must be paused to update metadata")
    deployment.clock.sleep_us(ms_to_us(t_update_ms, what="t_update"))
    pipeline.plan = plan


def switch_dispatcher(
    deployment: Deployment,
    to: int,
    t_switch_ms: float,
    retire_policy: RetirePolicy = RetirePolicy.STANDBY,
) -> Pipeline:
    """Redirect new frames to pipeline ``to`` after ``t_switch_ms``."""
    target = deployment.pipeline(to)
    if target.role is not PipelineRole.REDUNDANT:
        raise StateError(f"pipeline {to} is {target.role.value}, not redundant")
    deployment.clock.sleep_us(ms_to_us(t_switch_ms, what="t_switch"))
    return deployment.switch_to(to, retire_policy)
