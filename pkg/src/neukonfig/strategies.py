"""Repartitioning transition protocols and their downtime accounting.

Each strategy is expressed as a step generator over a deployment: state
changes happen between yields, and every yield hands back the number of
microseconds that elapse before the next step. The same generators are run
directly against a clock (see ``run_transition``) and by the simulator's
event queue, so both report identical windows.

Downtime compositions:

* pause_resume: the active pipeline is paused for the whole metadata update,
  a full outage of ``t_update``.
* dynamic switch, standby pipeline already running (scenario A): only the
  dispatcher redirect ``t_switch`` is degraded service.
* dynamic switch, standby spawned in new containers (scenario B case 1):
  ``t_initialisation + t_switch`` degraded.
* dynamic switch, standby spawned inside the existing containers (scenario B
  case 2): ``t_exec + t_switch`` degraded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Generator

from .pipeline import (
    DEFAULT_TIMING,
    Deployment,
    MemoryFootprint,
    Pipeline,
    PipelineRole,
    Placement,
    RetirePolicy,
    StateError,
    TimingParams,
)
from .planner import PartitionPlan
from .timebase import us_to_ms

FULL_OUTAGE = "full_outage"
DEGRADED = "degraded"

STRATEGY_NAMES = (
    "pause_resume",
    "dyn_A_case1",
    "dyn_A_case2",
    "dyn_B_case1",
    "dyn_B_case2",
)


@dataclass(frozen=True)
class TransitionReport:
    """What one transition did to service, as measured at its window."""

    strategy: str
    downtime_kind: str
    window_start_us: int
    window_end_us: int
    frames_dropped: int
    frames_degraded: int
    memory: MemoryFootprint

    @property
    def window_us(self) -> int:
        return self.window_end_us - self.window_start_us

    @property
    def t_downtime_ms(self) -> float:
        return us_to_ms(self.window_us)


@dataclass
class TransitionOutcome:
    """Returned by a step generator when its window closes."""

    strategy: str
    downtime_kind: str
    memory: MemoryFootprint
    drain_pipeline_id: int | None


TransitionSteps = Generator[int, None, TransitionOutcome]


def expected_downtime_us(strategy: str, timing: TimingParams = DEFAULT_TIMING) -> int:
    """The downtime each strategy's composition predicts, in microseconds."""
    if strategy == "pause_resume":
        return timing.update_us
    if strategy in ("dyn_A_case1", "dyn_A_case2"):
        return timing.plan_update_us + timing.switch_us
    if strategy == "dyn_B_case1":
        return timing.initialisation_us + timing.switch_us
    if strategy == "dyn_B_case2":
        return timing.exec_us + timing.switch_us
    raise ValueError(f"unknown strategy {strategy!r}")


def expected_downtime_ms(strategy: str, timing: TimingParams = DEFAULT_TIMING) -> float:
    return us_to_ms(expected_downtime_us(strategy, timing))


def pause_and_resume_steps(
    deployment: Deployment, new_plan: PartitionPlan, timing: TimingParams
) -> TransitionSteps:
    """Pause the active pipeline, rewrite its metadata, resume it."""
    active = deployment.active_pipeline
    deployment.pause(active.id)
    yield timing.update_us
    deployment.set_plan(active.id, new_plan)
    deployment.resume(active.id)
    return TransitionOutcome(
        strategy="pause_resume",
        downtime_kind=FULL_OUTAGE,
        memory=deployment.memory_footprint(),
        drain_pipeline_id=None,
    )


def dynamic_switch_A_steps(
    deployment: Deployment, new_plan: PartitionPlan, timing: TimingParams
) -> TransitionSteps:
    """Redirect to an already-running standby pipeline."""
    standby = deployment.redundant_pipeline()
    if standby is None:
        raise StateError("dynamic switch needs a redundant pipeline already running")
    if not standby.idle:
        raise StateError(f"standby pipeline {standby.id} is not idle")
    case = "dyn_A_case1" if standby.placement is Placement.NEW_CONTAINERS else "dyn_A_case2"
    if timing.plan_update_us:
        yield timing.plan_update_us
    deployment.set_plan(standby.id, new_plan)
    yield timing.switch_us
    old = deployment.switch_to(standby.id, RetirePolicy.STANDBY)
    return TransitionOutcome(
        strategy=case,
        downtime_kind=DEGRADED,
        memory=deployment.memory_footprint(),
        drain_pipeline_id=old.id,
    )


def dynamic_switch_B_case1_steps(
    deployment: Deployment, new_plan: PartitionPlan, timing: TimingParams
) -> TransitionSteps:
    """Spawn a pipeline in new containers, then redirect to it."""
    pipeline = deployment.create_pipeline(
        new_plan, Placement.NEW_CONTAINERS, transient=True
    )
    if deployment.base_image_cached:
        deployment.container_begin_init(pipeline.id)
        yield timing.initialisation_us
    else:
        deployment.container_begin_build(pipeline.id)
        yield timing.build_us
        deployment.container_begin_init(pipeline.id)
        yield timing.initialisation_us - timing.build_us
    deployment.container_set_running(pipeline.id)
    yield timing.switch_us
    old = deployment.switch_to(pipeline.id, RetirePolicy.TERMINATE_CONTAINERS)
    return TransitionOutcome(
        strategy="dyn_B_case1",
        downtime_kind=DEGRADED,
        memory=deployment.memory_footprint(),
        drain_pipeline_id=old.id,
    )


def dynamic_switch_B_case2_steps(
    deployment: Deployment, new_plan: PartitionPlan, timing: TimingParams
) -> TransitionSteps:
    """Start a second pipeline process inside the existing containers."""
    pipeline = deployment.create_pipeline(new_plan, Placement.EXISTING_CONTAINERS)
    yield timing.exec_us
    yield timing.switch_us
    old = deployment.switch_to(pipeline.id, RetirePolicy.EXIT_PROCESS)
    return TransitionOutcome(
        strategy="dyn_B_case2",
        downtime_kind=DEGRADED,
        memory=deployment.memory_footprint(),
        drain_pipeline_id=old.id,
    )


def steps_for(
    strategy: str,
    deployment: Deployment,
    new_plan: PartitionPlan,
    timing: TimingParams,
) -> TransitionSteps:
    """Build the step generator for a strategy name."""
    if strategy == "pause_resume":
        return pause_and_resume_steps(deployment, new_plan, timing)
    if strategy in ("dyn_A_case1", "dyn_A_case2"):
        standby = deployment.redundant_pipeline()
        if standby is not None:
            expected = (
                Placement.NEW_CONTAINERS
                if strategy == "dyn_A_case1"
                else Placement.EXISTING_CONTAINERS
            )
            if standby.placement is not expected:
                raise StateError(
                    f"{strategy} requested but the standby pipeline uses "
                    f"{standby.placement.value}"
                )
        return dynamic_switch_A_steps(deployment, new_plan, timing)
    if strategy == "dyn_B_case1":
        return dynamic_switch_B_case1_steps(deployment, new_plan, timing)
    if strategy == "dyn_B_case2":
        return dynamic_switch_B_case2_steps(deployment, new_plan, timing)
    raise ValueError(f"unknown strategy {strategy!r}")


def _settle_drained(deployment: Deployment, outcome: TransitionOutcome) -> None:
    if outcome.drain_pipeline_id is None:
        return
    old = deployment.pipeline(outcome.drain_pipeline_id)
    if old.role is PipelineRole.DRAINING and old.idle:
        deployment.finish_draining(old.id)


def run_transition(
    deployment: Deployment,
    steps: TransitionSteps,
    frames_dropped: int = 0,
    frames_degraded: int = 0,
) -> TransitionReport:
    """Drive a step generator against the deployment's own clock."""
    clock = deployment.clock
    start = clock.now_us()
    outcome: TransitionOutcome | None = None
    try:
        while True:
            clock.sleep_us(next(steps))
    except StopIteration as stop:
        outcome = stop.value
    assert outcome is not None
    end = clock.now_us()
    _settle_drained(deployment, outcome)
    return TransitionReport(
        strategy=outcome.strategy,
        downtime_kind=outcome.downtime_kind,
        window_start_us=start,
        window_end_us=end,
        frames_dropped=frames_dropped,
        frames_degraded=frames_degraded,
        memory=outcome.memory,
    )


def pause_and_resume(
    deployment: Deployment,
    new_plan: PartitionPlan,
    timing: TimingParams = DEFAULT_TIMING,
) -> TransitionReport:
    return run_transition(
        deployment, pause_and_resume_steps(deployment, new_plan, timing)
    )


def dynamic_switch_A(
    deployment: Deployment,
    new_plan: PartitionPlan,
    timing: TimingParams = DEFAULT_TIMING,
) -> TransitionReport:
    return run_transition(
        deployment, dynamic_switch_A_steps(deployment, new_plan, timing)
    )


def dynamic_switch_B_case1(
    deployment: Deployment,
    new_plan: PartitionPlan,
    timing: TimingParams = DEFAULT_TIMING,
) -> TransitionReport:
    return run_transition(
        deployment, dynamic_switch_B_case1_steps(deployment, new_plan, timing)
    )


def dynamic_switch_B_case2(
    deployment: Deployment,
    new_plan: PartitionPlan,
    timing: TimingParams = DEFAULT_TIMING,
) -> TransitionReport:
    return run_transition(
        deployment, dynamic_switch_B_case2_steps(deployment, new_plan, timing)
    )
