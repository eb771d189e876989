import random

import pytest

from neukonfig.pipeline import (
    ContainerState,
    Deployment,
    Frame,
    ManualClock,
    PipelineRole,
    Placement,
    StateError,
    TimingParams,
    spawn_pipeline,
)
from neukonfig.planner import NetworkConditions, optimal_split
from neukonfig.strategies import (
    DEGRADED,
    FULL_OUTAGE,
    STRATEGY_NAMES,
    dynamic_switch_A,
    dynamic_switch_B_case1,
    dynamic_switch_B_case2,
    expected_downtime_ms,
    expected_downtime_us,
    pause_and_resume,
    pause_and_resume_steps,
    run_transition,
    steps_for,
)
from neukonfig.timebase import us_to_ms


@pytest.fixture
def plans(p2):
    fast = optimal_split(p2, NetworkConditions(bandwidth=100.0))
    slow = optimal_split(p2, NetworkConditions(bandwidth=1.0))
    return fast, slow


def fresh_deployment(plans, strategy):
    """Deployment in the precondition each strategy needs."""
    d = Deployment(clock=ManualClock())
    d.add_baseline(plans[0])
    if strategy == "dyn_A_case1":
        spawn_pipeline(d, plans[0], Placement.NEW_CONTAINERS)
    elif strategy == "dyn_A_case2":
        spawn_pipeline(d, plans[0], Placement.EXISTING_CONTAINERS)
    return d


RUNNERS = {
    "pause_resume": pause_and_resume,
    "dyn_A_case1": dynamic_switch_A,
    "dyn_A_case2": dynamic_switch_A,
    "dyn_B_case1": dynamic_switch_B_case1,
    "dyn_B_case2": dynamic_switch_B_case2,
}


# -- downtime compositions ----------------------------------------------------


def test_pause_resume_window_is_the_update_time(plans):
    d = fresh_deployment(plans, "pause_resume")
    report = pause_and_resume(d, plans[1])
    assert report.window_us == 6_000_000
    assert report.t_downtime_ms == 6000.0
    assert report.downtime_kind == FULL_OUTAGE


def test_dynamic_A_window_is_the_switch_time(plans):
    d = fresh_deployment(plans, "dyn_A_case2")
    report = dynamic_switch_A(d, plans[1])
    assert report.window_us == 980
    assert report.strategy == "dyn_A_case2"
    assert report.downtime_kind == DEGRADED


def test_dynamic_B_case1_window_adds_initialisation(plans):
    d = fresh_deployment(plans, "dyn_B_case1")
    report = dynamic_switch_B_case1(d, plans[1])
    assert report.window_us == 1_900_980
    assert report.strategy == "dyn_B_case1"


def test_dynamic_B_case2_window_adds_exec(plans):
    d = fresh_deployment(plans, "dyn_B_case2")
    report = dynamic_switch_B_case2(d, plans[1])
    assert report.window_us == 600_980
    assert report.strategy == "dyn_B_case2"


def test_default_ordering_of_strategies(plans):
    windows = {}
    for strategy in STRATEGY_NAMES:
        d = fresh_deployment(plans, strategy)
        report = RUNNERS[strategy](d, plans[1])
        windows[strategy] = report.window_us
    assert windows["dyn_A_case1"] == windows["dyn_A_case2"]
    assert (windows["dyn_A_case2"] < windows["dyn_B_case2"]
            < windows["dyn_B_case1"] < windows["pause_resume"])


def test_reports_match_the_predicted_compositions(plans):
    rng = random.Random(424242)
    for _ in range(40):
        timing = TimingParams(
            t_update=us_to_ms(rng.randrange(0, 10_000_000)),
            t_switch=us_to_ms(rng.randrange(0, 100_000)),
            t_initialisation=us_to_ms(rng.randrange(0, 5_000_000)),
            t_exec=us_to_ms(rng.randrange(0, 2_000_000)),
            t_plan_update=us_to_ms(rng.randrange(0, 50_000)),
        )
        for strategy in STRATEGY_NAMES:
            d = fresh_deployment(plans, strategy)
            report = RUNNERS[strategy](d, plans[1], timing)
            assert report.window_us == expected_downtime_us(strategy, timing), (
                strategy, timing)
            assert report.t_downtime_ms == expected_downtime_ms(strategy, timing)


def test_zero_timings_give_zero_windows(plans):
    timing = TimingParams(t_update=0.0, t_switch=0.0, t_initialisation=0.0,
                          t_exec=0.0)
    for strategy in STRATEGY_NAMES:
        d = fresh_deployment(plans, strategy)
        report = RUNNERS[strategy](d, plans[1], timing)
        assert report.window_us == 0, strategy


def test_unknown_strategy_rejected(plans):
    d = fresh_deployment(plans, "pause_resume")
    with pytest.raises(ValueError, match="unknown strategy"):
        steps_for("warm_restart", d, plans[1], TimingParams())
    with pytest.raises(ValueError, match="unknown strategy"):
        expected_downtime_us("warm_restart")


# -- state effects --------------------------------------------------------------


def test_every_strategy_lands_on_the_new_plan(plans):
    for strategy in STRATEGY_NAMES:
        d = fresh_deployment(plans, strategy)
        RUNNERS[strategy](d, plans[1])
        d.check_invariants()
        assert d.active_pipeline.plan == plans[1], strategy
        assert d.active_pipeline.pair.state is ContainerState.RUNNING


def test_window_starts_at_the_clock_reading(plans):
    d = Deployment(clock=ManualClock(start_us=123_456))
    d.add_baseline(plans[0])
    report = pause_and_resume(d, plans[1])
    assert report.window_start_us == 123_456
    assert report.window_end_us == 123_456 + 6_000_000


def test_pause_resume_blocks_admission_mid_window(plans):
    d = fresh_deployment(plans, "pause_resume")
    steps = pause_and_resume_steps(d, plans[1], TimingParams())
    next(steps)  # paused, metadata update in progress
    active = d.active_pipeline
    assert active.paused
    assert d.offer(Frame(0, 0, 1.0))[0] == "queued"
    assert d.offer(Frame(1, 0, 1.0))[0] == "dropped"
    with pytest.raises(StopIteration):
        next(steps)
    assert not active.paused
    assert d.start_next(active.id).seq == 0


def test_dynamic_A_requires_a_standby(plans):
    d = Deployment(clock=ManualClock())
    d.add_baseline(plans[0])
    with pytest.raises(StateError, match="redundant pipeline"):
        dynamic_switch_A(d, plans[1])


def test_dynamic_A_requires_an_idle_standby(plans):
    d = fresh_deployment(plans, "dyn_A_case2")
    standby = d.redundant_pipeline()
    standby.queue.append(Frame(7, 0, 1.0))
    with pytest.raises(StateError, match="not idle"):
        dynamic_switch_A(d, plans[1])


def test_steps_for_rejects_mismatched_standby_placement(plans):
    d = fresh_deployment(plans, "dyn_A_case2")
    with pytest.raises(StateError, match="dyn_A_case1"):
        steps_for("dyn_A_case1", d, plans[1], TimingParams())


def test_dynamic_A_retires_the_old_pipeline_to_standby(plans):
    d = fresh_deployment(plans, "dyn_A_case2")
    old = d.active_pipeline
    dynamic_switch_A(d, plans[1])
    assert old.role is PipelineRole.REDUNDANT
    assert d.active_pipeline is not old


def test_dynamic_B_case1_terminates_the_old_containers(plans):
    d = fresh_deployment(plans, "dyn_B_case1")
    old = d.active_pipeline
    dynamic_switch_B_case1(d, plans[1])
    assert old.role is PipelineRole.DEAD
    assert old.pair.state is ContainerState.TERMINATED
    assert d.active_pipeline.pair is not old.pair


def test_dynamic_B_case2_exits_the_old_process(plans):
    d = fresh_deployment(plans, "dyn_B_case2")
    old = d.active_pipeline
    dynamic_switch_B_case2(d, plans[1])
    assert old.role is PipelineRole.DEAD
    assert old.pair.alive
    assert d.active_pipeline.pair is old.pair


# -- memory reporting ---------------------------------------------------------------


@pytest.mark.parametrize("strategy,total_tenths,transient", [
    ("pause_resume", 7631, False),
    ("dyn_A_case1", 15262, False),
    ("dyn_A_case2", 7631, False),
    ("dyn_B_case1", 15262, True),
    ("dyn_B_case2", 7631, False),
])
def test_memory_per_strategy(plans, strategy, total_tenths, transient):
    d = fresh_deployment(plans, strategy)
    report = RUNNERS[strategy](d, plans[1])
    assert report.memory.total_tenths == total_tenths
    assert report.memory.transient is transient
    assert report.memory.initial_tenths == 7631


def test_transient_overlap_clears_after_the_transition(plans):
    d = fresh_deployment(plans, "dyn_B_case1")
    dynamic_switch_B_case1(d, plans[1])
    assert d.memory_footprint().total_tenths == 7631


# -- driving a generator with frame counts ------------------------------------------


def test_run_transition_carries_frame_counts(plans):
    d = fresh_deployment(plans, "pause_resume")
    steps = pause_and_resume_steps(d, plans[1], TimingParams())
    report = run_transition(d, steps, frames_dropped=59, frames_degraded=0)
    assert report.frames_dropped == 59
    assert report.frames_degraded == 0
