import pytest
from hypothesis import given, strategies as st

from neukonfig.pipeline import (
    Container,
    ContainerState,
    Deployment,
    Frame,
    FrameStatus,
    ManualClock,
    MemoryBudgetError,
    Placement,
    PipelineRole,
    RetirePolicy,
    StateError,
    TimingParams,
    spawn_pipeline,
    switch_dispatcher,
    update_metadata,
)
from neukonfig.planner import NetworkConditions, optimal_split


@pytest.fixture
def plans(p2):
    fast = optimal_split(p2, NetworkConditions(bandwidth=100.0))
    slow = optimal_split(p2, NetworkConditions(bandwidth=1.0))
    return fast, slow


@pytest.fixture
def deployment(plans):
    d = Deployment(clock=ManualClock())
    d.add_baseline(plans[0])
    return d


# -- clock --------------------------------------------------------------------


def test_manual_clock_only_moves_when_told():
    clock = ManualClock(start_us=5)
    assert clock.now_us() == 5
    clock.sleep_us(0)
    assert clock.now_us() == 5
    clock.sleep_us(17)
    assert clock.now_us() == 22
    with pytest.raises(ValueError):
        clock.sleep_us(-1)


# -- container state machine ----------------------------------------------------

# Independent restatement of the allowed lifecycle; the cached-image shortcut
# is handled separately below.
CONTAINER_MODEL = {
    ("absent", "building"),
    ("building", "initialising"),
    ("initialising", "running"),
    ("running", "paused"),
    ("paused", "running"),
    ("running", "terminated"),
}


def test_container_happy_path_uncached():
    c = Container("c", base_image_cached=False)
    for s in (ContainerState.BUILDING, ContainerState.INITIALISING,
              ContainerState.RUNNING, ContainerState.PAUSED,
              ContainerState.RUNNING, ContainerState.TERMINATED):
        c.to(s)
    assert not c.alive


def test_build_skip_requires_cached_image():
    cached = Container("a", base_image_cached=True)
    cached.to(ContainerState.INITIALISING)
    assert cached.state is ContainerState.INITIALISING

    uncached = Container("b", base_image_cached=False)
    with pytest.raises(StateError, match="not cached"):
        uncached.to(ContainerState.INITIALISING)
    assert uncached.state is ContainerState.ABSENT


@given(
    cached=st.booleans(),
    ops=st.lists(st.sampled_from([s for s in ContainerState
                                  if s is not ContainerState.ABSENT]),
                 max_size=12),
)
def test_container_machine_matches_model(cached, ops):
    c = Container("m", base_image_cached=cached)
    state = ContainerState.ABSENT
    for target in ops:
        legal = (state.value, target.value) in CONTAINER_MODEL or (
            cached
            and state is ContainerState.ABSENT
            and target is ContainerState.INITIALISING
        )
        if legal:
            c.to(target)
            state = target
        else:
            with pytest.raises(StateError):
                c.to(target)
        assert c.state is state


# -- frames ---------------------------------------------------------------------


def test_frame_lifecycle():
    f = Frame(seq=0, arrival_us=0, payload_size=1.0)
    f.advance(FrameStatus.IN_FLIGHT)
    f.advance(FrameStatus.COMPLETED)
    assert f.status is FrameStatus.COMPLETED


@pytest.mark.parametrize("path,bad", [
    ((), FrameStatus.COMPLETED),
    ((FrameStatus.IN_FLIGHT,), FrameStatus.DROPPED),
    ((FrameStatus.IN_FLIGHT, FrameStatus.COMPLETED), FrameStatus.IN_FLIGHT),
    ((FrameStatus.DROPPED,), FrameStatus.IN_FLIGHT),
])
def test_frame_illegal_moves_raise(path, bad):
    f = Frame(seq=1, arrival_us=0, payload_size=1.0)
    for step in path:
        f.advance(step)
    with pytest.raises(StateError):
        f.advance(bad)


# -- deployment basics ------------------------------------------------------------


def test_baseline_is_active_and_targeted(deployment):
    p = deployment.active_pipeline
    assert p.role is PipelineRole.ACTIVE
    assert deployment.dispatcher_target == p.id
    assert p.pair.state is ContainerState.RUNNING
    deployment.check_invariants()


def test_second_baseline_rejected(deployment, plans):
    with pytest.raises(StateError):
        deployment.add_baseline(plans[0])


def test_existing_placement_needs_a_live_container(plans):
    d = Deployment()
    with pytest.raises(StateError, match="no live container"):
        d.create_pipeline(plans[0], Placement.EXISTING_CONTAINERS)


def test_memory_steps_must_be_tenths():
    with pytest.raises(ValueError, match="0.1 MB"):
        Deployment(container_mb=763.15)


# -- timed operation wrappers ------------------------------------------------------


def test_spawn_new_cached_takes_initialisation_time(deployment, plans):
    clock = deployment.clock
    seen = []
    deployment.on_event = lambda kind, payload: seen.append((kind, payload))
    t0 = clock.now_us()
    timing = TimingParams(t_initialisation=1900.0)
    p = spawn_pipeline(deployment, plans[1], Placement.NEW_CONTAINERS, timing)
    assert clock.now_us() - t0 == 1_900_000
    assert p.role is PipelineRole.REDUNDANT
    states = [d["state"] for k, d in seen if k == "container_state"]
    assert states == ["initialising", "running"]  # build skipped


def test_spawn_new_uncached_passes_building(plans):
    clock = ManualClock()
    seen = []
    d = Deployment(clock=clock, base_image_cached=False,
                   on_event=lambda kind, payload: seen.append((kind, payload)))
    d.add_baseline(plans[0])
    t0 = clock.now_us()
    timing = TimingParams(t_initialisation=1900.0, t_build=400.0)
    spawn_pipeline(d, plans[1], Placement.NEW_CONTAINERS, timing)
    assert clock.now_us() - t0 == 1_900_000
    states = [p["state"] for k, p in seen if k == "container_state"]
    assert "building" in states
    assert states[-1] == "running"


def test_spawn_into_existing_containers_takes_exec_time(deployment, plans):
    clock = deployment.clock
    t0 = clock.now_us()
    p = spawn_pipeline(deployment, plans[1], Placement.EXISTING_CONTAINERS,
                       TimingParams(t_exec=600.0))
    assert clock.now_us() - t0 == 600_000
    assert p.pair is deployment.active_pipeline.pair


def test_update_metadata_requires_pause(deployment, plans):
    active = deployment.active_pipeline
    with pytest.raises(StateError, match="paused"):
        update_metadata(deployment, active.id, plans[1], 6000.0)
    clock = deployment.clock
    deployment.pause(active.id)
    t0 = clock.now_us()
    update_metadata(deployment, active.id, plans[1], 6000.0)
    assert clock.now_us() - t0 == 6_000_000
    assert active.plan == plans[1]
    deployment.resume(active.id)
    assert active.pair.state is ContainerState.RUNNING


def test_switch_dispatcher_redirects_and_drains(deployment, plans):
    old = deployment.active_pipeline
    new = spawn_pipeline(deployment, plans[1], Placement.EXISTING_CONTAINERS)
    clock = deployment.clock
    t0 = clock.now_us()
    returned = switch_dispatcher(deployment, new.id, 0.98)
    assert clock.now_us() - t0 == 980
    assert returned is old
    assert old.role is PipelineRole.DRAINING
    assert new.role is PipelineRole.ACTIVE
    assert deployment.dispatcher_target == new.id
    deployment.check_invariants()


def test_switch_to_non_redundant_rejected(deployment):
    active = deployment.active_pipeline
    with pytest.raises(StateError, match="not redundant"):
        switch_dispatcher(deployment, active.id, 0.98)


def test_switch_to_paused_target_rejected(deployment, plans):
    new = spawn_pipeline(deployment, plans[1], Placement.NEW_CONTAINERS)
    deployment.pause(new.id)
    with pytest.raises(StateError, match="not running"):
        deployment.switch_to(new.id, RetirePolicy.STANDBY)


def test_set_plan_allowed_for_idle_standby_only(deployment, plans):
    standby = spawn_pipeline(deployment, plans[0], Placement.EXISTING_CONTAINERS)
    deployment.set_plan(standby.id, plans[1])
    assert standby.plan == plans[1]
    with pytest.raises(StateError):
        deployment.set_plan(deployment.active_pipeline.id, plans[1])


# -- draining and retirement ---------------------------------------------------------


def drained_switch(deployment, plans, policy, placement=Placement.EXISTING_CONTAINERS):
    new = spawn_pipeline(deployment, plans[1], placement)
    old = switch_dispatcher(deployment, new.id, 0.98, retire_policy=policy)
    return old, new


def test_finish_draining_standby_returns_to_redundant(deployment, plans):
    old, _ = drained_switch(deployment, plans, RetirePolicy.STANDBY)
    deployment.finish_draining(old.id)
    assert old.role is PipelineRole.REDUNDANT


def test_finish_draining_exit_process_keeps_containers(deployment, plans):
    old, new = drained_switch(deployment, plans, RetirePolicy.EXIT_PROCESS)
    deployment.finish_draining(old.id)
    assert old.role is PipelineRole.DEAD
    assert old.pair.alive  # shared with the new pipeline
    assert new.pair is old.pair


def test_finish_draining_terminates_dedicated_containers(deployment, plans):
    old, new = drained_switch(deployment, plans,
                              RetirePolicy.TERMINATE_CONTAINERS,
                              placement=Placement.NEW_CONTAINERS)
    deployment.finish_draining(old.id)
    assert old.role is PipelineRole.DEAD
    assert old.pair.state is ContainerState.TERMINATED
    assert new.pair is not old.pair


def test_finish_draining_guards(deployment, plans):
    with pytest.raises(StateError, match="not draining"):
        deployment.finish_draining(deployment.active_pipeline.id)
    old, _ = drained_switch(deployment, plans, RetirePolicy.STANDBY)
    old.queue.append(Frame(seq=9, arrival_us=0, payload_size=1.0))
    with pytest.raises(StateError, match="frames"):
        deployment.finish_draining(old.id)


def test_invariant_violation_is_detected(deployment, plans):
    standby = spawn_pipeline(deployment, plans[1], Placement.EXISTING_CONTAINERS)
    standby.role = PipelineRole.ACTIVE  # corrupt on purpose
    with pytest.raises(StateError, match="exactly one active"):
        deployment.check_invariants()


# -- frame admission ---------------------------------------------------------------


def test_offer_started_queued_dropped(deployment):
    first = Frame(0, 0, 1.0)
    second = Frame(1, 0, 1.0)
    third = Frame(2, 0, 1.0)
    assert deployment.offer(first)[0] == "started"
    assert deployment.offer(second)[0] == "queued"
    assert deployment.offer(third)[0] == "dropped"
    assert third.status is FrameStatus.DROPPED


def test_paused_pipeline_never_enters_service(deployment):
    active = deployment.active_pipeline
    deployment.pause(active.id)
    disposition, _ = deployment.offer(Frame(0, 0, 1.0))
    assert disposition == "queued"
    assert deployment.offer(Frame(1, 0, 1.0))[0] == "dropped"
    assert deployment.start_next(active.id) is None
    deployment.resume(active.id)
    started = deployment.start_next(active.id)
    assert started is not None and started.seq == 0


def test_complete_without_in_flight_raises(deployment):
    with pytest.raises(StateError, match="no frame in flight"):
        deployment.complete(deployment.active_pipeline.id)


def test_complete_then_start_next(deployment):
    deployment.offer(Frame(0, 0, 1.0))
    deployment.offer(Frame(1, 0, 1.0))
    done = deployment.complete(deployment.active_pipeline.id)
    assert done.seq == 0 and done.status is FrameStatus.COMPLETED
    nxt = deployment.start_next(deployment.active_pipeline.id)
    assert nxt.seq == 1


# -- memory accounting -----------------------------------------------------------


def footprint(deployment):
    return deployment.memory_footprint()


def test_baseline_memory(deployment):
    fp = footprint(deployment)
    assert fp.total_tenths == 7631
    assert fp.total_mb == 763.1
    assert fp.additional_tenths == 0
    assert not fp.transient


def test_standby_in_new_containers_doubles_memory(deployment, plans):
    spawn_pipeline(deployment, plans[1], Placement.NEW_CONTAINERS)
    fp = footprint(deployment)
    assert fp.total_tenths == 15262
    assert fp.additional_mb == 763.1
    assert not fp.transient


def test_standby_in_existing_containers_is_free(deployment, plans):
    spawn_pipeline(deployment, plans[1], Placement.EXISTING_CONTAINERS)
    fp = footprint(deployment)
    assert fp.total_tenths == 7631
    assert fp.additional_tenths == 0
    assert not fp.transient


def test_replacement_overlap_is_transient(deployment, plans):
    old, _ = drained_switch(deployment, plans,
                            RetirePolicy.TERMINATE_CONTAINERS,
                            placement=Placement.NEW_CONTAINERS)
    fp = footprint(deployment)
    assert fp.total_tenths == 15262
    assert fp.transient
    deployment.finish_draining(old.id)
    after = footprint(deployment)
    assert after.total_tenths == 7631
    assert not after.transient


def test_explicitly_transient_pipeline_is_flagged(deployment, plans):
    spawn_pipeline(deployment, plans[1], Placement.NEW_CONTAINERS, transient=True)
    fp = footprint(deployment)
    assert fp.total_tenths == 15262
    assert fp.transient


def test_pipeline_cost_in_shared_containers(plans):
    d = Deployment(pipeline_mb=10.0)
    d.add_baseline(plans[0])
    spawn_pipeline(d, plans[1], Placement.EXISTING_CONTAINERS)
    fp = d.memory_footprint()
    assert fp.total_tenths == 7631 + 100
    assert fp.additional_mb == 10.0


def test_memory_budget_blocks_second_pair(plans):
    d = Deployment(memory_budget_mb=1000.0)
    d.add_baseline(plans[0])
    with pytest.raises(MemoryBudgetError):
        d.create_pipeline(plans[1], Placement.NEW_CONTAINERS)
    roomy = Deployment(memory_budget_mb=1600.0)
    roomy.add_baseline(plans[0])
    roomy.create_pipeline(plans[1], Placement.NEW_CONTAINERS)
