"""Split-point selection over profiled compute and transfer costs.

End-to-end latency for a split ``s`` of an N-unit profile is the sum of three
terms: edge compute for units 1..s (inflated by CPU availability), transfer of
the payload crossing the split, and cloud compute for units s+1..N. The
transfer term is charged at every split, including the all-edge split where
the final result still travels to the consumer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .profiles import DnnProfile


class PlannerError(ValueError):
    """Raised for out-of-range splits or invalid network conditions."""


@dataclass(frozen=True)
class NetworkConditions:
    """Snapshot of the link and edge-host state a plan is computed against."""

    bandwidth: float  # Mbps, > 0
    latency: float = 0.0  # ms one-way, >= 0
    cpu_availability: float = 1.0  # fraction of edge CPU left for inference
    memory_availability: float = 1.0  # fraction of edge memory available

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise PlannerError(f"bandwidth must be > 0 Mbps, got {self.bandwidth}")
        if self.latency < 0:
            raise PlannerError(f"latency must be >= 0 ms, got {self.latency}")
        if not 0 < self.cpu_availability <= 1:
            raise PlannerError(
                f"cpu_availability must be in (0, 1], got {self.cpu_availability}"
            )
        if not 0 < self.memory_availability <= 1:
            raise PlannerError(
                f"memory_availability must be in (0, 1], got {self.memory_availability}"
            )


@dataclass(frozen=True)
class LatencyBreakdown:
    """Per-term latency of one candidate split, all in milliseconds."""

    split: int
    t_edge: float
    t_transfer: float
    t_cloud: float
    t_total: float


@dataclass(frozen=True)
class PartitionPlan:
    """A chosen split together with the numbers that justified it."""

    profile_name: str
    split: int
    breakdown: LatencyBreakdown
    conditions: NetworkConditions


def split_payload(profile: DnnProfile, split: int) -> float:
    """Mb crossing the edge/cloud boundary at ``split``."""
    if split == 0:
        return profile.input_size
    return profile.units[split - 1].output_size


def estimate_latency(
    profile: DnnProfile, split: int, conditions: NetworkConditions
) -> LatencyBreakdown:
    """Latency breakdown for placing units 1..split on the edge.

    ``split`` ranges over 0 (everything on the cloud) to N (everything on the
    edge).
    """
    n = len(profile.units)
    if not 0 <= split <= n:
        raise PlannerError(f"split must be in [0, {n}], got {split}")
    t_edge = (
        sum(u.edge_time for u in profile.units[:split]) / conditions.cpu_availability
    )
    t_cloud = sum(u.cloud_time for u in profile.units[split:])
    t_transfer = (
        conditions.latency
        + 1000.0 * split_payload(profile, split) / conditions.bandwidth
    )
    return LatencyBreakdown(
        split=split,
        t_edge=t_edge,
        t_transfer=t_transfer,
        t_cloud=t_cloud,
        t_total=t_edge + t_transfer + t_cloud,
    )


def optimal_split(profile: DnnProfile, conditions: NetworkConditions) -> PartitionPlan:
    """Pick the split minimising total latency; ties go to the larger split.

    Placing more work on the edge at equal cost keeps less intermediate state
    in flight, so the later split wins a tie.
    """
    best: LatencyBreakdown | None = None
    for split in range(len(profile.units) + 1):
        candidate = estimate_latency(profile, split, conditions)
        if best is None or candidate.t_total <= best.t_total:
            best = candidate
    assert best is not None
    return PartitionPlan(
        profile_name=profile.name,
        split=best.split,
        breakdown=best,
        conditions=conditions,
    )


def should_repartition(
    current: PartitionPlan,
    profile: DnnProfile,
    new_conditions: NetworkConditions,
    min_gain: float = 0.0,
) -> tuple[bool, PartitionPlan]:
    """Decide whether changed conditions justify moving the split.

    The current split is re-costed under the new conditions and compared with
    the fresh optimum. A move is taken only when the optimum lands on a
    different split and improves on the re-costed current total by at least
    ``min_gain`` (a relative fraction; 0 means any strict improvement).
    Returns ``(decision, plan)`` where the plan is the fresh optimum when
    moving and the re-costed current split when keeping.
    """
    if min_gain < 0:
        raise PlannerError(f"min_gain must be >= 0, got {min_gain}")
    candidate = optimal_split(profile, new_conditions)
    stale = estimate_latency(profile, current.split, new_conditions)
    keep = PartitionPlan(
        profile_name=profile.name,
        split=current.split,
        breakdown=stale,
        conditions=new_conditions,
    )
    if candidate.split == current.split:
        return False, keep
    improvement = (stale.t_total - candidate.breakdown.t_total) / stale.t_total
    if improvement <= 0 or improvement < min_gain:
        return False, keep
    return True, candidate
