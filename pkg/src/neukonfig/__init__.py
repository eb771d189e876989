"""Edge/cloud DNN partitioning with live reconfiguration strategies.

The package answers three questions about a split DNN inference pipeline:
where to cut the network for the current bandwidth, CPU, and memory
conditions; how to move a running deployment from one cut to another; and
what each way of moving costs in downtime, dropped frames, and memory.
"""

from .pipeline import (
    DEFAULT_CONTAINER_MB,
    DEFAULT_PIPELINE_MB,
    DEFAULT_TIMING,
    Container,
    ContainerState,
    Deployment,
    Frame,
    FrameStatus,
    ManualClock,
    MemoryBudgetError,
    MemoryFootprint,
    Pipeline,
    PipelineRole,
    Placement,
    RetirePolicy,
    StateError,
    TimingParams,
    WallClock,
)
from .planner import (
    LatencyBreakdown,
    NetworkConditions,
    PartitionPlan,
    PlannerError,
    estimate_latency,
    optimal_split,
    should_repartition,
    split_payload,
)
from .profiles import (
    BUNDLED_PROFILES,
    ComputeUnit,
    DnnProfile,
    LayerGraph,
    ProfileError,
    RegionError,
    bundled_profile,
    collapse_blocks,
    load_profile,
    parse_profile,
    resolve_profile,
    scale_compute,
)
from .sim import (
    ExperimentConfig,
    MetricsLog,
    SimError,
    SweepCell,
    SweepGrid,
    frame_drop_rate,
    measured_downtime_us,
    run_experiment,
    summarize,
    sweep,
)
from .strategies import (
    STRATEGY_NAMES,
    TransitionReport,
    dynamic_switch_A,
    dynamic_switch_B_case1,
    dynamic_switch_B_case2,
    expected_downtime_ms,
    pause_and_resume,
)
from .timebase import TimeConversionError, ms_to_us, us_to_ms

__version__ = "0.1.0"

__all__ = [
    "BUNDLED_PROFILES",
    "ComputeUnit",
    "Container",
    "ContainerState",
    "DEFAULT_CONTAINER_MB",
    "DEFAULT_PIPELINE_MB",
    "DEFAULT_TIMING",
    "Deployment",
    "DnnProfile",
    "ExperimentConfig",
    "Frame",
    "FrameStatus",
    "LatencyBreakdown",
    "LayerGraph",
    "ManualClock",
    "MemoryBudgetError",
    "MemoryFootprint",
    "MetricsLog",
    "NetworkConditions",
    "PartitionPlan",
    "Pipeline",
    "PipelineRole",
    "Placement",
    "PlannerError",
    "ProfileError",
    "RegionError",
    "RetirePolicy",
    "STRATEGY_NAMES",
    "SimError",
    "StateError",
    "SweepCell",
    "SweepGrid",
    "TimeConversionError",
    "TimingParams",
    "TransitionReport",
    "WallClock",
    "bundled_profile",
    "collapse_blocks",
    "dynamic_switch_A",
    "dynamic_switch_B_case1",
    "dynamic_switch_B_case2",
    "estimate_latency",
    "expected_downtime_ms",
    "frame_drop_rate",
    "load_profile",
    "measured_downtime_us",
    "ms_to_us",
    "optimal_split",
    "pause_and_resume",
    "parse_profile",
    "resolve_profile",
    "run_experiment",
    "scale_compute",
    "should_repartition",
    "split_payload",
    "summarize",
    "sweep",
    "us_to_ms",
]
