"""Planning library and deterministic simulator for network-based live
model autoscaling in GPU serving clusters."""

from .autoscaler import (
    LoadMetrics,
    ScalePolicy,
    baseline_load_time,
    profile_instance_capacity,
    should_scale_down,
    should_scale_up,
)
from .livescale import (
    LiveScaleSession,
    PipelineConfig,
    SloProfile,
    ZigzagTimeline,
    best_effort_pipeline,
    configure_pipeline,
    enumerate_pipeline_optimum,
    mutate_prefill_to_decode,
    run_transition_protocol,
    select_live_pairs,
    steady_state_throughput,
    zigzag_schedule,
)
from .parampool import MODEL_PRESETS, ModelSpec, ParameterPool, SourceRef
from .planner import (
    PlanEstimate,
    PlanSource,
    PlanTarget,
    ScalePlan,
    ScaleRequest,
    build_scale_request,
    estimate_completion,
    generate_plan,
    group_targets,
    optimal_plan_completion,
    plan_is_interference_free,
    prune_sources,
)
from .presets import PRESETS
from .topology import (
    DirectedLink,
    FlowSet,
    HostSpec,
    NetworkTopology,
    load_topology,
    transfer_seconds,
)
from .traces import TraceRecord, generate_trace, load_trace

__version__ = "0.1.0"
