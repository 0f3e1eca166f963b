"""MoE distributed-training communication schedule simulator and selector."""

from .collectives import (
    CommTrace,
    TraceRecord,
    WorldState,
    allgather,
    allreduce,
    alltoall,
    dump_local,
    fused_combine,
    fused_dispatch,
    reduce_scatter,
    saa,
    split_local,
)
from .config import (
    ClusterSpec,
    ConfigError,
    ExperimentConfig,
    MoEConfig,
    ParallelLayout,
    PlacementCase,
    check_compatible,
    classify_placement,
    derive_capacity,
    group_members,
    groups_of,
    load_config,
)
from .costs import (
    AlphaBeta,
    CostProfile,
    CostReport,
    cost_baseline,
    cost_fused,
    cost_s1,
    cost_s2,
    fit_alpha_beta,
    fit_profile,
    load_profile,
    predict_collective,
    select_schedule,
)
from .dataplane import (
    ExpertWeights,
    GateOutput,
    SCHEDULES,
    ScheduleResult,
    expert_shard_forward,
    gate,
    oracle_errors,
    reference_forward,
    run_schedule,
)
from .timing import (
    PlacementError,
    ScheduleTimes,
    TimingReport,
    TransferPlan,
    TransferStep,
    lower_collective,
    schedule_comm_times,
    simulate_plan,
    time_saa,
    time_trace,
    verify_inequalities,
)

__all__ = [
    "AlphaBeta",
    "ClusterSpec",
    "CommTrace",
    "ConfigError",
    "CostProfile",
    "CostReport",
    "ExperimentConfig",
    "ExpertWeights",
    "GateOutput",
    "MoEConfig",
    "ParallelLayout",
    "PlacementCase",
    "PlacementError",
    "SCHEDULES",
    "ScheduleResult",
    "ScheduleTimes",
    "TimingReport",
    "TraceRecord",
    "TransferPlan",
    "TransferStep",
    "WorldState",
    "allgather",
    "allreduce",
    "alltoall",
    "check_compatible",
    "classify_placement",
    "cost_baseline",
    "cost_fused",
    "cost_s1",
    "cost_s2",
    "derive_capacity",
    "dump_local",
    "expert_shard_forward",
    "fit_alpha_beta",
    "fit_profile",
    "fused_combine",
    "fused_dispatch",
    "gate",
    "group_members",
    "groups_of",
    "load_config",
    "load_profile",
    "lower_collective",
    "oracle_errors",
    "predict_collective",
    "reduce_scatter",
    "reference_forward",
    "run_schedule",
    "saa",
    "schedule_comm_times",
    "select_schedule",
    "simulate_plan",
    "split_local",
    "time_saa",
    "time_trace",
    "verify_inequalities",
]
