"""Multi-model federated learning simulator.

Trains several unrelated models over one client population, assigning each
client processor to at most one model per round through optimized sampling
plans, with optional variance-reduced reuse of stale updates at aggregation.
"""

from .config import ConfigError, RunConfig, TopologySpec, build_state, parse_config
from .engine import (
    Method,
    ProtocolError,
    RoundMetrics,
    aggregate_plain,
    aggregate_stale_naive,
    aggregate_stale_vr,
    run_round,
    run_rounds,
)
from .models import DivergenceError, LocalUpdate, ModelSpec, TrainConfig, local_train
from .sampling import (
    Assignment,
    MagnitudeTable,
    PlanError,
    SamplingPlan,
    find_v0,
    gvr_magnitudes,
    lvr_magnitudes,
    random_plan,
    sample_assignment,
    solve_plan,
    stalevr_magnitudes,
)
from .staleness import StaleStore, beta_opt
from .synthdata import ClientDataset, DatasetSpec, partition_to_clients
from .topology import ClientProfile, ProcessorRef, SystemTopology, build_topology

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "ClientDataset",
    "ClientProfile",
    "ConfigError",
    "DatasetSpec",
    "DivergenceError",
    "LocalUpdate",
    "MagnitudeTable",
    "Method",
    "ModelSpec",
    "PlanError",
    "ProcessorRef",
    "ProtocolError",
    "RoundMetrics",
    "RunConfig",
    "SamplingPlan",
    "StaleStore",
    "SystemTopology",
    "TopologySpec",
    "TrainConfig",
    "aggregate_plain",
    "aggregate_stale_naive",
    "aggregate_stale_vr",
    "beta_opt",
    "build_state",
    "build_topology",
    "find_v0",
    "gvr_magnitudes",
    "local_train",
    "lvr_magnitudes",
    "parse_config",
    "partition_to_clients",
    "random_plan",
    "run_round",
    "run_rounds",
    "sample_assignment",
    "solve_plan",
    "stalevr_magnitudes",
]
