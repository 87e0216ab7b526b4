"""Per-operator runtime prediction: analytic roofline and learned tree ensembles."""

from frontier_sim.costmodel.features import (
    AttentionFeatures,
    EmptyBatch,
    GroupedGemmFeatures,
    SCHEMAS,
)
from frontier_sim.costmodel.forest import BaggedForest, ForestHyperparams
from frontier_sim.costmodel.model import (
    CostModel,
    DegenerateTarget,
    ErrorCdf,
    EmptyDataset,
    FitReport,
    InsufficientData,
    LearnedOperatorModel,
    NonPositiveDim,
    OperatorDataset,
    SchemaMismatch,
    eval_model,
    fit_model,
    load_model_file,
    read_profiling_csv,
    write_profiling_csv,
)
from frontier_sim.costmodel.routing import ExpertAssignment, InvalidTopK, route_tokens
from frontier_sim.costmodel.moe import MoeExecutionTopology, MoeLayerBreakdown, TopologyMismatch, moe_layer_latency

__all__ = [
    "AttentionFeatures",
    "GroupedGemmFeatures",
    "EmptyBatch",
    "SCHEMAS",
    "BaggedForest",
    "ForestHyperparams",
    "CostModel",
    "LearnedOperatorModel",
    "OperatorDataset",
    "ErrorCdf",
    "FitReport",
    "fit_model",
    "eval_model",
    "load_model_file",
    "read_profiling_csv",
    "write_profiling_csv",
    "SchemaMismatch",
    "NonPositiveDim",
    "InsufficientData",
    "DegenerateTarget",
    "EmptyDataset",
    "ExpertAssignment",
    "InvalidTopK",
    "route_tokens",
    "MoeExecutionTopology",
    "MoeLayerBreakdown",
    "TopologyMismatch",
    "moe_layer_latency",
]
