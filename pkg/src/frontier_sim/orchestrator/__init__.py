"""Serving workflows: co-located, prefill/decode split, attention/FFN split."""

from frontier_sim.orchestrator.af import (
    AfPipelineConfig,
    AfSimulation,
    AfStepCosts,
    build_af_graph,
    expected_edge_count,
    expected_node_count,
    generate_token_af,
    partition_micro_batches,
    run_af_graph,
)
from frontier_sim.orchestrator.base import (
    RequestCannotFit,
    RoutingPolicySpec,
    ServingSimulation,
    SimulationError,
)
from frontier_sim.orchestrator.colocated import ColocatedSimulation
from frontier_sim.orchestrator.pd import PdSimulation

__all__ = [
    "AfPipelineConfig",
    "AfSimulation",
    "AfStepCosts",
    "build_af_graph",
    "run_af_graph",
    "generate_token_af",
    "partition_micro_batches",
    "expected_node_count",
    "expected_edge_count",
    "ColocatedSimulation",
    "PdSimulation",
    "ServingSimulation",
    "SimulationError",
    "RequestCannotFit",
    "RoutingPolicySpec",
    "make_simulation",
]


def make_simulation(mode, deployment, requests, policy, af=None, **kwargs):
    if mode == "colocated":
        return ColocatedSimulation(deployment, requests, policy, **kwargs)
    if mode == "pd":
        return PdSimulation(deployment, requests, policy, **kwargs)
    if mode == "af":
        return AfSimulation(deployment, requests, policy, af=af, **kwargs)
    raise ValueError(f"unknown mode {mode!r}")
