"""MoE layer latency composition.

An expert-parallel MoE layer is a gate GEMM, an all-to-all dispatch, one
grouped GEMM per EP rank running concurrently, and an all-to-all combine.
The synchronization barrier at the combine makes the layer wait for its
slowest rank, so the expert term is the max of the per-rank predictions;
dispatch and combine are billed serially around it.
"""

from __future__ import annotations

from dataclasses import dataclass

from frontier_sim.costmodel.features import EmptyBatch, GroupedGemmFeatures
from frontier_sim.costmodel.routing import ExpertAssignment, RoutingError
from frontier_sim.topology import LinkSpec, ModelConfig, collective_time


class TopologyMismatch(Exception):
    pass


@dataclass(frozen=True)
class MoeExecutionTopology:
    """Where an MoE layer runs: EP width, per-expert TP split, dispatch link."""

    ep_ranks: int
    moe_tp: int
    link: LinkSpec
    collective_overrides: dict[tuple[str, int], float] | None = None

    def validate(self, model: ModelConfig) -> None:
        if model.moe is None:
            raise TopologyMismatch("model has no MoE block")
        if self.ep_ranks < 1 or self.moe_tp < 1:
            raise TopologyMismatch("ep_ranks and moe_tp must be >= 1")
        if model.moe.num_experts % self.ep_ranks != 0:
            raise TopologyMismatch(
                f"{model.moe.num_experts} experts not divisible across {self.ep_ranks} ranks"
            )
        if model.moe.expert_d_ff % self.moe_tp != 0:
            raise TopologyMismatch(
                f"expert_d_ff {model.moe.expert_d_ff} not divisible by moe_tp {self.moe_tp}"
            )


@dataclass(frozen=True)
class MoeLayerBreakdown:
    gate_us: float
    dispatch_us: float
    expert_us: float            # max over ranks: the straggler barrier
    combine_us: float
    per_rank_us: tuple[float, ...]
    straggler_rank: int
    total_us: float

    def to_dict(self) -> dict:
        return {
            "gate_us": self.gate_us,
            "dispatch_us": self.dispatch_us,
            "expert_us": self.expert_us,
            "combine_us": self.combine_us,
            "per_rank_us": list(self.per_rank_us),
            "straggler_rank": self.straggler_rank,
            "total_us": self.total_us,
        }


def moe_layer_latency(
    assignment: ExpertAssignment,
    model: ModelConfig,
    topo: MoeExecutionTopology,
    cost_model,
) -> tuple[float, MoeLayerBreakdown]:
    """Latency in microseconds of one MoE layer, with its term breakdown."""
    topo.validate(model)
    moe = model.moe
    if assignment.num_experts != moe.num_experts:
        raise TopologyMismatch(
            f"assignment covers {assignment.num_experts} experts, model has {moe.num_experts}"
        )
    if assignment.total_tokens < 1:
        raise EmptyBatch("MoE layer invoked with no tokens")

    T = assignment.total_tokens
    gate_us = cost_model.predict_linear(T, moe.num_experts, model.d_model)

    routed_bytes = T * assignment.top_k * model.d_model * model.dtype_bytes
    bytes_per_rank = routed_bytes / topo.ep_ranks
    dispatch_us = collective_time(
        "all_to_all", bytes_per_rank, topo.ep_ranks, topo.link, topo.collective_overrides
    ) * 1e6
    combine_us = dispatch_us

    try:
        rank_counts = assignment.per_rank_counts(topo.ep_ranks)
    except RoutingError as exc:
        raise TopologyMismatch(str(exc)) from None
    d_ff_shard = moe.expert_d_ff // topo.moe_tp
    per_rank = []
    for counts in rank_counts:
        local_tokens = sum(counts)
        if local_tokens == 0:
            per_rank.append(0.0)
            continue
        features = GroupedGemmFeatures(
            total_tokens=local_tokens,
            expert_token_counts=counts,
            d_model=model.d_model,
            d_ff=d_ff_shard,
            top_k=assignment.top_k,
            mode="local",
        )
        per_rank.append(cost_model.predict_grouped_gemm(features))
    expert_us = max(per_rank)
    straggler = per_rank.index(expert_us)  # lowest rank wins ties

    total = gate_us + dispatch_us + expert_us + combine_us
    breakdown = MoeLayerBreakdown(
        gate_us=gate_us,
        dispatch_us=dispatch_us,
        expert_us=expert_us,
        combine_us=combine_us,
        per_rank_us=tuple(per_rank),
        straggler_rank=straggler,
        total_us=total,
    )
    return total, breakdown
