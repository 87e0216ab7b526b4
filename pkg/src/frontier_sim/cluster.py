"""Replica-level serving mechanics: KV memory, batch planning, batch cost.

Admission reserves a request's full KV footprint (prompt + output tokens)
up front, which is what lets the simulator skip preemption entirely: a
request admitted to a replica is guaranteed to finish there. The pool still
accounts incrementally, so traces expose used_tokens at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from frontier_sim.costmodel.features import AttentionFeatures, GroupedGemmFeatures
from frontier_sim.costmodel.model import CostModel
from frontier_sim.costmodel.moe import MoeExecutionTopology, MoeLayerBreakdown, moe_layer_latency
from frontier_sim.costmodel.routing import ExpertAssignment
from frontier_sim.topology import LinkSpec, ModelConfig, ParallelismConfig, collective_time, transfer_time
from frontier_sim.workload import Request


class Backpressure(Exception):
    """Not a failure: the pool cannot take this reservation right now."""

    def __init__(self, needed: int, headroom: int) -> None:
        super().__init__(f"need {needed} KV tokens, headroom is {headroom}")
        self.needed = needed
        self.headroom = headroom


class UnknownAllocation(Exception):
    pass


class KvPool:
    """Finite KV-cache capacity of one replica, in tokens.

    Paged mode rounds every allocation up to whole blocks, mirroring
    block-granular memory managers; exact mode accounts token-for-token.
    """

    def __init__(self, capacity_tokens: int, block_tokens: int | None = None) -> None:
        if capacity_tokens < 0:
            raise ValueError("capacity must be >= 0")
        if block_tokens is not None and block_tokens < 1:
            raise ValueError("block_tokens must be >= 1")
        self.capacity_tokens = capacity_tokens
        self.block_tokens = block_tokens
        self.used_tokens = 0
        self._raw: dict[str, int] = {}
        self._charged: dict[str, int] = {}

    def rounded(self, tokens: int) -> int:
        if self.block_tokens is None:
            return tokens
        return math.ceil(tokens / self.block_tokens) * self.block_tokens

    @property
    def headroom(self) -> int:
        return self.capacity_tokens - self.used_tokens

    def allocation(self, request_id: str) -> int:
        return self._charged.get(request_id, 0)

    def reserve(self, request_id: str, tokens: int) -> None:
        """Grow the request's allocation by `tokens`, or raise Backpressure."""
        if tokens < 0:
            raise ValueError("tokens must be >= 0")
        if tokens == 0:
            return
        raw = self._raw.get(request_id, 0) + tokens
        charge = self.rounded(raw) - self._charged.get(request_id, 0)
        if charge > self.headroom:
            raise Backpressure(charge, self.headroom)
        self._raw[request_id] = raw
        self._charged[request_id] = self._charged.get(request_id, 0) + charge
        self.used_tokens += charge

    def release(self, request_id: str) -> int:
        """Evict the request's KV allocation; returns the freed token count."""
        if request_id not in self._charged:
            raise UnknownAllocation(f"request {request_id!r} holds no allocation")
        freed = self._charged.pop(request_id)
        del self._raw[request_id]
        self.used_tokens -= freed
        return freed

    def snapshot(self) -> dict:
        return {
            "used_tokens": self.used_tokens,
            "capacity_tokens": self.capacity_tokens,
        }


@dataclass(frozen=True)
class SchedulerPolicy:
    admission: str = "fcfs"          # fcfs | fcfs_skip | priority
    priority_key: str = "prompt_tokens"  # used by priority admission
    max_num_seqs: int = 256
    max_batch_tokens: int = 8192
    memory_mode: str = "exact"       # exact | paged
    block_tokens: int = 16

    def validate(self) -> None:
        if self.admission not in ("fcfs", "fcfs_skip", "priority"):
            raise ValueError(f"unknown admission policy {self.admission!r}")
        if self.priority_key not in ("prompt_tokens", "arrival_time"):
            raise ValueError(f"unknown priority key {self.priority_key!r}")
        if self.max_num_seqs < 1 or self.max_batch_tokens < 1:
            raise ValueError("batch budgets must be positive")
        if self.memory_mode not in ("exact", "paged"):
            raise ValueError(f"unknown memory mode {self.memory_mode!r}")
        if self.block_tokens < 1:
            raise ValueError("block_tokens must be >= 1")

    def pool_block_tokens(self) -> int | None:
        return self.block_tokens if self.memory_mode == "paged" else None


@dataclass(frozen=True)
class BatchMember:
    request_id: str
    query_len: int
    context_len: int


@dataclass(frozen=True)
class BatchPlan:
    phase: str  # prefill | decode
    members: tuple[BatchMember, ...]

    @property
    def query_token_total(self) -> int:
        return sum(m.query_len for m in self.members)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def request_ids(self) -> list[str]:
        return [m.request_id for m in self.members]


def build_prefill_batch(
    queued: Sequence[Request],
    running_count: int,
    policy: SchedulerPolicy,
    pool: KvPool,
    reserve_full_footprint: bool = True,
) -> BatchPlan:
    """Plan the next prefill batch; pure with respect to pool and queue.

    Admission order follows the policy; under strict fcfs the first request
    that does not fit blocks everything behind it (head-of-line blocking),
    while fcfs_skip keeps scanning. KV headroom is judged against the full
    lifetime footprint so an admitted request can always finish.
    """
    if policy.admission == "priority":
        key = (lambda r: (r.prompt_tokens, r.arrival_time, r.id)) \
            if policy.priority_key == "prompt_tokens" \
            else (lambda r: (r.arrival_time, r.id))
        candidates = sorted(queued, key=key)
    else:
        candidates = list(queued)
    members: list[BatchMember] = []
    seats = policy.max_num_seqs - running_count
    tokens = 0
    headroom = pool.headroom
    for req in candidates:
        footprint = req.kv_footprint_tokens if reserve_full_footprint else req.prompt_tokens
        fits = (
            len(members) < seats
            and tokens + req.prompt_tokens <= policy.max_batch_tokens
            and pool.rounded(footprint) <= headroom
        )
        if fits:
            members.append(BatchMember(req.id, req.prompt_tokens, req.prompt_tokens))
            tokens += req.prompt_tokens
            headroom -= pool.rounded(footprint)
        elif policy.admission != "fcfs_skip":
            break  # strict order: nothing may overtake the blocked head
    return BatchPlan(phase="prefill", members=tuple(members))


def build_decode_batch(running: Sequence[Request], policy: SchedulerPolicy) -> BatchPlan:
    """One synchronous decode iteration over the resident requests."""
    members = tuple(
        BatchMember(req.id, 1, req.prompt_tokens + req.tokens_emitted)
        for req in running[: policy.max_num_seqs]
    )
    return BatchPlan(phase="decode", members=members)


# -- batch execution cost ------------------------------------------------------

RouterFn = Callable[[int, int], ExpertAssignment]  # (tokens, layer_idx) -> assignment


@dataclass(frozen=True)
class LayerCosts:
    qkv_us: float
    attention_us: float
    out_proj_us: float
    attn_collective_us: float
    ffn_us: float
    ffn_collective_us: float
    moe: MoeLayerBreakdown | None = None

    @property
    def total_us(self) -> float:
        return (
            self.qkv_us + self.attention_us + self.out_proj_us
            + self.attn_collective_us + self.ffn_us + self.ffn_collective_us
        )


@dataclass(frozen=True)
class ExecutionResult:
    duration_us: float
    layers: tuple[LayerCosts, ...]
    pp_transfer_us: float


class OperatorCosts:
    """Resolves the per-operator durations of one replica's layer graph.

    The layer decomposes into six billed operations: the fused QKV
    projection, the attention kernel, the output projection, a tensor-
    parallel all-reduce, the FFN (dense grouped GEMM or the full MoE
    micro-workflow), and a second all-reduce.
    """

    def __init__(
        self,
        model: ModelConfig,
        parallelism: ParallelismConfig,
        cost_model: CostModel,
        intra_link: LinkSpec,
        tp: int | None = None,
        ep: int | None = None,
        moe_tp: int | None = None,
    ) -> None:
        self.model = model
        self.parallelism = parallelism
        self.cost_model = cost_model
        self.intra_link = intra_link
        self.tp = parallelism.tp if tp is None else tp
        self.ep = parallelism.ep if ep is None else ep
        self.moe_tp = self.tp if moe_tp is None else moe_tp

    def _heads(self) -> tuple[int, int]:
        hq = max(1, self.model.num_query_heads // self.tp)
        hkv = max(1, self.model.num_kv_heads // self.tp)
        return hq, hkv

    def qkv_proj_us(self, n_tokens: int) -> float:
        hq, hkv = self._heads()
        width = (hq + 2 * hkv) * self.model.head_dim
        return self.cost_model.predict_linear(n_tokens, width, self.model.d_model)

    def attention_us(self, plan: BatchPlan) -> float:
        hq, hkv = self._heads()
        features = AttentionFeatures(
            phase=plan.phase if plan.phase in ("prefill", "decode") else "prefill",
            query_lengths=tuple(m.query_len for m in plan.members),
            kv_lengths=tuple(m.context_len for m in plan.members),
            num_query_heads=hq,
            num_kv_heads=hkv,
            head_dim=self.model.head_dim,
        )
        return self.cost_model.predict_attention(features)

    def out_proj_us(self, n_tokens: int) -> float:
        hq, _ = self._heads()
        return self.cost_model.predict_linear(
            n_tokens, self.model.d_model, hq * self.model.head_dim
        )

    def tp_collective_us(self, n_tokens: int) -> float:
        bytes_per_rank = n_tokens * self.model.d_model * self.model.dtype_bytes
        return collective_time("all_reduce", bytes_per_rank, self.tp, self.intra_link) * 1e6

    def ffn_us(
        self, n_tokens: int, layer_idx: int, router: RouterFn | None
    ) -> tuple[float, MoeLayerBreakdown | None]:
        if self.model.moe is None:
            features = GroupedGemmFeatures(
                total_tokens=n_tokens,
                expert_token_counts=(n_tokens,),
                d_model=self.model.d_model,
                d_ff=max(1, self.model.d_ff // self.tp),
                top_k=1,
                mode="local",
            )
            return self.cost_model.predict_grouped_gemm(features), None
        if router is None:
            raise ValueError("MoE model needs a routing provider")
        assignment = router(n_tokens, layer_idx)
        topo = MoeExecutionTopology(ep_ranks=self.ep, moe_tp=self.moe_tp, link=self.intra_link)
        total, breakdown = moe_layer_latency(assignment, self.model, topo, self.cost_model)
        return total, breakdown

    def pp_stage_transfer_us(self, n_tokens: int) -> float:
        activation_bytes = n_tokens * self.model.d_model * self.model.dtype_bytes
        return transfer_time(activation_bytes, self.intra_link) * 1e6

    @property
    def num_layers(self) -> int:
        return self.model.num_layers

    @property
    def pp(self) -> int:
        return self.parallelism.pp


def execute_batch(
    plan: BatchPlan,
    costs: OperatorCosts,
    router: RouterFn | None = None,
) -> ExecutionResult:
    """Duration of one batch iteration: sum of the per-layer operator graph.

    Pipeline stages inside a replica run sequentially; each stage boundary
    bills one activation transfer.
    """
    if len(plan) == 0:
        return ExecutionResult(0.0, (), 0.0)
    n_tokens = plan.query_token_total
    layers = []
    for layer_idx in range(costs.num_layers):
        ffn_us, moe_breakdown = costs.ffn_us(n_tokens, layer_idx, router)
        layers.append(
            LayerCosts(
                qkv_us=costs.qkv_proj_us(n_tokens),
                attention_us=costs.attention_us(plan),
                out_proj_us=costs.out_proj_us(n_tokens),
                attn_collective_us=costs.tp_collective_us(n_tokens),
                ffn_us=ffn_us,
                ffn_collective_us=costs.tp_collective_us(n_tokens),
                moe=moe_breakdown,
            )
        )
    pp_transfer = (costs.pp - 1) * costs.pp_stage_transfer_us(n_tokens)
    duration = sum(layer.total_us for layer in layers) + pp_transfer
    return ExecutionResult(duration_us=duration, layers=tuple(layers), pp_transfer_us=pp_transfer)
