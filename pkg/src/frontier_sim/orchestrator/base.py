"""Shared serving-workflow machinery.

A workflow owns one Simulator and a set of replica states, schedules request
arrivals, and drives iteration-level batching through BATCH_START /
BATCH_COMPLETE events. Mode-specific behaviour (what a batch admits, what
happens when it finishes) lives in the subclasses.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from frontier_sim.cluster import (
    BatchPlan,
    KvPool,
    OperatorCosts,
    SchedulerPolicy,
    execute_batch,
)
from frontier_sim.core import EventKind, EventTrace, SimEvent, Simulator, ns_from_us
from frontier_sim.costmodel.model import CostModel, LearnedOperatorModel
from frontier_sim.costmodel.routing import ExpertAssignment, route_tokens
from frontier_sim.topology import ClusterSpec, Deployment
from frontier_sim.workload import Request, RequestState


class SimulationError(Exception):
    pass


class RequestCannotFit(SimulationError):
    """A request's KV footprint exceeds replica capacity outright."""


@dataclass(frozen=True)
class RoutingPolicySpec:
    policy: str = "uniform"  # uniform | dirichlet_skew | trace
    alpha: float = 0.3
    trace_counts: tuple[int, ...] | None = None


@dataclass
class ReplicaState:
    cluster: ClusterSpec
    index: int
    pool: KvPool
    costs: OperatorCosts
    queue: list[Request] = field(default_factory=list)
    running: list[Request] = field(default_factory=list)
    busy: bool = False
    start_pending: bool = False
    steps_executed: int = 0

    @property
    def key(self) -> str:
        return f"{self.cluster.id}/{self.index}"

    def outstanding_prompt_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.queue)


def derive_router_seed(master_seed: int, scope: str, step: int, layer: int) -> int:
    material = f"{master_seed}:{scope}:{step}:{layer}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:4], "big")


class ServingSimulation:
    """Base class: arrival scheduling, batch lifecycle, metrics-ready events."""

    def __init__(
        self,
        deployment: Deployment,
        requests: list[Request],
        policy: SchedulerPolicy,
        routing: RoutingPolicySpec | None = None,
        seed: int = 0,
        attention_model: LearnedOperatorModel | None = None,
        grouped_gemm_model: LearnedOperatorModel | None = None,
        max_events: int | None = None,
    ) -> None:
        policy.validate()
        self.deployment = deployment
        self.model = deployment.model
        self.policy = policy
        self.routing = routing or RoutingPolicySpec()
        self.seed = seed
        self.attention_model = attention_model
        self.grouped_gemm_model = grouped_gemm_model
        self.sim = Simulator(max_events)
        self.requests: dict[str, Request] = {}
        self.request_order: list[Request] = list(requests)
        for req in requests:
            if req.id in self.requests:
                raise SimulationError(f"duplicate request id {req.id!r}")
            self.requests[req.id] = req
        self.replicas: dict[str, ReplicaState] = {}
        self._register_handlers()

    # -- construction helpers ------------------------------------------------

    def cost_model_for(self, cluster: ClusterSpec) -> CostModel:
        return CostModel(
            hardware=cluster.hardware,
            dtype_bytes=self.model.dtype_bytes,
            ffn_matrices=self.model.ffn_matrices,
            attention_model=self.attention_model,
            grouped_gemm_model=self.grouped_gemm_model,
        )

    def make_replicas(self, cluster: ClusterSpec, **cost_kwargs) -> list[ReplicaState]:
        cost_model = self.cost_model_for(cluster)
        states = []
        for idx in range(cluster.num_replicas):
            costs = OperatorCosts(
                self.model,
                cluster.parallelism,
                cost_model,
                self.deployment.network.intra_replica,
                **cost_kwargs,
            )
            pool = KvPool(cluster.kv_pool_tokens, self.policy.pool_block_tokens())
            state = ReplicaState(cluster=cluster, index=idx, pool=pool, costs=costs)
            self.replicas[state.key] = state
            states.append(state)
        return states

    def make_router(self, scope: str, step: int):
        """Deterministic per-(scope, step, layer) expert router."""
        moe = self.model.moe
        if moe is None:
            return None
        spec = self.routing

        def router(tokens: int, layer_idx: int) -> ExpertAssignment:
            seed = derive_router_seed(self.seed, scope, step, layer_idx)
            return route_tokens(
                tokens,
                moe.num_experts,
                moe.top_k,
                policy=spec.policy,
                seed=seed,
                alpha=spec.alpha,
                counts=list(spec.trace_counts) if spec.trace_counts else None,
            )

        return router

    # -- event plumbing --------------------------------------------------------

    def _register_handlers(self) -> None:
        self.sim.on(EventKind.REQUEST_ARRIVAL, self._on_arrival)
        self.sim.on(EventKind.BATCH_START, self._on_batch_start)
        self.sim.on(EventKind.BATCH_COMPLETE, self._on_batch_complete)
        for kind in (
            EventKind.PREFILL_COMPLETE,
            EventKind.TOKEN_EMITTED,
            EventKind.REQUEST_COMPLETE,
            EventKind.MEMORY_AVAILABLE,
        ):
            self.sim.on(kind, self._no_op)

    @staticmethod
    def _no_op(event: SimEvent) -> None:
        return None

    def schedule_arrivals(self) -> None:
        for req in self.request_order:
            self.sim.schedule(
                req.arrival_time,
                EventKind.REQUEST_ARRIVAL,
                {
                    "request_id": req.id,
                    "prompt_tokens": req.prompt_tokens,
                    "output_tokens": req.output_tokens,
                },
            )

    def kick(self, replica: ReplicaState) -> None:
        """Arrange a BATCH_START for the replica unless one is already due."""
        if replica.busy or replica.start_pending:
            return
        if not replica.queue and not replica.running:
            return
        replica.start_pending = True
        self.sim.schedule(self.sim.now, EventKind.BATCH_START, {"replica": replica.key})

    def emit_first_tokens(self, replica_key: str, request_ids: list[str]) -> None:
        if request_ids:
            self.sim.schedule(
                self.sim.now,
                EventKind.TOKEN_EMITTED,
                {"replica": replica_key, "request_ids": request_ids},
            )

    def complete_request(self, replica: ReplicaState, req: Request) -> None:
        req.transition(RequestState.COMPLETE, self.sim.now)
        self.sim.schedule(
            self.sim.now,
            EventKind.REQUEST_COMPLETE,
            {
                "request_id": req.id,
                "tokens_emitted": req.tokens_emitted,
                "output_tokens": req.output_tokens,
                "prompt_tokens": req.prompt_tokens,
            },
        )
        freed = replica.pool.release(req.id)
        self.sim.schedule(
            self.sim.now,
            EventKind.MEMORY_AVAILABLE,
            {
                "replica": replica.key,
                "request_id": req.id,
                "freed_tokens": freed,
                "headroom_tokens": replica.pool.headroom,
            },
        )

    def run(self) -> EventTrace:
        self.schedule_arrivals()
        trace = self.sim.run_to_completion()
        unfinished = [r.id for r in self.requests.values() if not r.finished]
        if unfinished:
            raise SimulationError(
                f"simulation drained with {len(unfinished)} unfinished requests: "
                f"{unfinished[:5]}"
            )
        return trace

    # -- execution helper -------------------------------------------------------

    def start_batch(self, replica: ReplicaState, plan: BatchPlan, extra: dict | None = None) -> None:
        router = self.make_router(replica.key, replica.steps_executed)
        result = execute_batch(plan, replica.costs, router)
        duration_ns = ns_from_us(result.duration_us)
        replica.busy = True
        replica.steps_executed += 1
        payload = {
            "replica": replica.key,
            "phase": plan.phase,
            "request_ids": plan.request_ids,
            "query_tokens": plan.query_token_total,
            "duration_ns": duration_ns,
            "pool": replica.pool.snapshot(),
        }
        if self.model.moe is not None and plan.phase in ("prefill", "decode"):
            payload["moe_imbalance"] = [
                round(layer.moe.expert_us / (sum(layer.moe.per_rank_us) / len(layer.moe.per_rank_us)), 6)
                if layer.moe and sum(layer.moe.per_rank_us) > 0 else 1.0
                for layer in result.layers
            ]
        if extra:
            payload.update(extra)
        self.sim.schedule(self.sim.now + duration_ns, EventKind.BATCH_COMPLETE, payload)

    # -- subclass responsibilities ----------------------------------------------

    def _on_arrival(self, event: SimEvent) -> None:
        raise NotImplementedError

    def _on_batch_start(self, event: SimEvent) -> None:
        raise NotImplementedError

    def _on_batch_complete(self, event: SimEvent) -> None:
        raise NotImplementedError
