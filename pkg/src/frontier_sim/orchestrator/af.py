"""Attention/FFN disaggregated serving.

One decode step is a dependency graph over m micro-batches and L layers:

    ATTN(i,k) -> A_TO_F(i,k) -> FFN(i,k) -> F_TO_A(i,k) -> ATTN(i,k+1)

with four exclusive resources (attention executor, FFN executor, and the two
directional links). The step ends when FFN_COMPUTE(m, L) completes; the
final F->A return transfer is billed as the next step's layer-1 dependency,
so it is omitted at k = L. While a transfer for micro-batch i is in flight,
the attention executor is free to run micro-batch i+1: with m >= 2 the
ping-pong overlap appears in the trace as simultaneously busy resources.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

from frontier_sim.cluster import BatchMember, BatchPlan, OperatorCosts, build_prefill_batch
from frontier_sim.core import EventKind, EventTrace, SimEvent, SimTime, Simulator, ns_from_s, ns_from_us
from frontier_sim.orchestrator.base import (
    ReplicaState,
    RequestCannotFit,
    ServingSimulation,
    derive_router_seed,
)
from frontier_sim.costmodel.routing import route_tokens
from frontier_sim.topology import transfer_time
from frontier_sim.workload import RequestState

ATTN_COMPUTE = "ATTN_COMPUTE"
A_TO_F_TRANSFER = "A_TO_F_TRANSFER"
FFN_COMPUTE = "FFN_COMPUTE"
F_TO_A_TRANSFER = "F_TO_A_TRANSFER"

RESOURCES = ("attn_exec", "a2f_link", "ffn_exec", "f2a_link")
RESOURCE_OF = {
    ATTN_COMPUTE: "attn_exec",
    A_TO_F_TRANSFER: "a2f_link",
    FFN_COMPUTE: "ffn_exec",
    F_TO_A_TRANSFER: "f2a_link",
}
DONE_EVENT = {
    ATTN_COMPUTE: EventKind.ATTN_COMPUTE_DONE,
    A_TO_F_TRANSFER: EventKind.A_TO_F_TRANSFER_DONE,
    FFN_COMPUTE: EventKind.FFN_COMPUTE_DONE,
    F_TO_A_TRANSFER: EventKind.F_TO_A_TRANSFER_DONE,
}

NodeKey = tuple[str, int, int]  # (kind, micro_batch i, layer k), 1-based indices
DurationFn = Callable[[str, int, int], SimTime]


@dataclass(frozen=True)
class AfPipelineConfig:
    micro_batches: int = 2

    def validate(self) -> None:
        if self.micro_batches < 1:
            raise ValueError("micro_batches must be >= 1")


@dataclass(frozen=True)
class AfGraph:
    """Static dependency graph of one decode step."""

    m: int
    L: int
    durations: dict[NodeKey, SimTime]
    deps: dict[NodeKey, tuple[NodeKey, ...]]
    succs: dict[NodeKey, tuple[NodeKey, ...]]

    @property
    def nodes(self) -> list[NodeKey]:
        return list(self.deps.keys())

    @property
    def node_count(self) -> int:
        return len(self.deps)

    @property
    def edge_count(self) -> int:
        return sum(len(d) for d in self.deps.values())

    @property
    def final_node(self) -> NodeKey:
        return (FFN_COMPUTE, self.m, self.L)


def expected_node_count(m: int, L: int) -> int:
    return 4 * m * L - m  # F_TO_A omitted at k = L


def expected_edge_count(m: int, L: int) -> int:
    return 2 * m * L + 2 * m * (L - 1)


def build_af_graph(m: int, L: int, durations: DurationFn | dict[str, SimTime]) -> AfGraph:
    """Construct the (m, L) step graph with per-node durations in ns."""
    if m < 1 or L < 1:
        raise ValueError("m and L must be >= 1")
    if isinstance(durations, dict):
        table = durations

        def duration_of(kind: str, i: int, k: int) -> SimTime:
            return table[kind]
    else:
        duration_of = durations
    deps: dict[NodeKey, tuple[NodeKey, ...]] = {}
    dur: dict[NodeKey, SimTime] = {}
    for i in range(1, m + 1):
        for k in range(1, L + 1):
            attn: NodeKey = (ATTN_COMPUTE, i, k)
            deps[attn] = ((F_TO_A_TRANSFER, i, k - 1),) if k > 1 else ()
            dur[attn] = int(duration_of(ATTN_COMPUTE, i, k))
            a2f: NodeKey = (A_TO_F_TRANSFER, i, k)
            deps[a2f] = (attn,)
            dur[a2f] = int(duration_of(A_TO_F_TRANSFER, i, k))
            ffn: NodeKey = (FFN_COMPUTE, i, k)
            deps[ffn] = (a2f,)
            dur[ffn] = int(duration_of(FFN_COMPUTE, i, k))
            if k < L:
                f2a: NodeKey = (F_TO_A_TRANSFER, i, k)
                deps[f2a] = (ffn,)
                dur[f2a] = int(duration_of(F_TO_A_TRANSFER, i, k))
    succs: dict[NodeKey, list[NodeKey]] = {key: [] for key in deps}
    for node, node_deps in deps.items():
        for dep in node_deps:
            succs[dep].append(node)
    return AfGraph(
        m=m,
        L=L,
        durations=dur,
        deps=deps,
        succs={k: tuple(v) for k, v in succs.items()},
    )


class AfStepEngine:
    """Executes one step graph on a Simulator under resource exclusivity.

    Among ready nodes of a resource, the lowest (micro-batch, layer) pair
    claims it first. Dispatch happens once per timestamp, after every node
    completion at that instant has been processed, so simultaneous
    completions cannot starve a lower-priority claim.
    """

    def __init__(
        self,
        sim: Simulator,
        graph: AfGraph,
        step_id: int,
        on_complete: Callable[[SimTime], None],
    ) -> None:
        self.sim = sim
        self.graph = graph
        self.step_id = step_id
        self.on_complete = on_complete
        self.remaining = {key: len(deps) for key, deps in graph.deps.items()}
        self.ready: dict[str, list[tuple[int, int, NodeKey]]] = {r: [] for r in RESOURCES}
        self.busy: dict[str, NodeKey | None] = {r: None for r in RESOURCES}
        self.pending_at: dict[SimTime, int] = {}
        self.done_count = 0
        self.final_ts: SimTime | None = None
        self.start_ts: SimTime | None = None

    def start(self) -> None:
        self.start_ts = self.sim.now
        for key, count in self.remaining.items():
            if count == 0:
                kind, i, k = key
                heapq.heappush(self.ready[RESOURCE_OF[kind]], (i, k, key))
        self._dispatch_all()

    def _start_node(self, key: NodeKey) -> None:
        kind, i, k = key
        resource = RESOURCE_OF[kind]
        self.busy[resource] = key
        duration = self.graph.durations[key]
        end = self.sim.now + duration
        self.pending_at[end] = self.pending_at.get(end, 0) + 1
        self.sim.schedule(
            end,
            DONE_EVENT[kind],
            {
                "step": self.step_id,
                "i": i,
                "k": k,
                "start_ns": self.sim.now,
                "duration_ns": duration,
                "resource": resource,
            },
        )

    def _dispatch_all(self) -> None:
        for resource in RESOURCES:
            if self.busy[resource] is None and self.ready[resource]:
                _, _, key = heapq.heappop(self.ready[resource])
                self._start_node(key)

    def on_done(self, event: SimEvent) -> None:
        kind = event.kind
        payload = event.payload
        key: NodeKey = (
            {v: k for k, v in DONE_EVENT.items()}[kind],
            payload["i"],
            payload["k"],
        )
        resource = RESOURCE_OF[key[0]]
        self.busy[resource] = None
        self.done_count += 1
        if key == self.graph.final_node:
            self.final_ts = self.sim.now
        for succ in self.graph.succs[key]:
            self.remaining[succ] -= 1
            if self.remaining[succ] == 0:
                skind, si, sk = succ
                heapq.heappush(self.ready[RESOURCE_OF[skind]], (si, sk, succ))
        now = self.sim.now
        self.pending_at[now] -= 1
        if self.pending_at[now] == 0:
            del self.pending_at[now]
            if self.done_count == self.graph.node_count:
                assert self.final_ts is not None
                self.on_complete(self.final_ts)
            else:
                self._dispatch_all()


def run_af_graph(graph: AfGraph) -> tuple[SimTime, EventTrace]:
    """Run one step graph standalone; returns (step duration ns, trace)."""
    sim = Simulator()
    result: dict[str, SimTime] = {}
    engine = AfStepEngine(sim, graph, step_id=0, on_complete=lambda ts: result.setdefault("end", ts))
    for kind in DONE_EVENT.values():
        sim.on(kind, engine.on_done)
    engine.start()
    sim.run_to_completion()
    return result["end"], sim.trace


def partition_micro_batches(members: list, m: int) -> list[list]:
    """Split members into at most m micro-batches with sizes differing <= 1.

    Fewer than m members yields fewer (non-empty) micro-batches.
    """
    m_eff = min(m, len(members))
    if m_eff == 0:
        return []
    base, rem = divmod(len(members), m_eff)
    out, start = [], 0
    for i in range(m_eff):
        size = base + (1 if i < rem else 0)
        out.append(list(members[start : start + size]))
        start += size
    return out


@dataclass
class AfStepCosts:
    """Node durations of one decode step, from the cost models of both stages.

    Attention-side work splits across attn_dp groups; the billed duration is
    the largest group's. FFN durations are per (micro-batch, layer) because
    MoE routing differs layer to layer.
    """

    attn_costs: OperatorCosts
    ffn_costs: OperatorCosts
    attn_dp: int
    inter_link_transfer_ns: Callable[[int], SimTime]
    seed: int

    def _attn_duration_ns(self, members: list[BatchMember]) -> SimTime:
        groups = partition_micro_batches(members, self.attn_dp)
        worst = groups[0]  # largest group: cost is monotone in member count
        plan = BatchPlan(phase="decode", members=tuple(worst))
        n = plan.query_token_total
        us = (
            self.attn_costs.qkv_proj_us(n)
            + self.attn_costs.attention_us(plan)
            + self.attn_costs.out_proj_us(n)
            + self.attn_costs.tp_collective_us(n)
        )
        return ns_from_us(us)

    def _ffn_duration_ns(self, n_tokens: int, layer_idx: int, scope: str, step: int) -> SimTime:
        model = self.ffn_costs.model
        if model.moe is not None:
            def router(tokens: int, layer: int):
                rseed = derive_router_seed(self.seed, scope, step, layer)
                return route_tokens(
                    tokens, model.moe.num_experts, model.moe.top_k, seed=rseed
                )
            us, _ = self.ffn_costs.ffn_us(n_tokens, layer_idx, router)
        else:
            us, _ = self.ffn_costs.ffn_us(n_tokens, layer_idx, None)
            us += self.ffn_costs.tp_collective_us(n_tokens)
        return ns_from_us(us)

    def duration_fn(
        self, micro_batches: list[list[BatchMember]], scope: str, step: int
    ) -> DurationFn:
        transfer_cache: dict[int, SimTime] = {}

        def duration(kind: str, i: int, k: int) -> SimTime:
            members = micro_batches[i - 1]
            if kind == ATTN_COMPUTE:
                return self._attn_duration_ns(members)
            if kind in (A_TO_F_TRANSFER, F_TO_A_TRANSFER):
                n = len(members)
                if n not in transfer_cache:
                    transfer_cache[n] = self.inter_link_transfer_ns(n)
                return transfer_cache[n]
            return self._ffn_duration_ns(len(members), k - 1, f"{scope}:mb{i}", step)

        return duration


@dataclass
class AfStepResult:
    duration_ns: SimTime
    batch_size: int
    micro_batch_sizes: list[int]


def generate_token_af(
    costs: AfStepCosts,
    members: list[BatchMember],
    needed_tokens: list[int],
    m: int,
    scope: str = "af",
) -> list[AfStepResult]:
    """Step the decode pipeline until every member has its tokens.

    Members that finish leave the batch; later steps run with the smaller
    membership (and therefore smaller micro-batches). Contexts grow by one
    token per step. Each step runs standalone; the returned series is the
    per-token-position latency.
    """
    if len(members) != len(needed_tokens):
        raise ValueError("members and needed_tokens must align")
    state = [
        {"member": mem, "remaining": need, "context": mem.context_len}
        for mem, need in zip(members, needed_tokens)
    ]
    series: list[AfStepResult] = []
    step = 0
    while True:
        active = [s for s in state if s["remaining"] > 0]
        if not active:
            break
        current = [
            BatchMember(s["member"].request_id, 1, s["context"]) for s in active
        ]
        micro = partition_micro_batches(current, m)
        graph = build_af_graph(
            len(micro), costs.attn_costs.num_layers,
            costs.duration_fn(micro, scope, step),
        )
        duration, _ = run_af_graph(graph)
        series.append(
            AfStepResult(
                duration_ns=duration,
                batch_size=len(current),
                micro_batch_sizes=[len(g) for g in micro],
            )
        )
        for s in active:
            s["remaining"] -= 1
            s["context"] += 1
        step += 1
    return series


class AfSimulation(ServingSimulation):
    """End-to-end AF serving: prefill co-located on the attention cluster,
    decode as pipelined AF steps over the global running batch."""

    def __init__(self, deployment, requests, policy, af: AfPipelineConfig | None = None, **kwargs) -> None:
        super().__init__(deployment, requests, policy, **kwargs)
        self.af = af or AfPipelineConfig()
        self.af.validate()
        attn_clusters = deployment.clusters_with_role("attention")
        ffn_clusters = deployment.clusters_with_role("ffn")
        if len(attn_clusters) != 1 or len(ffn_clusters) != 1:
            raise ValueError("af mode takes exactly one attention and one ffn cluster")
        if attn_clusters[0].num_replicas != 1 or ffn_clusters[0].num_replicas != 1:
            raise ValueError("af mode models a single pipeline: num_replicas must be 1")
        attn_cluster, ffn_cluster = attn_clusters[0], ffn_clusters[0]
        # Prefill runs co-located inside the attention cluster: full stack,
        # experts unsharded (ep=1) for that phase.
        self.attn_replica = self.make_replicas(
            attn_cluster,
            tp=attn_cluster.parallelism.attn_tp,
            ep=1,
            moe_tp=1,
        )[0]
        ffn_par = ffn_cluster.parallelism
        self.step_costs = AfStepCosts(
            attn_costs=OperatorCosts(
                self.model,
                attn_cluster.parallelism,
                self.cost_model_for(attn_cluster),
                deployment.network.intra_replica,
                tp=attn_cluster.parallelism.attn_tp,
                ep=1,
                moe_tp=1,
            ),
            ffn_costs=OperatorCosts(
                self.model,
                ffn_par,
                self.cost_model_for(ffn_cluster),
                deployment.network.intra_replica,
                tp=ffn_par.moe_tp,
                ep=ffn_par.moe_ep,
                moe_tp=ffn_par.moe_tp,
            ),
            attn_dp=attn_cluster.parallelism.attn_dp,
            inter_link_transfer_ns=self._activation_transfer_ns,
            seed=self.seed,
        )
        self._engine: AfStepEngine | None = None
        self._step_counter = 0
        for kind in DONE_EVENT.values():
            self.sim.on(kind, self._on_af_node_done)

    def _activation_transfer_ns(self, n_tokens: int) -> SimTime:
        num_bytes = n_tokens * self.model.d_model * self.model.dtype_bytes
        return ns_from_s(transfer_time(num_bytes, self.deployment.network.inter_cluster))

    # -- handlers -----------------------------------------------------------------

    def _on_arrival(self, event: SimEvent) -> None:
        req = self.requests[event.payload["request_id"]]
        self.attn_replica.queue.append(req)
        self.kick(self.attn_replica)

    def _on_batch_start(self, event: SimEvent) -> None:
        replica = self.attn_replica
        replica.start_pending = False
        if replica.busy:
            return
        plan = build_prefill_batch(
            replica.queue, len(replica.running), self.policy, replica.pool
        )
        if len(plan):
            admitted = set(plan.request_ids)
            for rid in plan.request_ids:
                req = self.requests[rid]
                replica.pool.reserve(rid, req.kv_footprint_tokens)
                req.transition(RequestState.PREFILL_RUNNING, self.sim.now)
            replica.queue = [r for r in replica.queue if r.id not in admitted]
            self.start_batch(replica, plan)
            return
        if replica.running:
            self._start_af_step(replica)
            return
        if replica.queue:
            head = replica.queue[0]
            raise RequestCannotFit(
                f"request {head.id} needs {head.kv_footprint_tokens} KV tokens; "
                f"attention replica capacity is {replica.pool.capacity_tokens}"
            )

    def _start_af_step(self, replica: ReplicaState) -> None:
        for req in replica.running:
            if req.state is RequestState.DECODE_QUEUED:
                req.transition(RequestState.DECODING, self.sim.now)
        members = [
            BatchMember(req.id, 1, req.prompt_tokens + req.tokens_emitted)
            for req in replica.running[: self.policy.max_num_seqs]
        ]
        micro = partition_micro_batches(members, self.af.micro_batches)
        step_id = self._step_counter
        self._step_counter += 1
        graph = build_af_graph(
            len(micro),
            self.model.num_layers,
            self.step_costs.duration_fn(micro, replica.key, step_id),
        )
        replica.busy = True
        replica.steps_executed += 1
        start_ts = self.sim.now
        request_ids = [m.request_id for m in members]

        def on_complete(final_ts: SimTime) -> None:
            self.sim.schedule(
                final_ts,
                EventKind.BATCH_COMPLETE,
                {
                    "replica": replica.key,
                    "phase": "af_decode",
                    "request_ids": request_ids,
                    "query_tokens": len(request_ids),
                    "duration_ns": final_ts - start_ts,
                    "step": step_id,
                    "micro_batch_sizes": [len(g) for g in micro],
                    "pool": replica.pool.snapshot(),
                },
            )
            self._engine = None

        self._engine = AfStepEngine(self.sim, graph, step_id, on_complete)
        self._engine.start()

    def _on_af_node_done(self, event: SimEvent) -> None:
        if self._engine is None or event.payload["step"] != self._engine.step_id:
            raise RuntimeError("AF node completion without an active step")
        self._engine.on_done(event)

    def _on_batch_complete(self, event: SimEvent) -> None:
        replica = self.attn_replica
        replica.busy = False
        ids = event.payload["request_ids"]
        if event.payload["phase"] == "prefill":
            for rid in ids:
                req = self.requests[rid]
                req.transition(RequestState.PREFILL_COMPLETE, self.sim.now)
                req.emit_tokens(1)
                self.sim.schedule(
                    self.sim.now,
                    EventKind.PREFILL_COMPLETE,
                    {"request_id": rid, "replica": replica.key},
                )
            self.emit_first_tokens(replica.key, ids)
            for rid in ids:
                req = self.requests[rid]
                if req.finished:
                    self.complete_request(replica, req)
                else:
                    req.transition(RequestState.DECODE_QUEUED, self.sim.now)
                    replica.running.append(req)
        else:
            self.sim.schedule(
                self.sim.now,
                EventKind.TOKEN_EMITTED,
                {"replica": replica.key, "request_ids": ids},
            )
            finished = []
            for rid in ids:
                req = self.requests[rid]
                req.emit_tokens(1)
                if req.finished:
                    finished.append(req)
            for req in finished:
                replica.running.remove(req)
                self.complete_request(replica, req)
        self.kick(replica)
