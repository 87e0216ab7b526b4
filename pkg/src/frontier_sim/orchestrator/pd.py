"""Prefill/decode disaggregated serving.

The prefill stage produces KV caches; the decode stage consumes them under a
finite memory budget. The controller holds completed prefills in a FIFO
queue and starts a KV transfer only once the chosen decode replica's pool
has accepted a reservation for the request's full footprint, so decode
memory backpressure propagates to the prefill stage.
"""

from __future__ import annotations

from frontier_sim.cluster import Backpressure, build_decode_batch, build_prefill_batch
from frontier_sim.core import EventKind, SimEvent, ns_from_s
from frontier_sim.orchestrator.base import (
    ReplicaState,
    RequestCannotFit,
    ServingSimulation,
)
from frontier_sim.topology import kv_bytes_per_token, transfer_time
from frontier_sim.workload import Request, RequestState


class PdSimulation(ServingSimulation):
    def __init__(self, deployment, requests, policy, **kwargs) -> None:
        super().__init__(deployment, requests, policy, **kwargs)
        self.prefill_replicas: list[ReplicaState] = []
        self.decode_replicas: list[ReplicaState] = []
        for cluster in deployment.clusters_with_role("prefill"):
            self.prefill_replicas.extend(self.make_replicas(cluster))
        for cluster in deployment.clusters_with_role("decode"):
            self.decode_replicas.extend(self.make_replicas(cluster))
        self.transfer_queue: list[Request] = []
        self._prefill_home: dict[str, ReplicaState] = {}
        self._decode_home: dict[str, ReplicaState] = {}
        self.sim.on(EventKind.KV_CACHE_TRANSFER_START, self._no_op)
        self.sim.on(EventKind.KV_CACHE_TRANSFER_DONE, self._on_transfer_done)

    # -- routing ------------------------------------------------------------------

    def _route_prefill(self, req: Request) -> ReplicaState:
        """Least outstanding prompt work; ties break on replica key."""
        return min(
            self.prefill_replicas,
            key=lambda r: (r.outstanding_prompt_tokens(), r.key),
        )

    def _route_decode(self) -> ReplicaState:
        return min(self.decode_replicas, key=lambda r: (r.pool.used_tokens, r.key))

    # -- handlers -------------------------------------------------------------------

    def _on_arrival(self, event: SimEvent) -> None:
        req = self.requests[event.payload["request_id"]]
        replica = self._route_prefill(req)
        self._prefill_home[req.id] = replica
        replica.queue.append(req)
        self.kick(replica)

    def _on_batch_start(self, event: SimEvent) -> None:
        replica = self.replicas[event.payload["replica"]]
        replica.start_pending = False
        if replica.busy:
            return
        if replica.cluster.role == "prefill":
            self._start_prefill(replica)
        else:
            self._start_decode(replica)

    def _start_prefill(self, replica: ReplicaState) -> None:
        plan = build_prefill_batch(
            replica.queue, 0, self.policy, replica.pool, reserve_full_footprint=False
        )
        if len(plan) == 0:
            if replica.queue and replica.pool.used_tokens == 0:
                head = replica.queue[0]
                raise RequestCannotFit(
                    f"request {head.id} prompt of {head.prompt_tokens} tokens exceeds "
                    f"prefill replica {replica.key} capacity {replica.pool.capacity_tokens}"
                )
            return  # blocked on prefill memory; MEMORY_AVAILABLE will re-kick
        admitted = set(plan.request_ids)
        for rid in plan.request_ids:
            req = self.requests[rid]
            replica.pool.reserve(rid, req.prompt_tokens)
            req.transition(RequestState.PREFILL_RUNNING, self.sim.now)
        replica.queue = [r for r in replica.queue if r.id not in admitted]
        self.start_batch(replica, plan)

    def _start_decode(self, replica: ReplicaState) -> None:
        while replica.queue and len(replica.running) < self.policy.max_num_seqs:
            req = replica.queue.pop(0)
            req.transition(RequestState.DECODING, self.sim.now)
            replica.running.append(req)
        if not replica.running:
            return
        self.start_batch(replica, build_decode_batch(replica.running, self.policy))

    def _on_batch_complete(self, event: SimEvent) -> None:
        replica = self.replicas[event.payload["replica"]]
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
                    self.complete_request(replica, req)  # single-token request
                else:
                    self.transfer_queue.append(req)
            self._pump_transfers()
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
            if finished:
                self._pump_transfers()  # decode memory was released
        self.kick(replica)

    # -- KV transfer gating ------------------------------------------------------------

    def _pump_transfers(self) -> None:
        """Start transfers for queue heads while decode memory admits them.

        Strict FIFO: a blocked head blocks everything behind it, which is
        what makes the backpressure observable as serialized transfers.
        """
        while self.transfer_queue:
            req = self.transfer_queue[0]
            replica = self._route_decode()
            footprint = req.kv_footprint_tokens
            if replica.pool.rounded(footprint) > replica.pool.capacity_tokens:
                raise RequestCannotFit(
                    f"request {req.id} needs {footprint} KV tokens; decode replica "
                    f"{replica.key} capacity is {replica.pool.capacity_tokens}"
                )
            try:
                replica.pool.reserve(req.id, footprint)
            except Backpressure:
                return  # consumed as a signal: wait for MEMORY_AVAILABLE
            self.transfer_queue.pop(0)
            self._decode_home[req.id] = replica
            req.transition(RequestState.KV_TRANSFERRING, self.sim.now)
            num_bytes = kv_bytes_per_token(self.model) * req.prompt_tokens
            prefill_home = self._prefill_home[req.id]
            self.sim.schedule(
                self.sim.now,
                EventKind.KV_CACHE_TRANSFER_START,
                {
                    "request_id": req.id,
                    "src": prefill_home.key,
                    "dst": replica.key,
                    "bytes": num_bytes,
                    "reservation": {
                        "tokens": replica.pool.allocation(req.id),
                        "used_after": replica.pool.used_tokens,
                        "capacity": replica.pool.capacity_tokens,
                    },
                },
            )
            duration = ns_from_s(
                transfer_time(num_bytes, self.deployment.network.inter_cluster)
            )
            self.sim.schedule(
                self.sim.now + duration,
                EventKind.KV_CACHE_TRANSFER_DONE,
                {
                    "request_id": req.id,
                    "src": prefill_home.key,
                    "dst": replica.key,
                    "bytes": num_bytes,
                },
            )

    def _on_transfer_done(self, event: SimEvent) -> None:
        rid = event.payload["request_id"]
        req = self.requests[rid]
        prefill_home = self._prefill_home[rid]
        freed = prefill_home.pool.release(rid)
        self.sim.schedule(
            self.sim.now,
            EventKind.MEMORY_AVAILABLE,
            {
                "replica": prefill_home.key,
                "request_id": rid,
                "freed_tokens": freed,
                "headroom_tokens": prefill_home.pool.headroom,
            },
        )
        req.transition(RequestState.DECODE_QUEUED, self.sim.now)
        decode_home = self._decode_home[rid]
        decode_home.queue.append(req)
        self.kick(prefill_home)
        self.kick(decode_home)
