"""Co-located serving: every replica runs both prefill and decode.

Requests are spread round-robin across replicas. A replica alternates
between prefill batches (taken whenever admissible work is queued) and
synchronous decode iterations over its resident requests; completed prefills
join decoding at the next step boundary, which is how iteration-level
continuous batching behaves.
"""

from __future__ import annotations

from frontier_sim.cluster import build_decode_batch, build_prefill_batch
from frontier_sim.core import EventKind, SimEvent
from frontier_sim.orchestrator.base import (
    ReplicaState,
    RequestCannotFit,
    ServingSimulation,
)
from frontier_sim.workload import RequestState


class ColocatedSimulation(ServingSimulation):
    def __init__(self, deployment, requests, policy, **kwargs) -> None:
        super().__init__(deployment, requests, policy, **kwargs)
        self.replica_ring: list[ReplicaState] = []
        for cluster in deployment.clusters_with_role("colocated"):
            self.replica_ring.extend(self.make_replicas(cluster))
        self._rr_next = 0

    # -- handlers ---------------------------------------------------------------

    def _on_arrival(self, event: SimEvent) -> None:
        req = self.requests[event.payload["request_id"]]
        replica = self.replica_ring[self._rr_next % len(self.replica_ring)]
        self._rr_next += 1
        replica.queue.append(req)
        self.kick(replica)

    def _on_batch_start(self, event: SimEvent) -> None:
        replica = self.replicas[event.payload["replica"]]
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
            for req in replica.running:
                if req.state is RequestState.DECODE_QUEUED:
                    req.transition(RequestState.DECODING, self.sim.now)
            self.start_batch(replica, build_decode_batch(replica.running, self.policy))
            return
        if replica.queue:
            # Nothing running, nothing admitted: the head can never fit.
            head = replica.queue[0]
            raise RequestCannotFit(
                f"request {head.id} needs {head.kv_footprint_tokens} KV tokens; "
                f"replica {replica.key} capacity is {replica.pool.capacity_tokens}"
            )

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
