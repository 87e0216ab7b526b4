"""Shared builders for serving-simulation tests."""

import pytest

from frontier_sim.orchestrator.af import RESOURCES, RESOURCE_OF
from frontier_sim.topology import (
    ClusterSpec,
    HardwareSpec,
    LinkSpec,
    ModelConfig,
    MoeConfig,
    NetworkSpec,
    ParallelismConfig,
    kv_bytes_per_token,
    validate_deployment,
    weight_bytes_total,
)

NETWORK = NetworkSpec(
    intra_replica=LinkSpec(latency_s=5e-6, bandwidth_bps=300e9),
    inter_cluster=LinkSpec(latency_s=20e-6, bandwidth_bps=50e9),
)


def tiny_model(num_layers=2, moe=None):
    return ModelConfig(
        num_layers=num_layers, d_model=256, d_ff=1024,
        num_query_heads=4, num_kv_heads=2, head_dim=64, moe=moe,
    )


def tiny_moe():
    return MoeConfig(num_experts=8, top_k=2, expert_d_ff=512)


def hardware_for_pool(model, pool_tokens, reserve_fraction=0.1, role="colocated",
                      attn_dp=1):
    """Back-solve a per-GPU HBM capacity yielding the requested KV pool."""
    weights = weight_bytes_total(model)
    if role == "attention":
        weights = weights * attn_dp  # replicated attention share; fine upper bound
    needed = pool_tokens * kv_bytes_per_token(model) + weights
    hbm = needed / (1.0 - reserve_fraction) + 1024
    return HardwareSpec(peak_flops=312e12, mem_bw=2e12, hbm_capacity_bytes=hbm,
                        kernel_overhead_us=5.0)


def colocated_deployment(model, num_replicas=1, pool_tokens=100_000):
    cluster = ClusterSpec(
        id="c0", role="colocated", num_replicas=num_replicas, gpus_per_replica=1,
        hardware=hardware_for_pool(model, pool_tokens),
    )
    return validate_deployment("colocated", model, [cluster], NETWORK)


def pd_deployment(model, prefill_pool=100_000, decode_pool=100_000,
                  prefill_replicas=1, decode_replicas=1):
    clusters = [
        ClusterSpec(id="p0", role="prefill", num_replicas=prefill_replicas,
                    gpus_per_replica=1,
                    hardware=hardware_for_pool(model, prefill_pool, role="prefill")),
        ClusterSpec(id="d0", role="decode", num_replicas=decode_replicas,
                    gpus_per_replica=1,
                    hardware=hardware_for_pool(model, decode_pool, role="decode")),
    ]
    return validate_deployment("pd", model, clusters, NETWORK)


def af_deployment(model, pool_tokens=100_000, attn_tp=1, attn_dp=1,
                  moe_tp=1, moe_ep=1):
    par = ParallelismConfig(attn_tp=attn_tp, attn_dp=attn_dp,
                            moe_tp=moe_tp, moe_ep=moe_ep)
    clusters = [
        ClusterSpec(id="attn", role="attention", num_replicas=1,
                    gpus_per_replica=attn_tp * attn_dp,
                    hardware=hardware_for_pool(model, pool_tokens, role="attention",
                                               attn_dp=attn_dp),
                    parallelism=par),
        ClusterSpec(id="ffn", role="ffn", num_replicas=1,
                    gpus_per_replica=moe_tp * moe_ep,
                    hardware=hardware_for_pool(model, 0, role="ffn"),
                    parallelism=par),
    ]
    return validate_deployment("af", model, clusters, NETWORK)


def af_oracle_makespan(graph):
    """Independent list scheduler: resource-constrained longest path.

    Walks wall-clock time forward over completion instants; at each instant
    it retires every finished node, then hands each idle resource to the
    lowest-(i, k) ready node. No event queue involved.
    """
    remaining = {key: len(deps) for key, deps in graph.deps.items()}
    ready = {r: [] for r in RESOURCES}
    running = {}   # resource -> (end_time, key)
    completion = {}
    for key, count in remaining.items():
        if count == 0:
            ready[RESOURCE_OF[key[0]]].append(key)
    t = 0
    while True:
        for resource in RESOURCES:
            if resource not in running and ready[resource]:
                ready[resource].sort(key=lambda key: (key[1], key[2]))
                key = ready[resource].pop(0)
                running[resource] = (t + graph.durations[key], key)
        if not running:
            break
        t = min(end for end, _ in running.values())
        for resource in list(running):
            end, key = running[resource]
            if end == t:
                del running[resource]
                completion[key] = t
                for succ in graph.succs[key]:
                    remaining[succ] -= 1
                    if remaining[succ] == 0:
                        ready[RESOURCE_OF[succ[0]]].append(succ)
    return completion[graph.final_node]
