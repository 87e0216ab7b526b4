"""Attention/FFN pipelining: micro-batch count vs. step time and bubbles.

A decode step is a dependency graph over micro-batches and layers with four
exclusive resources. With one micro-batch everything serializes; with two or
more, transfers hide behind compute on the other micro-batch. This demo
sweeps the micro-batch count over a balanced-stage graph, then runs the full
serving loop and reports the measured pipeline bubble fraction.

Run:  python3 demos/demo_af_pipeline.py
"""

from frontier_sim.cluster import SchedulerPolicy
from frontier_sim.core import EventKind
from frontier_sim.metrics import compute_metrics
from frontier_sim.orchestrator import AfPipelineConfig, AfSimulation, build_af_graph, run_af_graph
from frontier_sim.orchestrator.af import (
    A_TO_F_TRANSFER,
    ATTN_COMPUTE,
    F_TO_A_TRANSFER,
    FFN_COMPUTE,
)
from frontier_sim.topology import (
    ClusterSpec,
    HardwareSpec,
    LinkSpec,
    ModelConfig,
    NetworkSpec,
    kv_bytes_per_token,
    validate_deployment,
    weight_bytes_total,
)
from frontier_sim.workload import ArrivalSpec, LengthDist, WorkloadSpec, generate

BALANCED = {ATTN_COMPUTE: 100, A_TO_F_TRANSFER: 100,
            FFN_COMPUTE: 100, F_TO_A_TRANSFER: 100}


def graph_sweep():
    layers = 4
    print(f"balanced stages, {layers} layers, 100ns per node:")
    print(f"{'micro-batches':>14} {'step time (ns)':>15} {'per micro-batch':>16}")
    for m in (1, 2, 3, 4):
        duration, _ = run_af_graph(build_af_graph(m, layers, BALANCED))
        print(f"{m:>14} {duration:>15} {duration / m:>16.1f}")


def serving_demo():
    model = ModelConfig(num_layers=2, d_model=256, d_ff=1024,
                        num_query_heads=4, num_kv_heads=2, head_dim=64)
    needed = 100_000 * kv_bytes_per_token(model) + weight_bytes_total(model)
    hardware = HardwareSpec(peak_flops=312e12, mem_bw=2e12,
                            hbm_capacity_bytes=needed / 0.9 + 1024)
    clusters = [
        ClusterSpec(id="attn", role="attention", num_replicas=1,
                    gpus_per_replica=1, hardware=hardware),
        ClusterSpec(id="ffn", role="ffn", num_replicas=1,
                    gpus_per_replica=1, hardware=hardware),
    ]
    network = NetworkSpec(
        intra_replica=LinkSpec(latency_s=5e-6, bandwidth_bps=300e9),
        inter_cluster=LinkSpec(latency_s=20e-6, bandwidth_bps=50e9),
    )
    deployment = validate_deployment("af", model, clusters, network)
    requests = generate(WorkloadSpec(
        arrival=ArrivalSpec("batch_at_zero"),
        prompt_len=LengthDist("fixed", value=64),
        output_len=LengthDist("fixed", value=8),
        num_requests=8, seed=0,
    ))
    print("\nfull serving loop, 8 requests x 8 tokens:")
    print(f"{'micro-batches':>14} {'makespan (ms)':>14} {'bubble fraction':>16}")
    for m in (1, 2, 4):
        sim = AfSimulation(deployment, generate(WorkloadSpec(
            arrival=ArrivalSpec("batch_at_zero"),
            prompt_len=LengthDist("fixed", value=64),
            output_len=LengthDist("fixed", value=8),
            num_requests=8, seed=0,
        )), SchedulerPolicy(), af=AfPipelineConfig(micro_batches=m))
        bundle = compute_metrics(sim.run(), deployment)
        print(f"{m:>14} {bundle.makespan_s * 1e3:>14.3f} "
              f"{bundle.bubble_fraction:>16.3f}")


if __name__ == "__main__":
    graph_sweep()
    serving_demo()
