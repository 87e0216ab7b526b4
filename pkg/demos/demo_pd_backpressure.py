"""Prefill/decode disaggregation under decode-memory backpressure.

Ten requests arrive at once. The decode pool holds exactly one request's KV
footprint, so the controller can start each KV-cache transfer only after the
previous request finishes decoding and signals its freed memory. The event
timeline makes the serialization visible; rerunning with a large pool shows
every transfer starting the instant its prefill completes.

Run:  python3 demos/demo_pd_backpressure.py
"""

from frontier_sim.cluster import SchedulerPolicy
from frontier_sim.core import EventKind
from frontier_sim.orchestrator import PdSimulation
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

MODEL = ModelConfig(num_layers=2, d_model=256, d_ff=1024,
                    num_query_heads=4, num_kv_heads=2, head_dim=64)
NETWORK = NetworkSpec(
    intra_replica=LinkSpec(latency_s=5e-6, bandwidth_bps=300e9),
    inter_cluster=LinkSpec(latency_s=20e-6, bandwidth_bps=50e9),
)
PROMPT, OUTPUT = 32, 4


def deployment(decode_pool_tokens):
    def hardware(pool_tokens):
        needed = pool_tokens * kv_bytes_per_token(MODEL) + weight_bytes_total(MODEL)
        return HardwareSpec(peak_flops=312e12, mem_bw=2e12,
                            hbm_capacity_bytes=needed / 0.9 + 1024)

    clusters = [
        ClusterSpec(id="p0", role="prefill", num_replicas=1, gpus_per_replica=1,
                    hardware=hardware(100_000)),
        ClusterSpec(id="d0", role="decode", num_replicas=1, gpus_per_replica=1,
                    hardware=hardware(decode_pool_tokens)),
    ]
    return validate_deployment("pd", MODEL, clusters, NETWORK)


def run(decode_pool_tokens):
    requests = generate(WorkloadSpec(
        arrival=ArrivalSpec("batch_at_zero"),
        prompt_len=LengthDist("fixed", value=PROMPT),
        output_len=LengthDist("fixed", value=OUTPUT),
        num_requests=10, seed=0,
    ))
    sim = PdSimulation(deployment(decode_pool_tokens), requests, SchedulerPolicy())
    return sim.run()


def timeline(trace, kinds):
    for ev in trace:
        if ev.kind in kinds:
            rid = ev.payload.get("request_id", "-")
            print(f"  t={ev.timestamp / 1e3:>10.1f}us  {ev.kind.value:<26} {rid}")


def main():
    footprint = PROMPT + OUTPUT
    print(f"decode pool = {footprint} tokens (fits exactly one request)")
    trace = run(footprint)
    timeline(trace, {EventKind.KV_CACHE_TRANSFER_START, EventKind.MEMORY_AVAILABLE,
                     EventKind.REQUEST_COMPLETE})

    print("\ndecode pool = 100000 tokens (no backpressure)")
    trace = run(100_000)
    starts = trace.events_of_kind(EventKind.KV_CACHE_TRANSFER_START)
    prefills = {ev.payload["request_id"]: ev.timestamp
                for ev in trace.events_of_kind(EventKind.PREFILL_COMPLETE)}
    immediate = sum(1 for ev in starts
                    if ev.timestamp == prefills[ev.payload["request_id"]])
    print(f"  {immediate}/{len(starts)} transfers started at the instant "
          "their prefill completed")


if __name__ == "__main__":
    main()
