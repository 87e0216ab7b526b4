"""Trace post-processing: latency, throughput, utilization, frontier reports.

Everything here is a pure function of the trace and the deployment, so
recomputing metrics is deterministic and never touches simulation state.
Percentiles use nearest-rank, which keeps reports reproducible bit-for-bit
across implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from frontier_sim.core import EventKind, EventTrace
from frontier_sim.costmodel.model import ErrorCdf
from frontier_sim.topology import Deployment

DEFAULT_ERROR_THRESHOLDS = (0.06, 0.10)


class IncompleteTrace(Exception):
    """The trace contains requests that never completed."""


def nearest_rank(values: list[float], pct: float) -> float:
    """Nearest-rank percentile over a non-empty list; pct in (0, 100]."""
    ordered = sorted(values)
    idx = max(0, math.ceil(pct / 100.0 * len(ordered)) - 1)
    return ordered[idx]


def _aggregate(values: list[float]) -> dict[str, float] | None:
    if not values:
        return None
    return {
        "mean": sum(values) / len(values),
        "p50": nearest_rank(values, 50),
        "p90": nearest_rank(values, 90),
        "p99": nearest_rank(values, 99),
    }


@dataclass
class MetricsBundle:
    per_request: dict[str, dict[str, float | None]]
    ttft: dict[str, float] | None
    tpot: dict[str, float] | None
    e2e: dict[str, float] | None
    total_tokens: int
    makespan_s: float
    total_gpus: int
    throughput_tokens_per_s_per_gpu: float
    busy_fraction: dict[str, float]
    bubble_fraction: float | None
    expert_imbalance: list[float]
    workload_summary: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "per_request": self.per_request,
            "aggregates": {"ttft_s": self.ttft, "tpot_s": self.tpot, "e2e_s": self.e2e},
            "total_tokens": self.total_tokens,
            "makespan_s": self.makespan_s,
            "total_gpus": self.total_gpus,
            "throughput_tokens_per_s_per_gpu": self.throughput_tokens_per_s_per_gpu,
            "busy_fraction": self.busy_fraction,
            "bubble_fraction": self.bubble_fraction,
            "expert_imbalance": self.expert_imbalance,
            "workload_summary": self.workload_summary,
        }


_AF_NODE_KINDS = (
    EventKind.ATTN_COMPUTE_DONE,
    EventKind.A_TO_F_TRANSFER_DONE,
    EventKind.FFN_COMPUTE_DONE,
    EventKind.F_TO_A_TRANSFER_DONE,
)


def compute_metrics(trace: EventTrace, deployment: Deployment) -> MetricsBundle:
    arrivals: dict[str, int] = {}
    prompts: dict[str, int] = {}
    outputs: dict[str, int] = {}
    first_token: dict[str, int] = {}
    completion: dict[str, int] = {}
    total_tokens = 0
    busy_ns: dict[str, int] = {}
    af_steps: list[tuple[int, int, int]] = []  # (step, start, duration)
    attn_busy_by_step: dict[int, int] = {}
    imbalance: list[float] = []

    for ev in trace:
        p = ev.payload
        if ev.kind is EventKind.REQUEST_ARRIVAL:
            arrivals[p["request_id"]] = ev.timestamp
            prompts[p["request_id"]] = p["prompt_tokens"]
            outputs[p["request_id"]] = p["output_tokens"]
        elif ev.kind is EventKind.TOKEN_EMITTED:
            total_tokens += len(p["request_ids"])
            for rid in p["request_ids"]:
                first_token.setdefault(rid, ev.timestamp)
        elif ev.kind is EventKind.REQUEST_COMPLETE:
            completion[p["request_id"]] = ev.timestamp
        elif ev.kind is EventKind.BATCH_COMPLETE:
            busy_ns[p["replica"]] = busy_ns.get(p["replica"], 0) + p["duration_ns"]
            if p["phase"] == "af_decode":
                af_steps.append((p["step"], ev.timestamp - p["duration_ns"], p["duration_ns"]))
            imbalance.extend(p.get("moe_imbalance", []))
        elif ev.kind in _AF_NODE_KINDS:
            resource = p["resource"]
            busy_ns[resource] = busy_ns.get(resource, 0) + p["duration_ns"]
            if ev.kind is EventKind.ATTN_COMPUTE_DONE:
                step = p["step"]
                attn_busy_by_step[step] = attn_busy_by_step.get(step, 0) + p["duration_ns"]

    missing = sorted(set(arrivals) - set(completion))
    if missing:
        raise IncompleteTrace(
            f"{len(missing)} requests have no REQUEST_COMPLETE: {missing[:5]}"
        )
    if not arrivals:
        raise IncompleteTrace("trace contains no requests")

    per_request: dict[str, dict[str, float | None]] = {}
    ttfts, tpots, e2es = [], [], []
    for rid, arrived in arrivals.items():
        ttft_s = (first_token[rid] - arrived) / 1e9
        e2e_s = (completion[rid] - arrived) / 1e9
        n_out = outputs[rid]
        tpot_s = (e2e_s - ttft_s) / (n_out - 1) if n_out > 1 else None
        per_request[rid] = {"ttft_s": ttft_s, "tpot_s": tpot_s, "e2e_s": e2e_s}
        ttfts.append(ttft_s)
        e2es.append(e2e_s)
        if tpot_s is not None:
            tpots.append(tpot_s)

    makespan_ns = max(1, max(completion.values()) - min(arrivals.values()))
    makespan_s = makespan_ns / 1e9
    total_gpus = deployment.total_gpus
    throughput = total_tokens / makespan_s / total_gpus

    busy_fraction = {
        key: min(1.0, ns / makespan_ns) for key, ns in sorted(busy_ns.items())
    }

    bubble = None
    if af_steps:
        weighted, total_dur = 0.0, 0
        for step, _, duration in af_steps:
            if duration <= 0:
                continue
            idle = max(0, duration - attn_busy_by_step.get(step, 0))
            weighted += idle
            total_dur += duration
        bubble = weighted / total_dur if total_dur else 0.0

    workload_summary = {
        "batch_size": len(arrivals),
        "avg_input_tokens": sum(prompts.values()) / len(prompts),
        "avg_output_tokens": sum(outputs.values()) / len(outputs),
        "throughput_tokens_per_s_per_gpu": throughput,
    }

    return MetricsBundle(
        per_request=per_request,
        ttft=_aggregate(ttfts),
        tpot=_aggregate(tpots),
        e2e=_aggregate(e2es),
        total_tokens=total_tokens,
        makespan_s=makespan_s,
        total_gpus=total_gpus,
        throughput_tokens_per_s_per_gpu=throughput,
        busy_fraction=busy_fraction,
        bubble_fraction=bubble,
        expert_imbalance=imbalance,
        workload_summary=workload_summary,
    )


def error_cdf_report(
    cdf: ErrorCdf, thresholds: tuple[float, ...] = DEFAULT_ERROR_THRESHOLDS
) -> list[dict[str, float]]:
    return [{"threshold": t, "fraction": cdf.cdf(t)} for t in sorted(thresholds)]


def _dominates(a: MetricsBundle, b: MetricsBundle) -> bool:
    """Higher throughput and lower p90 inter-token latency, one strictly."""
    tpot_a = a.tpot["p90"] if a.tpot else math.inf
    tpot_b = b.tpot["p90"] if b.tpot else math.inf
    thr_a, thr_b = a.throughput_tokens_per_s_per_gpu, b.throughput_tokens_per_s_per_gpu
    return thr_a >= thr_b and tpot_a <= tpot_b and (thr_a > thr_b or tpot_a < tpot_b)


def pareto_frontier(results: list[tuple[object, MetricsBundle]]) -> list[tuple[object, MetricsBundle]]:
    """Subset of results not dominated in (throughput up, p90 tpot down)."""
    frontier = []
    for i, (tag, bundle) in enumerate(results):
        if not any(_dominates(other, bundle) for j, (_, other) in enumerate(results) if j != i):
            frontier.append((tag, bundle))
    return frontier


SUMMARY_CSV_HEADER = [
    "config_hash", "throughput_tokens_per_s_per_gpu",
    "ttft_p50_s", "ttft_p90_s", "ttft_p99_s",
    "tpot_p50_s", "tpot_p90_s", "tpot_p99_s",
    "makespan_s",
]


def summary_csv_row(bundle: MetricsBundle, config_hash: str) -> list[str]:
    def pick(agg, key):
        return repr(agg[key]) if agg else ""

    return [
        config_hash,
        repr(bundle.throughput_tokens_per_s_per_gpu),
        pick(bundle.ttft, "p50"), pick(bundle.ttft, "p90"), pick(bundle.ttft, "p99"),
        pick(bundle.tpot, "p50"), pick(bundle.tpot, "p90"), pick(bundle.tpot, "p99"),
        repr(bundle.makespan_s),
    ]
