import itertools
import random

import pytest

from conftest import af_deployment, colocated_deployment, tiny_model
from frontier_sim.cluster import SchedulerPolicy
from frontier_sim.core import EventKind, Simulator
from frontier_sim.costmodel.model import ErrorCdf
from frontier_sim.metrics import (
    IncompleteTrace,
    MetricsBundle,
    compute_metrics,
    error_cdf_report,
    nearest_rank,
    pareto_frontier,
)
from frontier_sim.orchestrator import AfPipelineConfig, AfSimulation, ColocatedSimulation
from frontier_sim.workload import ArrivalSpec, LengthDist, WorkloadSpec, generate

import numpy as np


def synthetic_trace(events):
    sim = Simulator()
    for kind in EventKind:
        sim.on(kind, lambda ev: None)
    for t, kind, payload in events:
        sim.schedule(t, kind, payload)
    return sim.run_to_completion()


def minimal_deployment():
    return colocated_deployment(tiny_model(), num_replicas=1)


class TestDefinitions:
    def test_ttft_and_tpot_from_hand_built_trace(self):
        ms = 1_000_000
        trace = synthetic_trace([
            (0, EventKind.REQUEST_ARRIVAL,
             {"request_id": "r0", "prompt_tokens": 8, "output_tokens": 2}),
            (10 * ms, EventKind.TOKEN_EMITTED, {"replica": "c0/0", "request_ids": ["r0"]}),
            (30 * ms, EventKind.TOKEN_EMITTED, {"replica": "c0/0", "request_ids": ["r0"]}),
            (30 * ms, EventKind.REQUEST_COMPLETE,
             {"request_id": "r0", "tokens_emitted": 2, "output_tokens": 2,
              "prompt_tokens": 8}),
        ])
        bundle = compute_metrics(trace, minimal_deployment())
        r = bundle.per_request["r0"]
        assert r["ttft_s"] == pytest.approx(0.010)
        assert r["tpot_s"] == pytest.approx(0.020)
        assert r["e2e_s"] == pytest.approx(0.030)

    def test_throughput_identity_formula_shape(self):
        # 4 requests x 1024 tokens over a 4.6s makespan on 8 GPUs ~= 111.3.
        tokens = 4 * 1024
        makespan_s = 4.6
        gpus = 8
        assert tokens / makespan_s / gpus == pytest.approx(111.3, abs=0.1)

    def test_missing_completion_rejected(self):
        trace = synthetic_trace([
            (0, EventKind.REQUEST_ARRIVAL,
             {"request_id": "r0", "prompt_tokens": 8, "output_tokens": 2}),
        ])
        with pytest.raises(IncompleteTrace):
            compute_metrics(trace, minimal_deployment())

    def test_nearest_rank_percentiles(self):
        values = [1.0, 2.0, 3.0, 4.0]
        assert nearest_rank(values, 50) == 2.0
        assert nearest_rank(values, 90) == 4.0
        assert nearest_rank(values, 100) == 4.0


def run_colocated_trace(n=4, output=6):
    dep = colocated_deployment(tiny_model())
    reqs = generate(WorkloadSpec(
        arrival=ArrivalSpec("batch_at_zero"),
        prompt_len=LengthDist("fixed", value=32),
        output_len=LengthDist("fixed", value=output),
        num_requests=n, seed=0,
    ))
    sim = ColocatedSimulation(dep, reqs, SchedulerPolicy())
    return sim.run(), dep


class TestFromSimulation:
    def test_throughput_identity_exact_on_real_trace(self):
        trace, dep = run_colocated_trace()
        bundle = compute_metrics(trace, dep)
        tokens = sum(len(ev.payload["request_ids"])
                     for ev in trace.events_of_kind(EventKind.TOKEN_EMITTED))
        assert bundle.total_tokens == tokens
        assert bundle.throughput_tokens_per_s_per_gpu == (
            tokens / bundle.makespan_s / dep.total_gpus
        )

    def test_recompute_is_pure(self):
        trace, dep = run_colocated_trace()
        a = compute_metrics(trace, dep).to_dict()
        b = compute_metrics(trace, dep).to_dict()
        assert a == b

    def test_busy_fraction_bounded(self):
        trace, dep = run_colocated_trace()
        bundle = compute_metrics(trace, dep)
        assert bundle.busy_fraction
        for fraction in bundle.busy_fraction.values():
            assert 0.0 <= fraction <= 1.0

    def test_af_bubble_fraction_in_unit_interval_and_smaller_with_overlap(self):
        def bubble(m):
            dep = af_deployment(tiny_model())
            reqs = generate(WorkloadSpec(
                arrival=ArrivalSpec("batch_at_zero"),
                prompt_len=LengthDist("fixed", value=32),
                output_len=LengthDist("fixed", value=6),
                num_requests=4, seed=0,
            ))
            sim = AfSimulation(dep, reqs, SchedulerPolicy(),
                               af=AfPipelineConfig(micro_batches=m))
            bundle = compute_metrics(sim.run(), dep)
            assert bundle.bubble_fraction is not None
            assert 0.0 <= bundle.bubble_fraction <= 1.0
            return bundle.bubble_fraction

        assert bubble(2) < bubble(1)


class TestErrorCdfReport:
    def test_perfect_predictions(self):
        cdf = ErrorCdf(np.zeros(10))
        rows = error_cdf_report(cdf)
        assert [r["threshold"] for r in rows] == [0.06, 0.10]
        assert all(r["fraction"] == 1.0 for r in rows)

    def test_fractions_monotone(self):
        cdf = ErrorCdf(np.linspace(0, 0.5, 101))
        rows = error_cdf_report(cdf, thresholds=(0.01, 0.06, 0.10, 0.25))
        fractions = [r["fraction"] for r in rows]
        assert fractions == sorted(fractions)


def bundle_with(throughput, tpot_p90):
    return MetricsBundle(
        per_request={}, ttft=None,
        tpot={"mean": tpot_p90, "p50": tpot_p90, "p90": tpot_p90, "p99": tpot_p90},
        e2e=None, total_tokens=0, makespan_s=1.0, total_gpus=1,
        throughput_tokens_per_s_per_gpu=throughput, busy_fraction={},
        bubble_fraction=None, expert_imbalance=[], workload_summary={},
    )


class TestPareto:
    def test_single_config_is_its_own_frontier(self):
        results = [("a", bundle_with(10.0, 0.5))]
        assert pareto_frontier(results) == results

    def test_dominated_config_dropped(self):
        results = [("good", bundle_with(20.0, 0.1)), ("bad", bundle_with(10.0, 0.5))]
        assert [tag for tag, _ in pareto_frontier(results)] == ["good"]

    def test_matches_brute_force_oracle(self):
        rng = random.Random(9)
        results = [
            (i, bundle_with(rng.uniform(1, 100), rng.uniform(0.01, 1.0)))
            for i in range(40)
        ]

        def dominated(i):
            ti = results[i][1]
            for j in range(len(results)):
                if j == i:
                    continue
                tj = results[j][1]
                if (tj.throughput_tokens_per_s_per_gpu >= ti.throughput_tokens_per_s_per_gpu
                        and tj.tpot["p90"] <= ti.tpot["p90"]
                        and (tj.throughput_tokens_per_s_per_gpu > ti.throughput_tokens_per_s_per_gpu
                             or tj.tpot["p90"] < ti.tpot["p90"])):
                    return True
            return False

        oracle = [results[i] for i in range(len(results)) if not dominated(i)]
        assert pareto_frontier(results) == oracle
