import random

import pytest

from frontier_sim.topology import (
    ClusterSpec,
    HardwareSpec,
    LinkSpec,
    ModelConfig,
    MoeConfig,
    NetworkSpec,
    ParallelismConfig,
    RoleSetInvalid,
    TopologyConstraintViolated,
    collective_time,
    kv_bytes_per_token,
    tp_shard_bytes,
    transfer_time,
    validate_deployment,
    weight_bytes_total,
)

HW = HardwareSpec(peak_flops=312e12, mem_bw=2e12, hbm_capacity_bytes=80e9)
NET = NetworkSpec(
    intra_replica=LinkSpec(latency_s=5e-6, bandwidth_bps=300e9),
    inter_cluster=LinkSpec(latency_s=20e-6, bandwidth_bps=50e9),
)


def dense_model(num_layers=4):
    return ModelConfig(
        num_layers=num_layers, d_model=512, d_ff=2048,
        num_query_heads=8, num_kv_heads=2, head_dim=64,
    )


def moe_model():
    return ModelConfig(
        num_layers=4, d_model=512, d_ff=2048,
        num_query_heads=8, num_kv_heads=2, head_dim=64,
        moe=MoeConfig(num_experts=8, top_k=2, expert_d_ff=1024),
    )


def af_cluster(role, attn_tp=4, attn_dp=2, moe_tp=2, moe_ep=4):
    par = ParallelismConfig(attn_tp=attn_tp, attn_dp=attn_dp, moe_tp=moe_tp, moe_ep=moe_ep)
    gpus = attn_tp * attn_dp if role == "attention" else moe_tp * moe_ep
    return ClusterSpec(id=role, role=role, num_replicas=1, gpus_per_replica=gpus,
                       hardware=HW, parallelism=par)


class TestAfSplitConstraint:
    def test_valid_split_accepted(self):
        dep = validate_deployment(
            "af", moe_model(), [af_cluster("attention"), af_cluster("ffn")], NET
        )
        assert dep.mode == "af"

    def test_violated_split_rejected_with_named_equation(self):
        bad = af_cluster("ffn", moe_tp=2, moe_ep=2)  # 8 != 4
        bad = ClusterSpec(id="ffn", role="ffn", num_replicas=1, gpus_per_replica=4,
                          hardware=HW,
                          parallelism=ParallelismConfig(attn_tp=4, attn_dp=2, moe_tp=2, moe_ep=2))
        with pytest.raises(TopologyConstraintViolated, match=r"attn_dp\*attn_tp == moe_tp\*moe_ep"):
            validate_deployment("af", moe_model(), [af_cluster("attention"), bad], NET)

    def test_random_matrix_matches_integer_arithmetic(self):
        rng = random.Random(5)
        for _ in range(50):
            attn_tp, attn_dp, moe_tp, moe_ep = (rng.randint(1, 8) for _ in range(4))
            par = ParallelismConfig(attn_tp=attn_tp, attn_dp=attn_dp, moe_tp=moe_tp, moe_ep=moe_ep)
            should_pass = attn_tp * attn_dp == moe_tp * moe_ep
            if should_pass:
                par.validate(require_af_split=True)
            else:
                with pytest.raises(TopologyConstraintViolated):
                    par.validate(require_af_split=True)


class TestRoleSets:
    def test_pd_without_decode_rejected(self):
        prefill = ClusterSpec(id="p0", role="prefill", num_replicas=1,
                              gpus_per_replica=1, hardware=HW)
        with pytest.raises(RoleSetInvalid):
            validate_deployment("pd", dense_model(), [prefill], NET)

    def test_colocated_roundtrip_idempotent(self):
        c = ClusterSpec(id="c0", role="colocated", num_replicas=2,
                        gpus_per_replica=1, hardware=HW)
        dep1 = validate_deployment("colocated", dense_model(), [c], NET)
        dep2 = validate_deployment("colocated", dense_model(), list(dep1.clusters), NET)
        assert dep1 == dep2

    def test_gpu_product_mismatch(self):
        c = ClusterSpec(id="c0", role="colocated", num_replicas=1, gpus_per_replica=3,
                        hardware=HW, parallelism=ParallelismConfig(tp=2))
        with pytest.raises(TopologyConstraintViolated, match="tp"):
            validate_deployment("colocated", dense_model(), [c], NET)


class TestKvBytes:
    def test_unit_case(self):
        m = ModelConfig(num_layers=1, d_model=1, d_ff=1,
                        num_query_heads=1, num_kv_heads=1, head_dim=1, dtype_bytes=2)
        assert kv_bytes_per_token(m) == 4

    def test_hand_arithmetic(self):
        m = ModelConfig(num_layers=28, d_model=3584, d_ff=18944,
                        num_query_heads=28, num_kv_heads=4, head_dim=128, dtype_bytes=2)
        assert kv_bytes_per_token(m) == 57_344

    def test_linear_in_layers(self):
        assert kv_bytes_per_token(dense_model(8)) == 2 * kv_bytes_per_token(dense_model(4))


class TestNetworkCosts:
    def test_zero_bytes_is_alpha(self):
        link = LinkSpec(latency_s=10e-6, bandwidth_bps=50e9)
        assert transfer_time(0, link) == 10e-6

    def test_one_gb_hand_value(self):
        link = LinkSpec(latency_s=10e-6, bandwidth_bps=50e9)
        assert transfer_time(1e9, link) == pytest.approx(10e-6 + 0.02)

    def test_transfer_monotone_in_bytes(self):
        link = LinkSpec(latency_s=1e-6, bandwidth_bps=1e9)
        times = [transfer_time(b, link) for b in range(0, 10_000, 1000)]
        assert times == sorted(times)

    def test_single_rank_collective_free(self):
        link = LinkSpec(latency_s=5e-6, bandwidth_bps=100e9)
        for kind in ("all_to_all", "all_reduce", "all_gather"):
            assert collective_time(kind, 1e6, 1, link) == 0.0

    def test_all_reduce_ring_hand_value(self):
        link = LinkSpec(latency_s=5e-6, bandwidth_bps=100e9)
        # 2*alpha + 2*(1MB * 1/2)/beta = 10us + 10us
        assert collective_time("all_reduce", 1e6, 2, link) == pytest.approx(20e-6)

    def test_all_to_all_cheaper_than_all_reduce(self):
        link = LinkSpec(latency_s=5e-6, bandwidth_bps=100e9)
        for n in (2, 4, 8):
            assert collective_time("all_to_all", 1e6, n, link) <= collective_time(
                "all_reduce", 1e6, n, link
            )

    def test_collective_nondecreasing_in_ranks(self):
        link = LinkSpec(latency_s=5e-6, bandwidth_bps=100e9)
        times = [collective_time("all_to_all", 1e6, n, link) for n in range(1, 16)]
        assert all(a <= b for a, b in zip(times, times[1:]))

    def test_override_table_wins(self):
        link = LinkSpec(latency_s=5e-6, bandwidth_bps=100e9)
        out = collective_time("all_to_all", 1e6, 4, link, overrides={("all_to_all", 4): 42e-6})
        assert out == 42e-6


class TestWeightAccounting:
    def test_tp_shard_conservation(self):
        total = weight_bytes_total(dense_model())
        for tp in (1, 2, 3, 4, 7, 8):
            assert sum(tp_shard_bytes(total, tp)) == total

    def test_kv_pool_derived_from_hbm(self):
        c = ClusterSpec(id="c0", role="colocated", num_replicas=1,
                        gpus_per_replica=1, hardware=HW)
        dep = validate_deployment("colocated", dense_model(), [c], NET)
        norm = dep.clusters[0]
        per_token = kv_bytes_per_token(dense_model())
        expected = int((80e9 * 0.9 - norm.weight_bytes_per_replica) // per_token)
        assert norm.kv_pool_tokens == expected
        assert norm.kv_bytes_per_token == per_token
