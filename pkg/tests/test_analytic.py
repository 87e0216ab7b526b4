import pytest

from frontier_sim.costmodel.analytic import (
    NonPositiveDim,
    attention_us,
    grouped_gemm_us,
    linear_us,
)
from frontier_sim.costmodel.features import AttentionFeatures, EmptyBatch, GroupedGemmFeatures
from frontier_sim.topology import HardwareSpec

HW = HardwareSpec(peak_flops=312e12, mem_bw=2e12, hbm_capacity_bytes=80e9,
                  kernel_overhead_us=5.0)


def attn(phase, q, kv, hq=8, hkv=2, d=64):
    return AttentionFeatures(phase=phase, query_lengths=tuple(q), kv_lengths=tuple(kv),
                             num_query_heads=hq, num_kv_heads=hkv, head_dim=d)


class TestLinear:
    def test_unit_gemm_is_overhead_dominated(self):
        assert linear_us(1, 1, 1, HW) == pytest.approx(5.0, abs=1e-3)

    def test_doubling_m_doubles_flop_term(self):
        # Sizes chosen compute-bound so the max() picks the FLOP term.
        base = linear_us(2048, 4096, 4096, HW) - HW.kernel_overhead_us
        double = linear_us(4096, 4096, 4096, HW) - HW.kernel_overhead_us
        assert double == pytest.approx(2 * base, rel=1e-3)

    def test_hand_evaluated_flop_term(self):
        # 2*1024*4096*4096 / 312e12 s ~= 110.1us; memory term is smaller.
        t = linear_us(1024, 4096, 4096, HW)
        flop_term_us = 2 * 1024 * 4096 * 4096 / 312e12 * 1e6
        assert flop_term_us == pytest.approx(110.1, abs=0.1)
        assert t == pytest.approx(HW.kernel_overhead_us + flop_term_us, rel=1e-6)

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(NonPositiveDim):
            linear_us(0, 4, 4, HW)

    def test_monotone_in_every_dim(self):
        base = linear_us(64, 64, 64, HW)
        assert linear_us(128, 64, 64, HW) >= base
        assert linear_us(64, 128, 64, HW) >= base
        assert linear_us(64, 64, 128, HW) >= base


class TestAttention:
    def test_tiny_decode_is_overhead_dominated(self):
        f = attn("decode", [1], [1], hq=1, hkv=1, d=1)
        assert attention_us(f, HW) == pytest.approx(5.0, abs=1e-3)

    def test_doubling_prefill_lengths_quadruples_compute_term(self):
        # Compute-bound regime: FLOPs scale with sum(l*c) = sum(l^2).
        short = attn("prefill", [4096] * 4, [4096] * 4, hq=32, hkv=8, d=128)
        long = attn("prefill", [8192] * 4, [8192] * 4, hq=32, hkv=8, d=128)
        ratio = (attention_us(long, HW) - HW.kernel_overhead_us) / (
            attention_us(short, HW) - HW.kernel_overhead_us
        )
        assert ratio == pytest.approx(4.0, rel=0.05)

    def test_monotone_in_context(self):
        a = attn("decode", [1, 1], [100, 100])
        b = attn("decode", [1, 1], [200, 100])
        assert attention_us(b, HW) >= attention_us(a, HW)


class TestGroupedGemm:
    def gg(self, counts, tokens, experts_mode="replicated", top_k=1):
        return GroupedGemmFeatures(total_tokens=tokens, expert_token_counts=tuple(counts),
                                   d_model=1024, d_ff=2048, top_k=top_k, mode=experts_mode)

    def test_degenerate_grouping_equals_single_group(self):
        # All tokens on one of eight experts == the one-expert case exactly.
        spread = self.gg([256, 0, 0, 0, 0, 0, 0, 0], tokens=256)
        single = self.gg([256], tokens=256)
        assert grouped_gemm_us(spread, HW) == grouped_gemm_us(single, HW)

    def test_zero_tokens_rejected(self):
        f = self.gg([4, 4], tokens=8, experts_mode="local")
        object.__setattr__(f, "expert_token_counts", (0, 0))  # bypass ctor guard
        with pytest.raises(EmptyBatch):
            grouped_gemm_us(f, HW)

    def test_gated_variant_costs_more(self):
        f = self.gg([128, 128], tokens=256, experts_mode="local")
        assert grouped_gemm_us(f, HW, num_matrices=3) > grouped_gemm_us(f, HW, num_matrices=2)
