"""Analytic roofline predictors.

Every formula has the shape `kernel_overhead + max(flops / peak_flops,
bytes / mem_bw)`: a kernel is either compute-bound or memory-bound, and a
fixed launch overhead floors tiny invocations. Durations are microseconds.
"""

from __future__ import annotations

from frontier_sim.costmodel.features import AttentionFeatures, EmptyBatch, GroupedGemmFeatures
from frontier_sim.topology import HardwareSpec


class NonPositiveDim(Exception):
    pass


def _roofline_us(flops: float, num_bytes: float, hw: HardwareSpec) -> float:
    seconds = max(flops / hw.peak_flops, num_bytes / hw.mem_bw)
    return hw.kernel_overhead_us + seconds * 1e6


def linear_us(m: int, n: int, k: int, hw: HardwareSpec, dtype_bytes: int = 2) -> float:
    """Dense GEMM: C[m,n] = A[m,k] @ B[k,n]."""
    if m < 1 or n < 1 or k < 1:
        raise NonPositiveDim(f"GEMM dims must be positive, got ({m}, {n}, {k})")
    flops = 2.0 * m * n * k
    num_bytes = dtype_bytes * (m * n + n * k + m * k)
    return _roofline_us(flops, num_bytes, hw)


def attention_flops(f: AttentionFeatures) -> float:
    """Score+value FLOPs; causal prefill without prior context is halved."""
    hd = f.num_query_heads * f.head_dim
    if f.phase == "decode":
        return 4.0 * sum(f.kv_lengths) * hd
    total = 0.0
    for l, c in zip(f.query_lengths, f.kv_lengths):
        per = 4.0 * l * c * hd
        if c == l:
            per /= 2.0  # causal mask: half the score matrix is computed
        total += per
    return total


def attention_bytes(f: AttentionFeatures, dtype_bytes: int) -> float:
    kv = 2.0 * sum(f.kv_lengths) * f.num_kv_heads * f.head_dim * dtype_bytes
    qo = 2.0 * sum(f.query_lengths) * f.num_query_heads * f.head_dim * dtype_bytes
    return kv + qo


def attention_us(f: AttentionFeatures, hw: HardwareSpec, dtype_bytes: int = 2) -> float:
    return _roofline_us(attention_flops(f), attention_bytes(f, dtype_bytes), hw)


def grouped_gemm_us(
    f: GroupedGemmFeatures, hw: HardwareSpec, dtype_bytes: int = 2, num_matrices: int = 2
) -> float:
    """Per-expert FFN as `num_matrices` GEMMs launched as one grouped kernel.

    Inactive experts contribute neither FLOPs nor weight traffic, so a fully
    skewed assignment degenerates to the single-expert dense case.
    """
    routed = sum(f.expert_token_counts)
    if routed < 1:
        raise EmptyBatch("grouped GEMM with no routed tokens")
    active = sum(1 for n in f.expert_token_counts if n > 0)
    flops = 2.0 * num_matrices * routed * f.d_model * f.d_ff
    weight_bytes = active * num_matrices * f.d_model * f.d_ff * dtype_bytes
    act_bytes = routed * num_matrices * (f.d_model + f.d_ff) * dtype_bytes
    return _roofline_us(flops, weight_bytes + act_bytes, hw)
