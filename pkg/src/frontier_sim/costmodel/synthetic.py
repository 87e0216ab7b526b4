"""Synthetic operator-runtime suites.

Desk-scale stand-ins for GPU profiling sweeps: batches are drawn with heavy
length variance, and the ground-truth runtime mixes compute, memory and
tile-quantization terms so that it is learnable from the rich feature set
but not from a single collapsed proxy length. Multiplicative noise emulates
run-to-run kernel jitter.
"""

from __future__ import annotations

import math

import numpy as np

from frontier_sim.costmodel.features import AttentionFeatures, GroupedGemmFeatures
from frontier_sim.costmodel.model import OperatorDataset


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, stream]).generate_state(2, np.uint64))
    )


def attention_truth_us(f: AttentionFeatures) -> float:
    """Noise-free synthetic attention runtime.

    Work scales with sum(l_i * c_i); memory traffic with sum(c_i); the ceil
    term emulates tile/wave quantization against the longest context. Batches
    sharing a proxy length sqrt(sum c_i^2) but differing in spread land on
    different runtimes by construction.
    """
    lc = sum(l * c for l, c in zip(f.query_lengths, f.kv_lengths))
    c_sum = sum(f.kv_lengths)
    c_max = max(f.kv_lengths)
    hd = f.num_query_heads * f.head_dim
    compute = 2.4e-7 * lc * hd / 128.0
    memory = 1.1e-3 * c_sum * f.num_kv_heads * f.head_dim / 128.0
    waves = 0.9 * math.ceil(c_max / 256.0) + 0.35 * f.batch_size
    return 6.0 + max(compute, memory) + waves


def make_attention_suite(
    n_samples: int,
    seed: int = 0,
    noise: float = 0.03,
    decode_fraction: float = 0.5,
    sigma: float = 1.1,
) -> tuple[OperatorDataset, list[AttentionFeatures]]:
    """High length-variance attention batches with noisy ground truth."""
    rng = _rng(seed, 0xA7)
    feats: list[AttentionFeatures] = []
    X, y = [], []
    for _ in range(n_samples):
        batch = int(rng.integers(1, 65))
        phase = "decode" if rng.random() < decode_fraction else "prefill"
        ctx = np.clip(
            np.rint(rng.lognormal(mean=5.6, sigma=sigma, size=batch)), 16, 8192
        ).astype(int)
        if phase == "decode":
            q = tuple([1] * batch)
        else:
            q = tuple(int(c) for c in ctx)
        f = AttentionFeatures(
            phase=phase,
            query_lengths=q,
            kv_lengths=tuple(int(c) for c in ctx),
            num_query_heads=32,
            num_kv_heads=8,
            head_dim=128,
        )
        truth = attention_truth_us(f)
        noisy = truth * (1.0 + noise * rng.standard_normal()) if noise else truth
        feats.append(f)
        X.append(f.vector())
        y.append(max(noisy, 0.5))
    return (
        OperatorDataset("attention_v1", np.array(X), np.array(y)),
        feats,
    )


def sqrt_proxy_dataset(
    suite: OperatorDataset, feats: list[AttentionFeatures]
) -> OperatorDataset:
    """The same targets seen through the single collapsed proxy feature."""
    X = np.array([[f.sqrt_proxy()] for f in feats])
    return OperatorDataset("attention_sqrt_proxy_v1", X, suite.y.copy())


def grouped_gemm_truth_us(f: GroupedGemmFeatures) -> float:
    """Noise-free synthetic grouped-GEMM runtime.

    Each active expert pays a launch cost; the max-loaded expert gates the
    kernel's tail, so imbalance slows the invocation even at equal totals.
    """
    routed = sum(f.expert_token_counts)
    active = sum(1 for n in f.expert_token_counts if n > 0)
    n_max = max(f.expert_token_counts)
    dense = 4.0e-9 * routed * f.d_model * f.d_ff
    tail = 9.0e-9 * n_max * f.d_model * f.d_ff
    return 4.0 + 1.6 * active + dense + tail


def make_grouped_gemm_suite(
    n_samples: int, seed: int = 0, noise: float = 0.02
) -> tuple[OperatorDataset, list[GroupedGemmFeatures]]:
    rng = _rng(seed, 0xB3)
    feats: list[GroupedGemmFeatures] = []
    X, y = [], []
    dims = [(1024, 2048), (2048, 1408)]
    for _ in range(n_samples):
        experts = int(rng.choice([8, 16]))
        top_k = int(rng.integers(1, 3))
        tokens = int(rng.integers(8, 2049))
        alpha = float(rng.uniform(0.05, 4.0))
        popularity = rng.dirichlet(np.full(experts, alpha))
        counts = rng.multinomial(tokens * top_k, popularity)
        d_model, d_ff = dims[int(rng.integers(0, len(dims)))]
        f = GroupedGemmFeatures(
            total_tokens=tokens,
            expert_token_counts=tuple(int(c) for c in counts),
            d_model=d_model,
            d_ff=d_ff,
            top_k=top_k,
            mode="replicated",
        )
        truth = grouped_gemm_truth_us(f)
        noisy = truth * (1.0 + noise * rng.standard_normal()) if noise else truth
        feats.append(f)
        X.append(f.vector())
        y.append(max(noisy, 0.5))
    return (
        OperatorDataset("grouped_gemm_v1", np.array(X), np.array(y)),
        feats,
    )
