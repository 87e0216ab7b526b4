"""Operator feature extraction.

Kernel runtimes depend on far more than total work: batches with identical
token sums but different length spreads run at very different speeds. The
feature vectors therefore carry aggregate and distributional statistics of
the raw per-request lengths (attention) and of the per-expert token loads
(grouped GEMM), rather than a single collapsed proxy length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class EmptyBatch(Exception):
    """Feature extraction requires at least one request / one routed token."""


def _stats(values: Sequence[int]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "sum": float(arr.sum()),
        "sum_sq": float((arr * arr).sum()),
        "max": float(arr.max()),
        "min": float(arr.min()),
        "mean": float(arr.mean()),
        "std": float(arr.std()),
    }


ATTENTION_FEATURE_NAMES = [
    "is_decode",
    "batch_size",
    "q_sum", "q_sum_sq", "q_max", "q_min", "q_mean", "q_std",
    "kv_sum", "kv_sum_sq", "kv_max", "kv_min", "kv_mean", "kv_std",
    "num_query_heads",
    "num_kv_heads",
    "head_dim",
]

GROUPED_GEMM_FEATURE_NAMES = [
    "total_tokens",
    "num_local_experts",
    "d_model",
    "d_ff",
    "top_k",
    "expert_selection_ratio",
    "load_max_over_mean",
    "load_cv",
    "load_entropy",
    "tokens_max",
    "tokens_mean",
    "tokens_std",
]

SCHEMAS = {
    "attention_v1": ATTENTION_FEATURE_NAMES,
    "grouped_gemm_v1": GROUPED_GEMM_FEATURE_NAMES,
    # Comparison baseline: the whole batch collapsed to one proxy length.
    "attention_sqrt_proxy_v1": ["sqrt_sum_sq_kv_len"],
}


@dataclass(frozen=True)
class AttentionFeatures:
    """One attention invocation: per-request query and KV-context lengths."""

    phase: str  # prefill | decode
    query_lengths: tuple[int, ...]
    kv_lengths: tuple[int, ...]
    num_query_heads: int
    num_kv_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        if self.phase not in ("prefill", "decode"):
            raise ValueError(f"unknown attention phase {self.phase!r}")
        if not self.query_lengths:
            raise EmptyBatch("attention batch has no requests")
        if len(self.query_lengths) != len(self.kv_lengths):
            raise ValueError("query and KV length lists must align")
        if any(l < 1 for l in self.query_lengths):
            raise ValueError("query lengths must be >= 1")
        if self.phase == "decode" and any(l != 1 for l in self.query_lengths):
            raise ValueError("decode batches have query length 1 per request")
        if self.phase == "prefill" and any(
            c < l for l, c in zip(self.query_lengths, self.kv_lengths)
        ):
            raise ValueError("prefill KV context includes the query tokens (c_i >= l_i)")
        if any(c < 1 for c in self.kv_lengths):
            raise ValueError("KV lengths must be >= 1")

    @property
    def batch_size(self) -> int:
        return len(self.query_lengths)

    def vector(self) -> np.ndarray:
        q = _stats(self.query_lengths)
        kv = _stats(self.kv_lengths)
        return np.array(
            [
                1.0 if self.phase == "decode" else 0.0,
                float(self.batch_size),
                q["sum"], q["sum_sq"], q["max"], q["min"], q["mean"], q["std"],
                kv["sum"], kv["sum_sq"], kv["max"], kv["min"], kv["mean"], kv["std"],
                float(self.num_query_heads),
                float(self.num_kv_heads),
                float(self.head_dim),
            ],
            dtype=np.float64,
        )

    def sqrt_proxy(self) -> float:
        """Single collapsed proxy length: sqrt of the sum of squared KV lengths.

        Kept as a comparison baseline only; it discards the spread information
        that drives kernel partitioning behaviour.
        """
        return math.sqrt(sum(c * c for c in self.kv_lengths))


@dataclass(frozen=True)
class GroupedGemmFeatures:
    """One grouped-GEMM invocation: per-expert token loads plus model dims.

    `mode` declares the token-count bookkeeping: "replicated" counts every
    (token, expert) pair so the loads sum to total_tokens * top_k; "local" is
    one EP shard's view where the loads sum to total_tokens.
    """

    total_tokens: int
    expert_token_counts: tuple[int, ...]
    d_model: int
    d_ff: int
    top_k: int
    mode: str = "replicated"

    def __post_init__(self) -> None:
        if self.total_tokens < 1:
            raise EmptyBatch("grouped GEMM with no tokens")
        if not self.expert_token_counts:
            raise ValueError("need at least one expert")
        if any(n < 0 for n in self.expert_token_counts):
            raise ValueError("expert token counts must be >= 0")
        if self.d_model < 1 or self.d_ff < 1 or self.top_k < 1:
            raise ValueError("dims and top_k must be positive")
        declared = (
            self.total_tokens * self.top_k
            if self.mode == "replicated"
            else self.total_tokens
        )
        if self.mode not in ("replicated", "local"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if sum(self.expert_token_counts) != declared:
            raise ValueError(
                f"expert loads sum to {sum(self.expert_token_counts)}, "
                f"declared {declared} for mode {self.mode!r}"
            )

    @property
    def num_local_experts(self) -> int:
        return len(self.expert_token_counts)

    def load_metrics(self) -> dict[str, float]:
        counts = np.asarray(self.expert_token_counts, dtype=np.float64)
        active = counts[counts > 0]
        selection_ratio = len(active) / len(counts)
        max_over_mean = float(counts.max() / active.mean()) if len(active) else 0.0
        mean = counts.mean()
        cv = float(counts.std() / mean) if mean > 0 else 0.0
        total = counts.sum()
        if len(counts) == 1:
            entropy = 1.0  # a single expert is trivially balanced
        elif total > 0:
            p = active / total
            entropy = float(-(p * np.log(p)).sum() / math.log(len(counts)))
        else:
            entropy = 0.0
        return {
            "expert_selection_ratio": selection_ratio,
            "load_max_over_mean": max_over_mean,
            "load_cv": cv,
            "load_entropy": entropy,
        }

    def vector(self) -> np.ndarray:
        counts = np.asarray(self.expert_token_counts, dtype=np.float64)
        load = self.load_metrics()
        return np.array(
            [
                float(self.total_tokens),
                float(self.num_local_experts),
                float(self.d_model),
                float(self.d_ff),
                float(self.top_k),
                load["expert_selection_ratio"],
                load["load_max_over_mean"],
                load["load_cv"],
                load["load_entropy"],
                float(counts.max()),
                float(counts.mean()),
                float(counts.std()),
            ],
            dtype=np.float64,
        )
