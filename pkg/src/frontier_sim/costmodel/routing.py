"""Pluggable token-to-expert routing.

The simulator never routes real tokens; it needs the per-expert token counts
that a router would produce, because those counts drive the grouped-GEMM
straggler behaviour. Policies:

- "uniform": every token picks top_k distinct experts uniformly.
- "dirichlet_skew": expert popularity is drawn once per batch from
  Dirichlet(alpha * 1); small alpha concentrates load on few experts.
- "trace": counts supplied directly (replayed from a measured system).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidTopK(Exception):
    pass


class RoutingError(Exception):
    pass


@dataclass(frozen=True)
class ExpertAssignment:
    """Per-expert token counts for one MoE layer invocation."""

    total_tokens: int
    top_k: int
    counts: tuple[int, ...]  # length = global expert count
    policy: str
    seed: int

    def __post_init__(self) -> None:
        if sum(self.counts) != self.total_tokens * self.top_k:
            raise RoutingError(
                "expert counts must sum to total_tokens * top_k "
                f"({sum(self.counts)} != {self.total_tokens * self.top_k})"
            )

    @property
    def num_experts(self) -> int:
        return len(self.counts)

    def per_rank_counts(self, ep_ranks: int) -> list[tuple[int, ...]]:
        """Contiguous expert blocks per EP rank."""
        if self.num_experts % ep_ranks != 0:
            raise RoutingError(
                f"{self.num_experts} experts not divisible across {ep_ranks} EP ranks"
            )
        per = self.num_experts // ep_ranks
        return [self.counts[r * per : (r + 1) * per] for r in range(ep_ranks)]


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, 0xE0]).generate_state(2, np.uint64))
    )


def route_tokens(
    total_tokens: int,
    num_experts: int,
    top_k: int,
    policy: str = "uniform",
    seed: int = 0,
    alpha: float = 0.3,
    counts: list[int] | None = None,
) -> ExpertAssignment:
    """Assign each token to exactly top_k distinct experts."""
    if not 1 <= top_k <= num_experts:
        raise InvalidTopK(f"need 1 <= top_k <= num_experts, got {top_k} of {num_experts}")
    if total_tokens < 0:
        raise RoutingError("total_tokens must be >= 0")

    if policy == "trace":
        if counts is None:
            raise RoutingError("trace policy needs explicit counts")
        if len(counts) != num_experts:
            raise RoutingError(f"expected {num_experts} counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise RoutingError("counts must be >= 0")
        return ExpertAssignment(total_tokens, top_k, tuple(int(c) for c in counts),
                                policy, seed)

    if total_tokens == 0:
        return ExpertAssignment(0, top_k, (0,) * num_experts, policy, seed)
    if top_k == num_experts:
        return ExpertAssignment(total_tokens, top_k, (total_tokens,) * num_experts,
                                policy, seed)

    rng = _rng(seed)
    if policy == "uniform":
        keys = rng.random((total_tokens, num_experts))
    elif policy == "dirichlet_skew":
        if alpha <= 0:
            raise RoutingError("dirichlet_skew needs alpha > 0")
        popularity = rng.dirichlet(np.full(num_experts, alpha))
        popularity = np.maximum(popularity, 1e-12)
        # Exponential race: the top_k smallest Exp(1)/p_e draws select experts
        # without replacement, proportionally to popularity.
        keys = rng.exponential(1.0, (total_tokens, num_experts)) / popularity
    else:
        raise RoutingError(f"unknown routing policy {policy!r}")

    chosen = np.argpartition(keys, top_k - 1, axis=1)[:, :top_k]
    tallies = np.bincount(chosen.ravel(), minlength=num_experts)
    return ExpertAssignment(total_tokens, top_k, tuple(int(c) for c in tallies),
                            policy, seed)
