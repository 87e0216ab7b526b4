"""Model architecture, parallelism layout, memory accounting, and network costs.

Everything here is immutable after `validate_deployment`; the simulation
workflows share these objects read-only. Network costs use a latency/bandwidth
(alpha-beta) model with ring-style collective formulas; per-deployment
overrides can replace any (kind, n_ranks) entry for calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

__all__ = [
    "ModelConfig",
    "MoeConfig",
    "ParallelismConfig",
    "HardwareSpec",
    "ClusterSpec",
    "LinkSpec",
    "NetworkSpec",
    "Deployment",
    "TopologyError",
    "TopologyConstraintViolated",
    "RoleSetInvalid",
    "validate_deployment",
    "kv_bytes_per_token",
    "weight_bytes_total",
    "tp_shard_bytes",
    "transfer_time",
    "collective_time",
]

CLUSTER_ROLES = ("colocated", "prefill", "decode", "attention", "ffn")
MODES = ("colocated", "pd", "af")

# Roles a deployment must contain, per mode.
_REQUIRED_ROLES = {
    "colocated": {"colocated"},
    "pd": {"prefill", "decode"},
    "af": {"attention", "ffn"},
}


class TopologyError(Exception):
    pass


class TopologyConstraintViolated(TopologyError):
    """A parallelism equation failed; the message names the equation."""


class RoleSetInvalid(TopologyError):
    """The set of cluster roles cannot serve the requested mode."""


@dataclass(frozen=True)
class MoeConfig:
    num_experts: int
    top_k: int
    expert_d_ff: int
    gated: bool = False  # 3-matrix expert FFN when true, 2 otherwise

    def validate(self) -> None:
        if self.num_experts < 1 or self.expert_d_ff < 1:
            raise TopologyConstraintViolated("moe dims must be positive")
        if not (1 <= self.top_k <= self.num_experts):
            raise TopologyConstraintViolated("1 <= top_k <= num_experts")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    d_ff: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    dtype_bytes: int = 2
    moe: MoeConfig | None = None

    def validate(self) -> None:
        dims = (
            self.num_layers,
            self.d_model,
            self.d_ff,
            self.num_query_heads,
            self.num_kv_heads,
            self.head_dim,
            self.dtype_bytes,
        )
        if any(d < 1 for d in dims):
            raise TopologyConstraintViolated("model dims must be positive")
        if self.d_model != self.num_query_heads * self.head_dim:
            raise TopologyConstraintViolated(
                "d_model == num_query_heads * head_dim"
            )
        if self.moe is not None:
            self.moe.validate()

    @property
    def ffn_matrices(self) -> int:
        if self.moe is not None and self.moe.gated:
            return 3
        return 2


@dataclass(frozen=True)
class ParallelismConfig:
    tp: int = 1
    pp: int = 1
    dp: int = 1
    ep: int = 1
    # Attention/FFN split ranks; only meaningful for af-mode clusters.
    attn_tp: int = 1
    attn_dp: int = 1
    moe_tp: int = 1
    moe_ep: int = 1

    def validate(self, require_af_split: bool = False) -> None:
        degrees = (
            self.tp, self.pp, self.dp, self.ep,
            self.attn_tp, self.attn_dp, self.moe_tp, self.moe_ep,
        )
        if any(d < 1 for d in degrees):
            raise TopologyConstraintViolated("parallel degrees must be >= 1")
        if require_af_split and self.attn_dp * self.attn_tp != self.moe_tp * self.moe_ep:
            raise TopologyConstraintViolated(
                "attn_dp*attn_tp == moe_tp*moe_ep "
                f"(got {self.attn_dp}*{self.attn_tp} != {self.moe_tp}*{self.moe_ep})"
            )


@dataclass(frozen=True)
class HardwareSpec:
    peak_flops: float          # FLOP/s per GPU
    mem_bw: float              # bytes/s per GPU
    hbm_capacity_bytes: float  # per GPU
    kernel_overhead_us: float = 5.0

    def validate(self) -> None:
        if self.peak_flops <= 0 or self.mem_bw <= 0 or self.hbm_capacity_bytes <= 0:
            raise TopologyConstraintViolated("hardware figures must be positive")
        if self.kernel_overhead_us < 0:
            raise TopologyConstraintViolated("kernel_overhead_us must be >= 0")


@dataclass(frozen=True)
class LinkSpec:
    latency_s: float       # alpha
    bandwidth_bps: float   # beta, bytes/s

    def validate(self) -> None:
        if self.latency_s < 0:
            raise TopologyConstraintViolated("link latency must be >= 0")
        if self.bandwidth_bps <= 0:
            raise TopologyConstraintViolated("link bandwidth must be > 0")


@dataclass(frozen=True)
class NetworkSpec:
    intra_replica: LinkSpec
    inter_cluster: LinkSpec

    def validate(self) -> None:
        self.intra_replica.validate()
        self.inter_cluster.validate()


@dataclass(frozen=True)
class ClusterSpec:
    id: str
    role: str
    num_replicas: int
    gpus_per_replica: int
    hardware: HardwareSpec
    parallelism: ParallelismConfig = field(default_factory=ParallelismConfig)
    # Derived by validate_deployment:
    weight_bytes_per_replica: int = 0
    kv_bytes_per_token: int = 0
    kv_pool_tokens: int = 0

    def validate(self, model: ModelConfig) -> None:
        if self.role not in CLUSTER_ROLES:
            raise RoleSetInvalid(f"unknown cluster role {self.role!r}")
        if self.num_replicas < 1 or self.gpus_per_replica < 1:
            raise TopologyConstraintViolated("replica counts must be >= 1")
        self.hardware.validate()
        require_split = self.role in ("attention", "ffn")
        self.parallelism.validate(require_af_split=require_split)
        expected = self._expected_gpus()
        if self.gpus_per_replica != expected:
            raise TopologyConstraintViolated(
                f"gpus_per_replica == {self._gpu_equation()} "
                f"(got {self.gpus_per_replica}, expected {expected})"
            )
        if model.moe is not None:
            ep = self.parallelism.moe_ep if self.role == "ffn" else self.parallelism.ep
            if model.moe.num_experts % ep != 0:
                raise TopologyConstraintViolated(
                    f"num_experts divisible by ep (got {model.moe.num_experts} % {ep})"
                )

    def _expected_gpus(self) -> int:
        p = self.parallelism
        if self.role == "attention":
            return p.attn_tp * p.attn_dp * p.pp
        if self.role == "ffn":
            return p.moe_tp * p.moe_ep * p.pp
        return p.tp * p.pp * p.ep

    def _gpu_equation(self) -> str:
        if self.role == "attention":
            return "attn_tp*attn_dp*pp"
        if self.role == "ffn":
            return "moe_tp*moe_ep*pp"
        return "tp*pp*ep"

    @property
    def total_gpus(self) -> int:
        return self.num_replicas * self.gpus_per_replica


@dataclass(frozen=True)
class Deployment:
    mode: str
    model: ModelConfig
    clusters: tuple[ClusterSpec, ...]
    network: NetworkSpec
    activation_reserve_fraction: float = 0.1

    @property
    def total_gpus(self) -> int:
        return sum(c.total_gpus for c in self.clusters)

    def clusters_with_role(self, role: str) -> list[ClusterSpec]:
        return [c for c in self.clusters if c.role == role]


# -- derived quantities ------------------------------------------------------

def kv_bytes_per_token(model: ModelConfig) -> int:
    """Key and value tensors retained per token across all layers."""
    return 2 * model.num_layers * model.num_kv_heads * model.head_dim * model.dtype_bytes


def _attention_weight_bytes_per_layer(model: ModelConfig) -> int:
    q = model.d_model * model.num_query_heads * model.head_dim
    kv = 2 * model.d_model * model.num_kv_heads * model.head_dim
    out = model.num_query_heads * model.head_dim * model.d_model
    return (q + kv + out) * model.dtype_bytes


def _ffn_weight_bytes_per_layer(model: ModelConfig) -> int:
    if model.moe is not None:
        router = model.d_model * model.moe.num_experts
        per_expert = model.ffn_matrices * model.d_model * model.moe.expert_d_ff
        return (router + model.moe.num_experts * per_expert) * model.dtype_bytes
    return 2 * model.d_model * model.d_ff * model.dtype_bytes


def weight_bytes_total(model: ModelConfig) -> int:
    """Unsharded transformer-block weights (embeddings excluded)."""
    per_layer = _attention_weight_bytes_per_layer(model) + _ffn_weight_bytes_per_layer(model)
    return model.num_layers * per_layer


def tp_shard_bytes(total_bytes: int, tp: int) -> list[int]:
    """Split a weight footprint across tp ranks; shard sums are exact."""
    base, rem = divmod(total_bytes, tp)
    return [base + (1 if i < rem else 0) for i in range(tp)]


def _weight_bytes_per_replica(cluster: ClusterSpec, model: ModelConfig) -> int:
    """Total weights resident across one replica's GPUs.

    Tensor/expert sharding spreads a single copy inside the replica, so the
    replica-level footprint is one copy; attention-role replicas replicate
    their share once per attn_dp group.
    """
    attn = model.num_layers * _attention_weight_bytes_per_layer(model)
    ffn = model.num_layers * _ffn_weight_bytes_per_layer(model)
    if cluster.role == "attention":
        return attn * cluster.parallelism.attn_dp
    if cluster.role == "ffn":
        return ffn
    return attn + ffn


def _kv_pool_tokens(cluster: ClusterSpec, model: ModelConfig, reserve_fraction: float) -> int:
    """Derive the replica-level KV pool from the HBM budget.

    hbm = weights + activation reserve + KV pool; the pool is whatever
    remains. Attention-role replicas hold the KV cache in af mode; ffn-role
    replicas hold none.
    """
    if cluster.role == "ffn":
        return 0
    hbm_total = cluster.hardware.hbm_capacity_bytes * cluster.gpus_per_replica
    weights = _weight_bytes_per_replica(cluster, model)
    free = hbm_total * (1.0 - reserve_fraction) - weights
    per_token = kv_bytes_per_token(model)
    return max(0, int(free // per_token))


def validate_deployment(
    mode: str,
    model: ModelConfig,
    clusters: list[ClusterSpec],
    network: NetworkSpec,
    activation_reserve_fraction: float = 0.1,
) -> Deployment:
    """Check every topological constraint and fill the derived fields.

    Idempotent: validating an already-validated deployment's parts yields an
    equal Deployment.
    """
    if mode not in MODES:
        raise RoleSetInvalid(f"unknown mode {mode!r}")
    if not clusters:
        raise RoleSetInvalid("deployment needs at least one cluster")
    if not 0.0 <= activation_reserve_fraction < 1.0:
        raise TopologyConstraintViolated("activation_reserve_fraction in [0, 1)")
    model.validate()
    network.validate()
    ids = [c.id for c in clusters]
    if len(set(ids)) != len(ids):
        raise RoleSetInvalid(f"duplicate cluster ids: {ids}")
    roles = {c.role for c in clusters}
    missing = _REQUIRED_ROLES[mode] - roles
    if missing:
        raise RoleSetInvalid(
            f"mode {mode!r} requires cluster roles {sorted(_REQUIRED_ROLES[mode])}; "
            f"missing {sorted(missing)}"
        )
    extra = roles - _REQUIRED_ROLES[mode]
    if extra:
        raise RoleSetInvalid(f"mode {mode!r} does not accept roles {sorted(extra)}")
    normalized = []
    for cluster in clusters:
        cluster.validate(model)
        normalized.append(
            replace(
                cluster,
                weight_bytes_per_replica=_weight_bytes_per_replica(cluster, model),
                kv_bytes_per_token=kv_bytes_per_token(model),
                kv_pool_tokens=_kv_pool_tokens(cluster, model, activation_reserve_fraction),
            )
        )
    return Deployment(
        mode=mode,
        model=model,
        clusters=tuple(normalized),
        network=network,
        activation_reserve_fraction=activation_reserve_fraction,
    )


# -- network cost model ------------------------------------------------------

def transfer_time(num_bytes: float, link: LinkSpec) -> float:
    """Point-to-point transfer duration in seconds: alpha + bytes/beta."""
    if num_bytes < 0:
        raise ValueError("num_bytes must be >= 0")
    return link.latency_s + num_bytes / link.bandwidth_bps


def collective_time(
    kind: str,
    bytes_per_rank: float,
    n_ranks: int,
    link: LinkSpec,
    overrides: dict[tuple[str, int], float] | None = None,
) -> float:
    """Ring-style collective duration in seconds; zero for a single rank.

    `overrides` maps (kind, n_ranks) to a measured duration and takes
    precedence over the analytic formula.
    """
    if n_ranks < 1:
        raise ValueError("n_ranks must be >= 1")
    if bytes_per_rank < 0:
        raise ValueError("bytes_per_rank must be >= 0")
    if n_ranks == 1:
        return 0.0
    if overrides is not None and (kind, n_ranks) in overrides:
        return overrides[(kind, n_ranks)]
    wire = bytes_per_rank * (n_ranks - 1) / n_ranks / link.bandwidth_bps
    if kind == "all_to_all":
        return link.latency_s + wire
    if kind == "all_reduce":
        return 2.0 * link.latency_s + 2.0 * wire
    if kind == "all_gather":
        return link.latency_s + wire
    raise ValueError(f"unknown collective kind {kind!r}")
