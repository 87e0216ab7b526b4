"""Deployment configuration: one strict JSON document drives a whole run.

Unknown keys are rejected everywhere, so typos fail loudly instead of
silently falling back to defaults; every semantic constraint failure names
the violated rule. The parsed config can be re-emitted as a normalized
document whose hash identifies the run.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from frontier_sim.cluster import SchedulerPolicy
from frontier_sim.costmodel.model import LearnedOperatorModel, load_model_file
from frontier_sim.orchestrator import AfPipelineConfig, RoutingPolicySpec
from frontier_sim.topology import (
    ClusterSpec,
    Deployment,
    HardwareSpec,
    LinkSpec,
    ModelConfig,
    MoeConfig,
    NetworkSpec,
    ParallelismConfig,
    TopologyError,
    validate_deployment,
)
from frontier_sim.workload import (
    ArrivalSpec,
    LengthDist,
    Request,
    WorkloadError,
    WorkloadSpec,
    generate,
    load_trace,
)


class ParseError(Exception):
    """Structural problem: bad JSON, missing key, unknown key, wrong type."""


class ValidationError(Exception):
    """Semantic problem: a named constraint does not hold."""


_MISSING = object()


class _Node:
    """A JSON object being consumed key by key; leftovers are errors."""

    def __init__(self, data: Any, path: str) -> None:
        if not isinstance(data, dict):
            raise ParseError(f"{path}: expected an object")
        self.data = dict(data)
        self.path = path

    def take(self, key: str, default: Any = _MISSING) -> Any:
        if key in self.data:
            return self.data.pop(key)
        if default is _MISSING:
            raise ParseError(f"{self.path}.{key}: required key missing")
        return default

    def child(self, key: str, default: Any = _MISSING) -> "_Node | None":
        value = self.take(key, default)
        if value is None:
            return None  # absent or explicit null: caller applies defaults
        return _Node(value, f"{self.path}.{key}")

    def done(self) -> None:
        if self.data:
            raise ParseError(
                f"{self.path}: unknown key(s) {sorted(self.data)}"
            )


def _number(node: _Node, key: str, default: Any = _MISSING) -> float:
    value = node.take(key, default)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ParseError(f"{node.path}.{key}: expected a number, got {value!r}")
    return value


def _integer(node: _Node, key: str, default: Any = _MISSING) -> int:
    value = node.take(key, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ParseError(f"{node.path}.{key}: expected an integer, got {value!r}")
    return value


def _string(node: _Node, key: str, default: Any = _MISSING) -> str:
    value = node.take(key, default)
    if not isinstance(value, str):
        raise ParseError(f"{node.path}.{key}: expected a string, got {value!r}")
    return value


@dataclass(frozen=True)
class CostModelSpec:
    mode: str = "analytic"  # analytic | learned
    attention_model_path: str | None = None
    grouped_gemm_model_path: str | None = None

    def load_models(self) -> tuple[LearnedOperatorModel | None, LearnedOperatorModel | None]:
        attention = (
            load_model_file(self.attention_model_path)
            if self.attention_model_path else None
        )
        grouped = (
            load_model_file(self.grouped_gemm_model_path)
            if self.grouped_gemm_model_path else None
        )
        return attention, grouped


@dataclass
class DeploymentConfig:
    mode: str
    seed: int
    model: ModelConfig
    clusters: list[ClusterSpec]
    network: NetworkSpec
    policy: SchedulerPolicy
    af: AfPipelineConfig | None
    routing: RoutingPolicySpec
    cost_model: CostModelSpec
    workload: WorkloadSpec | None
    trace_path: str | None
    activation_reserve_fraction: float
    output_dir: str

    def deployment(self) -> Deployment:
        try:
            return validate_deployment(
                self.mode, self.model, self.clusters, self.network,
                self.activation_reserve_fraction,
            )
        except TopologyError as exc:
            raise ValidationError(str(exc)) from None

    def requests(self) -> list[Request]:
        try:
            if self.trace_path is not None:
                return load_trace(self.trace_path)
            assert self.workload is not None
            return generate(self.workload)
        except WorkloadError as exc:
            raise ValidationError(str(exc)) from None

    def to_document(self) -> dict:
        doc: dict[str, Any] = {
            "mode": self.mode,
            "seed": self.seed,
            "model": _model_doc(self.model),
            "clusters": [_cluster_doc(c) for c in self.clusters],
            "network": _network_doc(self.network),
            "policies": {
                "admission": self.policy.admission,
                "priority_key": self.policy.priority_key,
                "max_num_seqs": self.policy.max_num_seqs,
                "max_batch_tokens": self.policy.max_batch_tokens,
                "memory_mode": self.policy.memory_mode,
                "block_tokens": self.policy.block_tokens,
            },
            "routing": {
                "policy": self.routing.policy,
                "alpha": self.routing.alpha,
                "trace_counts": list(self.routing.trace_counts)
                if self.routing.trace_counts else None,
            },
            "cost_model": {
                "mode": self.cost_model.mode,
                "attention_model": self.cost_model.attention_model_path,
                "grouped_gemm_model": self.cost_model.grouped_gemm_model_path,
            },
            "activation_reserve_fraction": self.activation_reserve_fraction,
            "output": {"dir": self.output_dir},
        }
        if self.af is not None:
            doc["af"] = {"micro_batches": self.af.micro_batches}
        if self.trace_path is not None:
            doc["workload"] = {"trace_path": self.trace_path}
        else:
            w = self.workload
            doc["workload"] = {
                "num_requests": w.num_requests,
                "seed": w.seed,
                "arrival": _arrival_doc(w.arrival),
                "prompt_tokens": _length_doc(w.prompt_len),
                "output_tokens": _length_doc(w.output_len),
            }
        return doc

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _model_doc(m: ModelConfig) -> dict:
    doc = {
        "num_layers": m.num_layers, "d_model": m.d_model, "d_ff": m.d_ff,
        "num_query_heads": m.num_query_heads, "num_kv_heads": m.num_kv_heads,
        "head_dim": m.head_dim, "dtype_bytes": m.dtype_bytes,
    }
    if m.moe is not None:
        doc["moe"] = {
            "num_experts": m.moe.num_experts, "top_k": m.moe.top_k,
            "expert_d_ff": m.moe.expert_d_ff, "gated": m.moe.gated,
        }
    return doc


def _cluster_doc(c: ClusterSpec) -> dict:
    p = c.parallelism
    return {
        "id": c.id, "role": c.role, "num_replicas": c.num_replicas,
        "gpus_per_replica": c.gpus_per_replica,
        "hardware": {
            "peak_flops": c.hardware.peak_flops,
            "mem_bw": c.hardware.mem_bw,
            "hbm_capacity_bytes": c.hardware.hbm_capacity_bytes,
            "kernel_overhead_us": c.hardware.kernel_overhead_us,
        },
        "parallelism": {
            "tp": p.tp, "pp": p.pp, "dp": p.dp, "ep": p.ep,
            "attn_tp": p.attn_tp, "attn_dp": p.attn_dp,
            "moe_tp": p.moe_tp, "moe_ep": p.moe_ep,
        },
    }


def _network_doc(n: NetworkSpec) -> dict:
    return {
        "intra_replica": {"latency_s": n.intra_replica.latency_s,
                          "bandwidth_bps": n.intra_replica.bandwidth_bps},
        "inter_cluster": {"latency_s": n.inter_cluster.latency_s,
                          "bandwidth_bps": n.inter_cluster.bandwidth_bps},
    }


def _arrival_doc(a: ArrivalSpec) -> dict:
    if a.kind == "poisson":
        return {"kind": "poisson", "rate_rps": a.rate_rps}
    if a.kind == "fixed_interval":
        return {"kind": "fixed_interval", "gap_ns": a.gap_ns}
    return {"kind": "batch_at_zero"}


def _length_doc(d: LengthDist) -> dict:
    if d.kind == "fixed":
        return {"kind": "fixed", "value": d.value}
    if d.kind == "uniform":
        return {"kind": "uniform", "lo": d.lo, "hi": d.hi}
    return {"kind": "lognormal", "mu": d.mu, "sigma": d.sigma, "lo": d.lo, "hi": d.hi}


# -- parsing ---------------------------------------------------------------------

def _parse_arrival(node: _Node) -> ArrivalSpec:
    kind = _string(node, "kind")
    if kind == "poisson":
        spec = ArrivalSpec("poisson", rate_rps=_number(node, "rate_rps"))
    elif kind == "fixed_interval":
        spec = ArrivalSpec("fixed_interval", gap_ns=_integer(node, "gap_ns"))
    elif kind == "batch_at_zero":
        spec = ArrivalSpec("batch_at_zero")
    else:
        raise ParseError(f"{node.path}.kind: unknown arrival kind {kind!r}")
    node.done()
    return spec


def _parse_length(node: _Node) -> LengthDist:
    kind = _string(node, "kind")
    if kind == "fixed":
        dist = LengthDist("fixed", value=_integer(node, "value"))
    elif kind == "uniform":
        dist = LengthDist("uniform", lo=_integer(node, "lo"), hi=_integer(node, "hi"))
    elif kind == "lognormal":
        dist = LengthDist(
            "lognormal", mu=_number(node, "mu"), sigma=_number(node, "sigma"),
            lo=_integer(node, "lo", 1), hi=_integer(node, "hi"),
        )
    else:
        raise ParseError(f"{node.path}.kind: unknown length distribution {kind!r}")
    node.done()
    return dist


def _parse_model(node: _Node) -> ModelConfig:
    moe = None
    moe_node = node.child("moe", None)
    if moe_node is not None:
        moe = MoeConfig(
            num_experts=_integer(moe_node, "num_experts"),
            top_k=_integer(moe_node, "top_k"),
            expert_d_ff=_integer(moe_node, "expert_d_ff"),
            gated=bool(moe_node.take("gated", False)),
        )
        moe_node.done()
    model = ModelConfig(
        num_layers=_integer(node, "num_layers"),
        d_model=_integer(node, "d_model"),
        d_ff=_integer(node, "d_ff"),
        num_query_heads=_integer(node, "num_query_heads"),
        num_kv_heads=_integer(node, "num_kv_heads"),
        head_dim=_integer(node, "head_dim"),
        dtype_bytes=_integer(node, "dtype_bytes", 2),
        moe=moe,
    )
    node.done()
    return model


def _parse_cluster(node: _Node) -> ClusterSpec:
    hw_node = node.child("hardware")
    hardware = HardwareSpec(
        peak_flops=_number(hw_node, "peak_flops"),
        mem_bw=_number(hw_node, "mem_bw"),
        hbm_capacity_bytes=_number(hw_node, "hbm_capacity_bytes"),
        kernel_overhead_us=_number(hw_node, "kernel_overhead_us", 5.0),
    )
    hw_node.done()
    par_node = node.child("parallelism", None)
    if par_node is not None:
        parallelism = ParallelismConfig(
            tp=_integer(par_node, "tp", 1), pp=_integer(par_node, "pp", 1),
            dp=_integer(par_node, "dp", 1), ep=_integer(par_node, "ep", 1),
            attn_tp=_integer(par_node, "attn_tp", 1),
            attn_dp=_integer(par_node, "attn_dp", 1),
            moe_tp=_integer(par_node, "moe_tp", 1),
            moe_ep=_integer(par_node, "moe_ep", 1),
        )
        par_node.done()
    else:
        parallelism = ParallelismConfig()
    cluster = ClusterSpec(
        id=_string(node, "id"),
        role=_string(node, "role"),
        num_replicas=_integer(node, "num_replicas", 1),
        gpus_per_replica=_integer(node, "gpus_per_replica"),
        hardware=hardware,
        parallelism=parallelism,
    )
    node.done()
    return cluster


def _parse_link(node: _Node) -> LinkSpec:
    link = LinkSpec(
        latency_s=_number(node, "latency_s"),
        bandwidth_bps=_number(node, "bandwidth_bps"),
    )
    node.done()
    return link


def parse_config(document: Any, base_dir: str = ".") -> DeploymentConfig:
    root = _Node(document, "config")
    mode = _string(root, "mode")
    if mode not in ("colocated", "pd", "af"):
        raise ValidationError(f"mode must be colocated|pd|af, got {mode!r}")
    seed = _integer(root, "seed", 0)

    model = _parse_model(root.child("model"))

    clusters_value = root.take("clusters")
    if not isinstance(clusters_value, list) or not clusters_value:
        raise ParseError("config.clusters: expected a non-empty array")
    clusters = [
        _parse_cluster(_Node(c, f"config.clusters[{i}]"))
        for i, c in enumerate(clusters_value)
    ]

    net_node = root.child("network")
    network = NetworkSpec(
        intra_replica=_parse_link(net_node.child("intra_replica")),
        inter_cluster=_parse_link(net_node.child("inter_cluster")),
    )
    net_node.done()

    pol_node = root.child("policies", None)
    if pol_node is not None:
        policy = SchedulerPolicy(
            admission=_string(pol_node, "admission", "fcfs"),
            priority_key=_string(pol_node, "priority_key", "prompt_tokens"),
            max_num_seqs=_integer(pol_node, "max_num_seqs", 256),
            max_batch_tokens=_integer(pol_node, "max_batch_tokens", 8192),
            memory_mode=_string(pol_node, "memory_mode", "exact"),
            block_tokens=_integer(pol_node, "block_tokens", 16),
        )
        pol_node.done()
    else:
        policy = SchedulerPolicy()
    try:
        policy.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from None

    af = None
    af_node = root.child("af", None)
    if af_node is not None:
        af = AfPipelineConfig(micro_batches=_integer(af_node, "micro_batches", 2))
        af_node.done()
        try:
            af.validate()
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    if mode == "af" and af is None:
        af = AfPipelineConfig()

    routing = RoutingPolicySpec()
    routing_node = root.child("routing", None)
    if routing_node is not None:
        counts = routing_node.take("trace_counts", None)
        if counts is not None and (
            not isinstance(counts, list) or not all(isinstance(x, int) for x in counts)
        ):
            raise ParseError("config.routing.trace_counts: expected an integer array")
        routing = RoutingPolicySpec(
            policy=_string(routing_node, "policy", "uniform"),
            alpha=_number(routing_node, "alpha", 0.3),
            trace_counts=tuple(counts) if counts else None,
        )
        routing_node.done()
        if routing.policy not in ("uniform", "dirichlet_skew", "trace"):
            raise ValidationError(f"unknown routing policy {routing.policy!r}")

    cost_node = root.child("cost_model", None)
    if cost_node is not None:
        cost_model = CostModelSpec(
            mode=_string(cost_node, "mode", "analytic"),
            attention_model_path=_resolve(cost_node.take("attention_model", None), base_dir),
            grouped_gemm_model_path=_resolve(cost_node.take("grouped_gemm_model", None), base_dir),
        )
        cost_node.done()
        if cost_model.mode not in ("analytic", "learned"):
            raise ValidationError(f"cost_model.mode must be analytic|learned")
        if cost_model.mode == "learned" and not (
            cost_model.attention_model_path or cost_model.grouped_gemm_model_path
        ):
            raise ValidationError("learned cost_model needs at least one model file")
        for path in (cost_model.attention_model_path, cost_model.grouped_gemm_model_path):
            if path is not None and not os.path.exists(path):
                raise ValidationError(f"cost model file does not exist: {path}")
    else:
        cost_model = CostModelSpec()

    wl_node = root.child("workload")
    workload = None
    trace_path = None
    if "trace_path" in wl_node.data:
        trace_path = _resolve(_string(wl_node, "trace_path"), base_dir)
        wl_node.done()
        if not os.path.exists(trace_path):
            raise ValidationError(f"workload trace does not exist: {trace_path}")
    else:
        workload = WorkloadSpec(
            arrival=_parse_arrival(wl_node.child("arrival")),
            prompt_len=_parse_length(wl_node.child("prompt_tokens")),
            output_len=_parse_length(wl_node.child("output_tokens")),
            num_requests=_integer(wl_node, "num_requests"),
            seed=_integer(wl_node, "seed", seed),
        )
        wl_node.done()
        try:
            workload.validate()
        except WorkloadError as exc:
            raise ValidationError(str(exc)) from None

    reserve = _number(root, "activation_reserve_fraction", 0.1)

    output_dir = "out"
    out_node = root.child("output", None)
    if out_node is not None:
        output_dir = _string(out_node, "dir", "out")
        out_node.done()

    root.done()
    config = DeploymentConfig(
        mode=mode, seed=seed, model=model, clusters=clusters, network=network,
        policy=policy, af=af, routing=routing, cost_model=cost_model,
        workload=workload, trace_path=trace_path,
        activation_reserve_fraction=reserve, output_dir=output_dir,
    )
    config.deployment()  # surface topology violations at load time
    return config


def _resolve(path: str | None, base_dir: str) -> str | None:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_config(path: str) -> DeploymentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_config(document, base_dir=os.path.dirname(os.path.abspath(path)))


def save_config(config: DeploymentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_document(), fh, sort_keys=True, indent=2)
        fh.write("\n")
