"""Request workloads: arrival processes and prompt/output length distributions.

Generation is a pure function of the spec. Randomness comes from
counter-based Philox streams, one per quantity (arrival gaps, prompt
lengths, output lengths), each derived from the master seed, so adding or
reconfiguring one distribution never perturbs the others.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from frontier_sim.core import SimTime

__all__ = [
    "RequestState",
    "Request",
    "ArrivalSpec",
    "LengthDist",
    "WorkloadSpec",
    "WorkloadError",
    "InvalidDistributionParams",
    "ParseError",
    "NonPositiveLength",
    "generate",
    "load_trace",
    "save_trace",
]

TRACE_HEADER = ["request_id", "arrival_ns", "prompt_tokens", "output_tokens"]

_STREAMS = {"arrival": 0, "prompt": 1, "output": 2}


class WorkloadError(Exception):
    pass


class InvalidDistributionParams(WorkloadError):
    pass


class ParseError(WorkloadError):
    """Trace CSV is malformed; message carries the line number."""


class NonPositiveLength(WorkloadError):
    pass


class RequestState(str, Enum):
    QUEUED = "QUEUED"
    PREFILL_RUNNING = "PREFILL_RUNNING"
    PREFILL_COMPLETE = "PREFILL_COMPLETE"
    KV_TRANSFERRING = "KV_TRANSFERRING"
    DECODE_QUEUED = "DECODE_QUEUED"
    DECODING = "DECODING"
    COMPLETE = "COMPLETE"


# Legal forward edges of the lifecycle. Co-located serving skips the
# transfer states via the PREFILL_COMPLETE -> DECODE_QUEUED edge.
_TRANSITIONS: dict[RequestState, set[RequestState]] = {
    RequestState.QUEUED: {RequestState.PREFILL_RUNNING},
    RequestState.PREFILL_RUNNING: {RequestState.PREFILL_COMPLETE},
    RequestState.PREFILL_COMPLETE: {
        RequestState.KV_TRANSFERRING,
        RequestState.DECODE_QUEUED,
        RequestState.COMPLETE,  # single-token requests finish at prefill
    },
    RequestState.KV_TRANSFERRING: {RequestState.DECODE_QUEUED},
    RequestState.DECODE_QUEUED: {RequestState.DECODING},
    RequestState.DECODING: {RequestState.COMPLETE},
    RequestState.COMPLETE: set(),
}


@dataclass
class Request:
    id: str
    arrival_time: SimTime
    prompt_tokens: int
    output_tokens: int
    state: RequestState = RequestState.QUEUED
    tokens_emitted: int = 0
    state_times: dict[str, SimTime] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise NonPositiveLength(
                f"request {self.id}: prompt and output tokens must be >= 1"
            )

    def transition(self, new_state: RequestState, at: SimTime) -> None:
        if new_state not in _TRANSITIONS[self.state]:
            raise WorkloadError(
                f"request {self.id}: illegal transition {self.state.value} -> {new_state.value}"
            )
        self.state = new_state
        self.state_times[new_state.value] = at

    def emit_tokens(self, count: int = 1) -> None:
        if self.tokens_emitted + count > self.output_tokens:
            raise WorkloadError(f"request {self.id}: emitted past output_tokens")
        self.tokens_emitted += count

    @property
    def finished(self) -> bool:
        return self.tokens_emitted == self.output_tokens

    @property
    def kv_footprint_tokens(self) -> int:
        """KV tokens the request occupies once fully decoded."""
        return self.prompt_tokens + self.output_tokens


@dataclass(frozen=True)
class ArrivalSpec:
    kind: str  # poisson | fixed_interval | batch_at_zero
    rate_rps: float = 0.0
    gap_ns: int = 0

    def validate(self) -> None:
        if self.kind == "poisson":
            if self.rate_rps <= 0:
                raise InvalidDistributionParams("poisson arrivals need rate_rps > 0")
        elif self.kind == "fixed_interval":
            if self.gap_ns < 0:
                raise InvalidDistributionParams("fixed_interval needs gap_ns >= 0")
        elif self.kind != "batch_at_zero":
            raise InvalidDistributionParams(f"unknown arrival kind {self.kind!r}")


@dataclass(frozen=True)
class LengthDist:
    kind: str  # fixed | uniform | lognormal
    value: int = 0
    lo: int = 1
    hi: int = 1
    mu: float = 0.0
    sigma: float = 1.0

    def validate(self) -> None:
        if self.kind == "fixed":
            if self.value < 1:
                raise InvalidDistributionParams("fixed length must be >= 1")
        elif self.kind == "uniform":
            if not 1 <= self.lo <= self.hi:
                raise InvalidDistributionParams("uniform needs 1 <= lo <= hi")
        elif self.kind == "lognormal":
            if self.sigma <= 0:
                raise InvalidDistributionParams("lognormal needs sigma > 0")
            if not 1 <= self.lo <= self.hi:
                raise InvalidDistributionParams("lognormal clamp needs 1 <= lo <= hi")
        else:
            raise InvalidDistributionParams(f"unknown length distribution {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, self.value, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.lo, self.hi + 1, size=n, dtype=np.int64)
        # lognormal, clamped then rounded: kernel features need integer tokens
        raw = rng.lognormal(mean=self.mu, sigma=self.sigma, size=n)
        return np.clip(np.rint(raw), self.lo, self.hi).astype(np.int64)


@dataclass(frozen=True)
class WorkloadSpec:
    arrival: ArrivalSpec
    prompt_len: LengthDist
    output_len: LengthDist
    num_requests: int
    seed: int = 0

    def validate(self) -> None:
        if self.num_requests < 1:
            raise InvalidDistributionParams("num_requests must be >= 1")
        self.arrival.validate()
        self.prompt_len.validate()
        self.output_len.validate()


def _stream(seed: int, name: str) -> np.random.Generator:
    bitgen = np.random.Philox(key=np.random.SeedSequence([seed, _STREAMS[name]]).generate_state(2, np.uint64))
    return np.random.Generator(bitgen)


def _arrival_times(spec: WorkloadSpec) -> np.ndarray:
    n = spec.num_requests
    arrival = spec.arrival
    if arrival.kind == "batch_at_zero":
        return np.zeros(n, dtype=np.int64)
    if arrival.kind == "fixed_interval":
        return np.arange(n, dtype=np.int64) * arrival.gap_ns
    gaps_s = _stream(spec.seed, "arrival").exponential(1.0 / arrival.rate_rps, size=n)
    return np.rint(np.cumsum(gaps_s) * 1e9).astype(np.int64)


def generate(spec: WorkloadSpec) -> list[Request]:
    """Produce requests sorted by arrival time, deterministically for a seed."""
    spec.validate()
    arrivals = _arrival_times(spec)
    prompts = spec.prompt_len.sample(_stream(spec.seed, "prompt"), spec.num_requests)
    outputs = spec.output_len.sample(_stream(spec.seed, "output"), spec.num_requests)
    requests = [
        Request(
            id=f"r{i}",
            arrival_time=int(arrivals[i]),
            prompt_tokens=int(prompts[i]),
            output_tokens=int(outputs[i]),
        )
        for i in range(spec.num_requests)
    ]
    requests.sort(key=lambda r: r.arrival_time)  # stable: generation order breaks ties
    return requests


def load_trace(path: str) -> list[Request]:
    """Read a request trace CSV; rows are stably sorted by arrival time."""
    requests: list[Request] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}:1: empty trace file") from None
        if [h.strip() for h in header] != TRACE_HEADER:
            raise ParseError(
                f"{path}:1: expected header {','.join(TRACE_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            rid = row[0].strip()
            try:
                arrival = int(row[1])
                prompt = int(row[2])
                output = int(row[3])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if arrival < 0:
                raise ParseError(f"{path}:{lineno}: arrival_ns must be >= 0")
            if prompt < 1 or output < 1:
                raise NonPositiveLength(
                    f"{path}:{lineno}: prompt_tokens and output_tokens must be >= 1"
                )
            requests.append(Request(id=rid, arrival_time=arrival,
                                    prompt_tokens=prompt, output_tokens=output))
    requests.sort(key=lambda r: r.arrival_time)  # stable: preserves file order on ties
    return requests


def save_trace(requests: list[Request], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for req in requests:
            writer.writerow([req.id, req.arrival_time, req.prompt_tokens, req.output_tokens])
