"""Latency model and virtual-time message accounting.

Every request/response exchange costs one round trip on its link plus a
linear serialization delay for the bytes moved. Links that reach the cloud
(or the key server next to it) use the cloud round trip, which is the edge
round trip times the edge:cloud latency ratio.
"""

import logging
import random
import time
from collections import Counter
from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.pow import gen_response
from edge_dedup.simnet.clock import SimClock
from edge_dedup.types import VirtualTime

logger = logging.getLogger(__name__)

LATENCY_RATIOS: dict[str, float] = {
    "min": 6.89,
    "median": 45.98,
    "average": 50.96,
    "max": 119.72,
}
"""Edge:cloud round-trip ratios (average-latency column) used as sweep presets."""


class Link(StrEnum):
    CLIENT_EDGE = "client_edge"
    CLIENT_CLOUD = "client_cloud"
    EDGE_CLOUD = "edge_cloud"
    CLIENT_KEYSERVER = "client_keyserver"


class Phase(StrEnum):
    """Latency buckets of an upload.

    Attributes:
        KEYGEN: Key derivation with the key server
        POW: Ownership proofs
        CHECK: Duplicate checks
        TRANSFER: Unique chunk and recipe upload
        BACKGROUND: Epoch rebuilds and pool pre-computation (not on the
            upload path)
    """

    KEYGEN = "keygen"
    POW = "pow"
    CHECK = "check"
    TRANSFER = "transfer"
    BACKGROUND = "background"


class LatencyModel(BaseModel):
    """Round trips, serialization speed and compute costs in virtual time.

    Attributes:
        edge_rtt_ns: Client/edge round trip
        cloud_ratio: Cloud round trip as a multiple of the edge round trip
        serialization_ns_per_kib: Transfer delay per KiB moved
        ecall_ns: Cost of one enclave call
        local_lookup_ns: Cost of one local-index lookup
        challenge_gen_ns: Cloud cost of generating one challenge in real time
        jitter: Relative spread of a seeded uniform jitter on round trips
    """

    model_config = ConfigDict(frozen=True)

    edge_rtt_ns: int = Field(default=2_000_000, gt=0, description="Edge round trip (ns)")
    cloud_ratio: float = Field(default=6.89, ge=1.0, description="Cloud:edge RTT ratio")
    serialization_ns_per_kib: int = Field(
        default=80_000, ge=0, description="Serialization delay per KiB (ns)"
    )
    ecall_ns: int = Field(default=5_000, ge=0, description="Enclave call cost (ns)")
    local_lookup_ns: int = Field(default=200, ge=0, description="Local index lookup cost (ns)")
    challenge_gen_ns: int = Field(
        default=64_000, ge=0, description="Real-time challenge generation cost (ns)"
    )
    jitter: float = Field(default=0.0, ge=0.0, lt=1.0, description="Relative RTT jitter")

    @property
    def cloud_rtt_ns(self) -> int:
        return round(self.edge_rtt_ns * self.cloud_ratio)

    def rtt(self, link: Link) -> int:
        return self.edge_rtt_ns if link is Link.CLIENT_EDGE else self.cloud_rtt_ns

    def serialization(self, nbytes: int) -> int:
        return (nbytes * self.serialization_ns_per_kib) // 1024


class CostMeter:
    """Accumulates virtual time and traffic per phase for one upload."""

    def __init__(self) -> None:
        self.phases: Counter[Phase] = Counter()
        self.bytes_moved: Counter[Link] = Counter()
        self.messages: Counter[Link] = Counter()
        self.ecalls = 0

    def charge(self, phase: Phase, nanos: int) -> None:
        self.phases[phase] += nanos

    def __getitem__(self, phase: Phase) -> int:
        return self.phases[phase]

    def total(self, *, include_background: bool = False) -> int:
        return sum(
            nanos
            for phase, nanos in self.phases.items()
            if include_background or phase is not Phase.BACKGROUND
        )

    def merge(self, other: "CostMeter") -> None:
        self.phases.update(other.phases)
        self.bytes_moved.update(other.bytes_moved)
        self.messages.update(other.messages)
        self.ecalls += other.ecalls


class Network:
    """Charges exchanges and compute against a shared virtual clock.

    Example:
        >>> net = Network(LatencyModel(edge_rtt_ns=1_000_000, cloud_ratio=10))
        >>> meter = CostMeter()
        >>> net.exchange(Link.EDGE_CLOUD, 0, 0, phase=Phase.CHECK, meter=meter)
        10000000
    """

    def __init__(
        self, model: LatencyModel | None = None, clock: SimClock | None = None, *, seed: int = 0
    ) -> None:
        self.model = model or LatencyModel()
        self.clock = clock or SimClock()
        self._rng = random.Random(seed)

    def _jittered(self, nanos: int) -> int:
        if not self.model.jitter:
            return nanos
        spread = self.model.jitter
        return round(nanos * self._rng.uniform(1.0 - spread, 1.0 + spread))

    def exchange(
        self,
        link: Link,
        request_bytes: int,
        response_bytes: int,
        *,
        phase: Phase,
        meter: CostMeter,
    ) -> VirtualTime:
        """Charge one request/response exchange and return its cost."""
        moved = request_bytes + response_bytes
        cost = self._jittered(self.model.rtt(link)) + self.model.serialization(moved)
        self.clock.advance(cost)
        meter.charge(phase, cost)
        meter.bytes_moved[link] += moved
        meter.messages[link] += 1
        return VirtualTime(cost)

    def compute(self, nanos: int, *, phase: Phase, meter: CostMeter) -> VirtualTime:
        """Charge local processing time."""
        self.clock.advance(nanos)
        meter.charge(phase, nanos)
        return VirtualTime(nanos)

    def ecall(self, count: int, *, phase: Phase, meter: CostMeter) -> VirtualTime:
        """Charge ``count`` enclave calls."""
        meter.ecalls += count
        return self.compute(count * self.model.ecall_ns, phase=phase, meter=meter)


def measure_challenge_cost(*, bits: int = 64, data_size: int = 16384, repeats: int = 32) -> int:
    """Measure the wall-clock cost of generating one response, in nanoseconds.

    The result can seed :attr:`LatencyModel.challenge_gen_ns`; simulations
    never call this on their own so that runs stay reproducible.
    """
    data = random.Random(0).randbytes(data_size)
    seed = bytes(32)
    started = time.perf_counter_ns()
    for _ in range(repeats):
        gen_response(seed, data, bits)
    cost = (time.perf_counter_ns() - started) // repeats
    logger.info(f"Measured challenge generation cost: {cost} ns for {bits} bits")
    return cost
