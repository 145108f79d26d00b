"""Dual-level pre-computed proof of ownership.

The cloud keeps two maps of challenge pools: ``F`` keyed by file hash and
``C`` keyed by ciphertext-chunk fingerprint. Each pool entry holds
pre-computed (seed, response) pairs plus two counters: ``idc`` counts pairs
ever generated and ``idu`` points at the next unused pair. Pools are split
into disjoint ranges for the edge servers and the cloud marks every shared
index invalid for its own use.

A file-level pair also stores one response per chunk of the file under the
same seed, so a file-level mismatch can be narrowed down chunk by chunk
without spending chunk pools.
"""

import bisect
import hashlib
import hmac
import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import NamedTuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from edge_dedup.encoding import le64
from edge_dedup.types import (
    BitString,
    ClientId,
    EmptyDataError,
    ExhaustedError,
    Fingerprint,
    InvalidatedPairError,
    UnknownIdError,
)

logger = logging.getLogger(__name__)


class PowLevel(StrEnum):
    FILE = "file"
    CHUNK = "chunk"


class PowVerdict(StrEnum):
    """Outcome of one ownership check.

    Attributes:
        VERIFIED: The response matched
        FALLBACK_TO_CHUNKS: File-level proof unavailable or mismatched
        FAILED: The response did not match
        NO_PAIRS_AVAILABLE: No unused pair exists for the item
    """

    VERIFIED = "verified"
    FALLBACK_TO_CHUNKS = "fallback_to_chunks"
    FAILED = "failed"
    NO_PAIRS_AVAILABLE = "no_pairs_available"


class PowPolicy(BaseModel):
    """Response sizing, pool depth and suspicion threshold.

    Attributes:
        bytes_per_bit: Data bytes per response bit
        min_bits: Floor of the response length
        max_bits: Cap of the response length
        pool_depth: Pairs generated per entry per generation round
        suspicion_threshold: Failures per client per epoch before suspension
    """

    model_config = ConfigDict(frozen=True)

    bytes_per_bit: int = Field(default=1024, ge=1, description="Data bytes per response bit")
    min_bits: int = Field(default=64, ge=1, description="Minimum response bits")
    max_bits: int = Field(default=512, ge=1, description="Maximum response bits")
    pool_depth: int = Field(default=8, ge=1, description="Pairs per generation round")
    suspicion_threshold: int = Field(default=3, ge=1, description="Failures before suspension")

    @model_validator(mode="after")
    def validate_bits(self) -> "PowPolicy":
        """Ensure the floor does not exceed the cap."""
        if self.min_bits > self.max_bits:
            raise ValueError("min_bits must not exceed max_bits")
        return self

    def response_bits(self, size: int) -> int:
        """K = clamp(ceil(size / bytes_per_bit), min_bits, max_bits)."""
        return max(self.min_bits, min(self.max_bits, math.ceil(size / self.bytes_per_bit)))


def gen_seed(csmk: bytes, item: Fingerprint, idc: int) -> bytes:
    """Seed of pair ``idc`` of ``item``: HMAC-SHA256(csmk, item || LE64(idc))."""
    return hmac.new(csmk, bytes(item) + le64(idc), hashlib.sha256).digest()


def gen_response(seed: bytes, data: bytes, bits: int) -> BitString:
    """Sample ``bits`` pseudo-random bit positions of ``data``.

    Position ``j`` (1-based) is LE64(HMAC-SHA256(seed, LE64(j))[:8]) mod
    8·len(data); bit ``p`` is bit ``p mod 8`` (LSB first) of byte ``p // 8``.
    The first sampled bit is the most significant bit of the result.

    Raises:
        EmptyDataError: If ``data`` is empty
    """
    if not data:
        raise EmptyDataError("Cannot sample an empty buffer")
    if bits < 1:
        raise ValueError("Response must have at least one bit")
    n_bits = 8 * len(data)
    value = 0
    for j in range(1, bits + 1):
        digest = hmac.new(seed, le64(j), hashlib.sha256).digest()
        pos = int.from_bytes(digest[:8], "little") % n_bits
        value = (value << 1) | ((data[pos >> 3] >> (pos & 7)) & 1)
    return BitString(value, bits)


@dataclass(frozen=True, slots=True)
class PowPair:
    """One pre-computed pair; ``index`` is its position in the cloud's pool."""

    index: int
    seed: bytes = field(repr=False)
    response: BitString = field(repr=False)
    chunk_responses: tuple[BitString, ...] = field(default=(), repr=False)


@dataclass(frozen=True, slots=True)
class Challenge:
    """A challenge sent to a client; responses never leave the verifier.

    Attributes:
        level: File or chunk level
        key: File hash or chunk fingerprint being proven
        seed: Seed of the sampled positions
        bits: Response length K
        index: Pool index of the pair this challenge consumed
        parent: For a chunk challenge reusing a file-level seed, the file hash
        slot: Position of the chunk within the parent file
    """

    level: PowLevel
    key: Fingerprint
    seed: bytes
    bits: int
    index: int
    parent: Fingerprint | None = None
    slot: int = 0


@dataclass
class PowEntry:
    """A challenge pool for one file or chunk.

    Attributes:
        key: File hash or chunk fingerprint
        level: Pool level
        ptr: Storage reference of the sampled bytes (opaque here)
        pairs: Pairs in increasing index order
        idc: Pairs generated so far
        idu: Position in ``pairs`` of the next unused pair
        invalid: Indices shared with edge servers
        bits: Response length of file/chunk responses
        chunk_keys: Chunk fingerprints of a file entry, in file order
        chunk_bits: Response length per chunk of a file entry
    """

    key: Fingerprint
    level: PowLevel
    ptr: object | None = None
    pairs: list[PowPair] = field(default_factory=list)
    idc: int = 0
    idu: int = 0
    invalid: set[int] = field(default_factory=set)
    bits: int = 0
    chunk_keys: tuple[Fingerprint, ...] = ()
    chunk_bits: tuple[int, ...] = ()

    @property
    def available(self) -> int:
        return len(self.pairs) - self.idu

    @property
    def exhausted(self) -> bool:
        return self.idu >= len(self.pairs)

    def pair(self, index: int) -> PowPair:
        pos = bisect.bisect_left(self.pairs, index, key=lambda p: p.index)
        if pos == len(self.pairs) or self.pairs[pos].index != index:
            raise UnknownIdError(f"No pair {index} for {self.key.short()}")
        return self.pairs[pos]

    def extend(self, pairs: Iterable[PowPair]) -> None:
        for pair in pairs:
            if self.pairs and pair.index <= self.pairs[-1].index:
                raise ValueError(f"Pair {pair.index} is out of order for {self.key.short()}")
            self.pairs.append(pair)
            self.idc = max(self.idc, pair.index + 1)

    def footprint(self) -> int:
        """Bytes the pool occupies: seed plus packed responses per unused pair."""
        per_pair = 32 + (self.bits + 7) // 8 + sum((b + 7) // 8 for b in self.chunk_bits)
        return 64 + self.available * per_pair


class PoolKey(NamedTuple):
    """Identifies one pool: its level and its file hash or chunk fingerprint."""

    level: PowLevel
    key: Fingerprint


class IssueRecord(NamedTuple):
    holder: str
    level: PowLevel
    key: Fingerprint
    index: int


class IssueLog:
    """Global audit of every issued pair; a pair may be issued once system-wide."""

    def __init__(self) -> None:
        self._seen: set[tuple[PowLevel, Fingerprint, int]] = set()
        self.records: list[IssueRecord] = []
        self.duplicates: list[IssueRecord] = []

    def record(self, holder: str, level: PowLevel, key: Fingerprint, index: int) -> None:
        rec = IssueRecord(holder, level, key, index)
        ident = (level, key, index)
        if ident in self._seen:
            logger.error(f"Pair {index} of {key.short()} issued twice (by {holder})")
            self.duplicates.append(rec)
        self._seen.add(ident)
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)


class PowMaps:
    """The ``F`` (file) and ``C`` (chunk) pool maps."""

    def __init__(self, holder: str, log: IssueLog | None = None) -> None:
        self.holder = holder
        self.log = log
        self.F: dict[Fingerprint, PowEntry] = {}
        self.C: dict[Fingerprint, PowEntry] = {}

    def table(self, level: PowLevel) -> dict[Fingerprint, PowEntry]:
        return self.F if level is PowLevel.FILE else self.C

    def get(self, level: PowLevel, key: Fingerprint) -> PowEntry | None:
        return self.table(level).get(key)

    def ensure(
        self,
        level: PowLevel,
        key: Fingerprint,
        *,
        ptr: object | None = None,
        chunk_keys: Sequence[Fingerprint] = (),
    ) -> PowEntry:
        """Return the entry for ``key``, creating an empty one if needed."""
        table = self.table(level)
        entry = table.get(key)
        if entry is None:
            entry = PowEntry(key=key, level=level, ptr=ptr, chunk_keys=tuple(chunk_keys))
            table[key] = entry
        elif ptr is not None:
            entry.ptr = ptr
        return entry

    def drop(self, level: PowLevel, key: Fingerprint) -> PowEntry | None:
        return self.table(level).pop(key, None)

    def entries(self) -> Iterator[PowEntry]:
        yield from self.F.values()
        yield from self.C.values()

    def footprint(self) -> int:
        return sum(entry.footprint() for entry in self.entries())

    def clone(self) -> "PowMaps":
        """Copy both maps; pairs are immutable and shared with the original."""
        copy = PowMaps(self.holder, self.log)
        for entry in self.entries():
            copy.table(entry.level)[entry.key] = replace(
                entry, pairs=list(entry.pairs), invalid=set(entry.invalid)
            )
        return copy


def gen_challenges(
    maps: PowMaps,
    item: Fingerprint,
    level: PowLevel,
    n: int,
    csmk: bytes,
    *,
    data: bytes,
    chunk_data: Sequence[bytes] = (),
    policy: PowPolicy | None = None,
) -> PowEntry:
    """Append ``n`` fresh pairs to the pool of ``item``.

    For a file entry every pair also carries the response of each chunk in
    ``chunk_data`` under the same seed.

    Args:
        maps: Pool maps holding the entry
        item: File hash or chunk fingerprint
        level: Pool level
        n: Number of pairs to generate
        csmk: Challenge-seed master key
        data: Bytes behind the entry's pointer
        chunk_data: Chunk bytes of a file entry, in file order
        policy: Response sizing policy

    Returns:
        The updated entry

    Raises:
        UnknownIdError: If the entry does not exist or has no pointer
    """
    entry = maps.get(level, item)
    if entry is None or entry.ptr is None:
        raise UnknownIdError(f"No {level} entry with a storage pointer for {item.short()}")
    if n <= 0:
        return entry
    policy = policy or PowPolicy()
    if not entry.bits:
        entry.bits = policy.response_bits(len(data))
        entry.chunk_bits = tuple(policy.response_bits(len(c)) for c in chunk_data)
    for _ in range(n):
        seed = gen_seed(csmk, item, entry.idc)
        pair = PowPair(
            index=entry.idc,
            seed=seed,
            response=gen_response(seed, data, entry.bits),
            chunk_responses=tuple(
                gen_response(seed, c, bits)
                for c, bits in zip(chunk_data, entry.chunk_bits, strict=True)
            ),
        )
        entry.pairs.append(pair)
        entry.idc += 1
    return entry


@dataclass(frozen=True, slots=True)
class PoolGrant:
    """Pairs handed to one edge server for one entry."""

    level: PowLevel
    key: Fingerprint
    bits: int
    pairs: tuple[PowPair, ...]
    chunk_keys: tuple[Fingerprint, ...] = ()
    chunk_bits: tuple[int, ...] = ()


def allocate_pool(entry: PowEntry, edge_ids: Sequence[str]) -> dict[str, PoolGrant]:
    """Split the unused pairs of ``entry`` into disjoint contiguous ranges.

    Earlier edges receive the remainder of an uneven split. Every allocated
    index is marked invalid cloud-side and ``idu`` moves past it.

    Raises:
        ExhaustedError: If the entry has no unused pairs
        ValueError: If ``edge_ids`` is empty
    """
    if not edge_ids:
        raise ValueError("At least one edge server is required")
    if entry.exhausted:
        raise ExhaustedError(f"No unused pairs for {entry.level} {entry.key.short()}")
    unused = entry.pairs[entry.idu :]
    base, extra = divmod(len(unused), len(edge_ids))
    grants: dict[str, PoolGrant] = {}
    start = 0
    for i, edge_id in enumerate(edge_ids):
        size = base + (1 if i < extra else 0)
        share = tuple(unused[start : start + size])
        start += size
        grants[edge_id] = PoolGrant(
            level=entry.level,
            key=entry.key,
            bits=entry.bits,
            pairs=share,
            chunk_keys=entry.chunk_keys,
            chunk_bits=entry.chunk_bits,
        )
        entry.invalid.update(pair.index for pair in share)
    entry.idu = len(entry.pairs)
    return grants


def install_grant(maps: PowMaps, grant: PoolGrant) -> PowEntry:
    """Merge a grant into an edge-side pool."""
    entry = maps.ensure(grant.level, grant.key, ptr=grant.key, chunk_keys=grant.chunk_keys)
    entry.bits = grant.bits
    entry.chunk_bits = grant.chunk_bits
    entry.extend(grant.pairs)
    return entry


def issue(
    maps: PowMaps, entry: PowEntry, *, at: int | None = None
) -> tuple[Challenge, PowPair]:
    """Consume one pair of ``entry`` and turn it into a challenge.

    Args:
        maps: Maps owning the entry (their issue log is updated)
        entry: The pool to draw from
        at: Pool index to use instead of the next unused pair

    Raises:
        ExhaustedError: If no unused pair remains
        InvalidatedPairError: If the pair was shared with an edge server or
            was already consumed
    """
    if at is None:
        if entry.exhausted:
            raise ExhaustedError(f"Pool of {entry.level} {entry.key.short()} is exhausted")
        pair = entry.pairs[entry.idu]
        if pair.index in entry.invalid:
            raise InvalidatedPairError(f"Pair {pair.index} of {entry.key.short()} was shared")
        entry.idu += 1
    else:
        if at in entry.invalid:
            raise InvalidatedPairError(f"Pair {at} of {entry.key.short()} was shared")
        pair = entry.pair(at)
        pos = entry.pairs.index(pair)
        if pos < entry.idu:
            raise InvalidatedPairError(f"Pair {at} of {entry.key.short()} was already used")
        entry.idu = pos + 1
    if maps.log is not None:
        maps.log.record(maps.holder, entry.level, entry.key, pair.index)
    challenge = Challenge(entry.level, entry.key, pair.seed, entry.bits, pair.index)
    return challenge, pair


def same_seed_challenges(entry: PowEntry, file_challenge: Challenge) -> list[Challenge]:
    """Chunk challenges that reuse a file-level seed, one per chunk of the file."""
    pairs = zip(entry.chunk_keys, entry.chunk_bits, strict=True)
    return [
        Challenge(
            PowLevel.CHUNK,
            chunk_key,
            file_challenge.seed,
            bits,
            file_challenge.index,
            parent=entry.key,
            slot=slot,
        )
        for slot, (chunk_key, bits) in enumerate(pairs)
    ]


def judge(entry: PowEntry, challenge: Challenge, response: BitString) -> bool:
    """Compare a client response bit-exactly with the stored response."""
    pair = entry.pair(challenge.index)
    if challenge.parent is not None:
        expected = pair.chunk_responses[challenge.slot]
    else:
        expected = pair.response
    return response == expected


Responder = Callable[[Challenge], BitString]


@dataclass(frozen=True, slots=True)
class FileCheck:
    """Result of a file-level verification.

    ``chunk_verdicts`` is filled when a mismatch was narrowed down chunk by
    chunk under the same seed.
    """

    verdict: PowVerdict
    chunk_verdicts: dict[Fingerprint, PowVerdict] = field(default_factory=dict)


def verify_file(maps: PowMaps, file_hash: Fingerprint, respond: Responder) -> FileCheck:
    """Verify file ownership with one pre-computed pair.

    A file absent from ``F`` falls back to chunk verification without
    consuming anything. On a mismatch the same seed is replayed against every
    chunk of the file; chunks that answer correctly are verified.

    Raises:
        ExhaustedError: If the file's pool has no unused pair
    """
    entry = maps.F.get(file_hash)
    if entry is None:
        return FileCheck(PowVerdict.FALLBACK_TO_CHUNKS)
    challenge, _ = issue(maps, entry)
    response = respond(challenge)
    if response.length != challenge.bits:
        return FileCheck(PowVerdict.FAILED)
    if judge(entry, challenge, response):
        return FileCheck(PowVerdict.VERIFIED)
    verdicts: dict[Fingerprint, PowVerdict] = {}
    for chunk_challenge in same_seed_challenges(entry, challenge):
        ok = judge(entry, chunk_challenge, respond(chunk_challenge))
        if verdicts.get(chunk_challenge.key) is not PowVerdict.FAILED:
            verdicts[chunk_challenge.key] = PowVerdict.VERIFIED if ok else PowVerdict.FAILED
    return FileCheck(PowVerdict.FALLBACK_TO_CHUNKS, verdicts)


def verify_chunk(
    maps: PowMaps, chunk_fp: Fingerprint, respond: Responder, *, at: int | None = None
) -> PowVerdict:
    """Verify chunk ownership with one pre-computed pair.

    Raises:
        InvalidatedPairError: If ``at`` names a shared or consumed pair
    """
    entry = maps.C.get(chunk_fp)
    if entry is None or (at is None and entry.exhausted):
        return PowVerdict.NO_PAIRS_AVAILABLE
    challenge, _ = issue(maps, entry, at=at)
    if judge(entry, challenge, respond(challenge)):
        return PowVerdict.VERIFIED
    return PowVerdict.FAILED


class SuspicionTracker:
    """Counts PoW failures per client and suspends repeat offenders."""

    def __init__(self, threshold: int) -> None:
        self.threshold = threshold
        self._failures: defaultdict[ClientId, int] = defaultdict(int)

    def record_failure(self, client: ClientId, count: int = 1) -> bool:
        """Record failures; returns True once the client is suspended."""
        self._failures[client] += count
        if self._failures[client] >= self.threshold:
            logger.warning(
                f"Client {client} suspended after {self._failures[client]} PoW failures"
            )
            return True
        return False

    def is_suspended(self, client: ClientId) -> bool:
        return self._failures.get(client, 0) >= self.threshold

    def failures(self, client: ClientId) -> int:
        return self._failures.get(client, 0)

    def reset(self) -> None:
        self._failures.clear()
