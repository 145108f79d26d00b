"""Core type definitions shared by every component of the deduplication system.

This module holds the domain vocabulary (fingerprints, chunks, file recipes,
identities, virtual time) together with the library's exception hierarchy.
Value types are immutable and safe to share between sessions.
"""

import hashlib
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from enum import StrEnum
from typing import Any, NamedTuple, NewType, Self

from pydantic import GetCoreSchemaHandler
from pydantic_core import CoreSchema, core_schema

FINGERPRINT_SIZE = 32
"""Length in bytes of a SHA-256 fingerprint."""

AE_NONCE_SIZE = 12
AE_TAG_SIZE = 16
AE_OVERHEAD = AE_NONCE_SIZE + AE_TAG_SIZE
"""Bytes a ciphertext chunk carries on top of its plaintext (nonce + GCM tag)."""

ClientId = NewType("ClientId", str)
EdgeId = NewType("EdgeId", str)

VirtualTime = NewType("VirtualTime", int)
"""Virtual nanoseconds. Never derived from the wall clock."""

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def micros(value: float) -> VirtualTime:
    """Convert microseconds to virtual nanoseconds."""
    return VirtualTime(round(value * NS_PER_US))


def millis(value: float) -> VirtualTime:
    """Convert milliseconds to virtual nanoseconds."""
    return VirtualTime(round(value * NS_PER_MS))


def to_millis(value: int) -> float:
    """Convert virtual nanoseconds to (fractional) milliseconds."""
    return value / NS_PER_MS


class Fingerprint(bytes):
    """A 32-byte SHA-256 digest identifying a chunk or a file.

    Fingerprints are ``bytes`` so they hash, compare and sort bytewise, which
    gives every index a deterministic iteration order.

    Example:
        >>> fp = fingerprint_of(b"abc")
        >>> fp.hex()[:8]
        'ba7816bf'
    """

    __slots__ = ()

    def __new__(cls, value: bytes) -> Self:
        if len(value) != FINGERPRINT_SIZE:
            raise ValueError(
                f"Fingerprint must be exactly {FINGERPRINT_SIZE} bytes, got {len(value)}"
            )
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> Self:
        """Parse a 64-character hex string."""
        return cls(bytes.fromhex(text))

    def short(self) -> str:
        """Return an 8-hex-digit prefix suitable for log lines."""
        return self[:4].hex()

    def __repr__(self) -> str:
        return f"Fingerprint({self.short()}…)"

    @classmethod
    def __get_pydantic_core_schema__(
        cls, source: Any, handler: GetCoreSchemaHandler
    ) -> CoreSchema:
        return core_schema.no_info_after_validator_function(cls._coerce, core_schema.bytes_schema())

    @classmethod
    def _coerce(cls, value: bytes) -> "Fingerprint":
        return value if isinstance(value, cls) else cls(value)


def fingerprint_of(data: bytes) -> Fingerprint:
    """Return the SHA-256 fingerprint of ``data``.

    Args:
        data: Non-empty byte sequence

    Returns:
        The fingerprint of ``data``

    Raises:
        EmptyDataError: If ``data`` is empty
    """
    if not data:
        raise EmptyDataError("Cannot fingerprint empty data")
    return Fingerprint(hashlib.sha256(data).digest())


@dataclass(frozen=True, slots=True)
class PlainChunk:
    """A plaintext chunk produced by the chunker."""

    data: bytes

    def __post_init__(self) -> None:
        if not self.data:
            raise EmptyDataError("A chunk holds at least one byte")

    @property
    def length(self) -> int:
        return len(self.data)

    def fingerprint(self) -> Fingerprint:
        return fingerprint_of(self.data)


@dataclass(frozen=True, slots=True)
class CipherChunk:
    """A message-locked ciphertext chunk: nonce, AES-GCM body and tag."""

    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) <= AE_OVERHEAD:
            raise ValueError(
                f"Ciphertext chunk must exceed {AE_OVERHEAD} bytes, got {len(self.data)}"
            )

    @property
    def length(self) -> int:
        return len(self.data)

    @property
    def plain_length(self) -> int:
        return len(self.data) - AE_OVERHEAD

    def fingerprint(self) -> Fingerprint:
        return fingerprint_of(self.data)


class RecipeEntry(NamedTuple):
    """One chunk reference inside a file recipe."""

    fingerprint: Fingerprint
    length: int


@dataclass(frozen=True, slots=True)
class FileRecipe:
    """Ordered chunk list that reconstructs one file.

    Attributes:
        file_hash: Fingerprint of the whole plaintext file
        entries: Ciphertext-chunk fingerprints with their plaintext lengths,
            in file order
    """

    file_hash: Fingerprint
    entries: tuple[RecipeEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[RecipeEntry]:
        return iter(self.entries)

    @property
    def fingerprints(self) -> tuple[Fingerprint, ...]:
        return tuple(entry.fingerprint for entry in self.entries)

    @property
    def total_length(self) -> int:
        return sum(entry.length for entry in self.entries)

    @classmethod
    def build(cls, file_hash: Fingerprint, entries: Iterable[tuple[Fingerprint, int]]) -> Self:
        return cls(file_hash, tuple(RecipeEntry(fp, length) for fp, length in entries))


@dataclass(frozen=True, slots=True)
class BitString:
    """A fixed-length bit string; bit 1 is the most significant of ``length`` bits."""

    value: int
    length: int

    def __post_init__(self) -> None:
        if self.length < 0:
            raise ValueError("Bit length must be non-negative")
        if self.value < 0 or self.value >> self.length:
            raise ValueError(f"Value does not fit in {self.length} bits")

    def __len__(self) -> int:
        return self.length

    def bit(self, j: int) -> int:
        """Return bit ``j`` (1-based, most significant first)."""
        if not 1 <= j <= self.length:
            raise IndexError(f"bit index {j} out of range 1..{self.length}")
        return (self.value >> (self.length - j)) & 1

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> Self:
        value = 0
        length = 0
        for bit in bits:
            value = (value << 1) | (bit & 1)
            length += 1
        return cls(value, length)

    def to_bytes(self) -> bytes:
        """Return the value big-endian, padded with leading zero bits to whole bytes."""
        return self.value.to_bytes((self.length + 7) // 8, "big")


class Tier(StrEnum):
    """Where a duplicate check was answered.

    Attributes:
        HIT_LOCAL: Found in the edge's LRU local index
        HIT_SHARE: Found in the share-index held by the enclave
        HIT_CLOUD: Found in the cloud's full index
        UNIQUE: Not stored anywhere; the chunk must be uploaded
    """

    HIT_LOCAL = "hit_local"
    HIT_SHARE = "hit_share"
    HIT_CLOUD = "hit_cloud"
    UNIQUE = "unique"

    @property
    def is_duplicate(self) -> bool:
        return self is not Tier.UNIQUE


class DedupError(Exception):
    """Base exception for deduplication errors."""


class EmptyDataError(DedupError):
    """Raised when an operation requires non-empty input."""


class RateLimitedError(DedupError):
    """Raised when the key server throttles a client."""


class AttestationError(DedupError):
    """Raised when an enclave reports an unexpected measurement."""


class ChannelAuthError(DedupError):
    """Raised when a secure-channel payload fails authentication or replays."""


class ChannelDownError(DedupError):
    """Raised when sending over a closed secure channel."""


class SaturatedError(DedupError):
    """Raised when a count-min counter would overflow."""


class UnknownIdError(DedupError):
    """Raised when a file or chunk identifier is not known."""


class ExhaustedError(DedupError):
    """Raised when a challenge pool has no unused pairs left."""


class InvalidatedPairError(DedupError):
    """Raised when a pair that was shared with an edge server is used cloud-side."""


class FingerprintMismatchError(DedupError):
    """Raised when a stored chunk does not hash to its claimed fingerprint."""


class DanglingChunkError(DedupError):
    """Raised when a recipe references a chunk that is not stored."""


class CapacityExceededError(DedupError):
    """Raised when enclave contents cannot fit its capacity."""


class SessionAbortedError(DedupError):
    """Raised when a suspicious client's session is suspended."""


class UnknownScopeError(DedupError):
    """Raised when a challenge targets data the client does not hold."""


class OwnershipRequiredError(DedupError):
    """Raised when a duplicate check precedes a verified ownership proof."""


class InfeasibleTargetError(DedupError):
    """Raised when a workload cannot reach the requested dedup ratio."""


class ConfigError(DedupError):
    """Raised when an experiment configuration is invalid."""


class DecodingError(DedupError):
    """Raised when framed or encrypted data cannot be decoded."""


class StorageError(DedupError):
    """Raised when storage operations fail."""
