"""Wire messages exchanged by clients, edge servers, the cloud and the key server.

Each message knows its canonical framing. :meth:`WireMessage.wire_size` is the
length of that framing, which the latency model turns into serialization
delay. Payloads that cross the cloud/enclave boundary (epoch updates and pool
grants) are framed by :class:`EpochPayload` and travel sealed under the
secure channel.

Example:
    >>> msg = CheckRequest(fps=(fp,))
    >>> msg.wire_size()
    41
"""

from collections.abc import Sequence
from typing import ClassVar, Self

from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.crypto import KEY_SIZE, MleKey
from edge_dedup.encoding import (
    FrameReader,
    FrameWriter,
    read_bits,
    read_fingerprints,
    recipe_wire_size,
    write_bits,
    write_fingerprints,
    write_recipe,
)
from edge_dedup.pow import Challenge, PoolGrant, PoolKey, PowLevel, PowPair, PowVerdict
from edge_dedup.types import (
    BitString,
    CipherChunk,
    DecodingError,
    FileRecipe,
    Fingerprint,
    Tier,
)

_LEVELS: tuple[PowLevel, ...] = (PowLevel.FILE, PowLevel.CHUNK)
_VERDICTS: tuple[PowVerdict, ...] = tuple(PowVerdict)
_TIERS: tuple[Tier, ...] = tuple(Tier)


def _code(members: Sequence[object], member: object) -> int:
    return members.index(member)


def _member[T](members: Sequence[T], code: int, what: str) -> T:
    if not 0 <= code < len(members):
        raise DecodingError(f"Unknown {what} code {code}")
    return members[code]


def _write_ordered(w: FrameWriter, fps: Sequence[Fingerprint]) -> FrameWriter:
    """Fingerprints in caller order (file order matters), u64 count first."""
    w.u64(len(fps))
    for fp in fps:
        w.fingerprint(fp)
    return w


def write_pool_key(w: FrameWriter, key: PoolKey) -> FrameWriter:
    return w.u8(_code(_LEVELS, key.level)).fingerprint(key.key)


def read_pool_key(r: FrameReader) -> PoolKey:
    return PoolKey(_member(_LEVELS, r.u8(), "pool level"), r.fingerprint())


def write_grant(w: FrameWriter, grant: PoolGrant) -> FrameWriter:
    """Frame a pool grant: header, chunk layout, then every pair."""
    write_pool_key(w, PoolKey(grant.level, grant.key)).u32(grant.bits)
    w.u32(len(grant.chunk_keys))
    for chunk_key, bits in zip(grant.chunk_keys, grant.chunk_bits, strict=True):
        w.fingerprint(chunk_key).u32(bits)
    w.u64(len(grant.pairs))
    for pair in grant.pairs:
        w.u64(pair.index).raw(pair.seed)
        write_bits(w, pair.response)
        w.u32(len(pair.chunk_responses))
        for response in pair.chunk_responses:
            write_bits(w, response)
    return w


def read_grant(r: FrameReader) -> PoolGrant:
    level, key = read_pool_key(r)
    bits = r.u32()
    layout = [(r.fingerprint(), r.u32()) for _ in range(r.u32())]
    pairs: list[PowPair] = []
    for _ in range(r.u64()):
        index = r.u64()
        seed = r.raw(32)
        response = read_bits(r)
        chunk_responses = tuple(read_bits(r) for _ in range(r.u32()))
        pairs.append(PowPair(index, seed, response, chunk_responses))
    return PoolGrant(
        level=level,
        key=key,
        bits=bits,
        pairs=tuple(pairs),
        chunk_keys=tuple(fp for fp, _ in layout),
        chunk_bits=tuple(b for _, b in layout),
    )


class WireMessage(BaseModel):
    """Base of every framed message."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ClassVar[int] = 0

    def write(self, w: FrameWriter) -> FrameWriter:
        raise NotImplementedError

    def encode(self) -> bytes:
        return self.write(FrameWriter().u8(self.kind)).getvalue()

    def wire_size(self) -> int:
        return len(self.write(FrameWriter().u8(self.kind)))


class DeriveKeyRequest(WireMessage):
    kind: ClassVar[int] = 1

    client_id: str = Field(..., min_length=1, description="Requesting client")
    plain_fps: tuple[Fingerprint, ...] = Field(..., description="Plaintext chunk fingerprints")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.blob(self.client_id.encode())
        return _write_ordered(w, self.plain_fps)


class DeriveKeyResponse(WireMessage):
    kind: ClassVar[int] = 2

    keys: tuple[MleKey, ...] = Field(..., description="One key per requested fingerprint")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.u64(len(self.keys))
        for key in self.keys:
            w.raw(key.key)
        return w

    def wire_size(self) -> int:
        return 1 + 8 + KEY_SIZE * len(self.keys)


class UploadFileBegin(WireMessage):
    """Opens an upload: the file hash and its chunk fingerprints, no recipe."""

    kind: ClassVar[int] = 3

    client_id: str = Field(..., min_length=1, description="Uploading client")
    file_hash: Fingerprint = Field(..., description="Plaintext file hash")
    chunk_fps: tuple[Fingerprint, ...] = Field(..., description="Ciphertext chunk fingerprints")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.blob(self.client_id.encode()).fingerprint(self.file_hash)
        return _write_ordered(w, self.chunk_fps)


class PowChallengeBatch(WireMessage):
    kind: ClassVar[int] = 4

    challenges: tuple[Challenge, ...] = Field(..., description="Challenges of one round trip")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.u64(len(self.challenges))
        for ch in self.challenges:
            write_pool_key(w, PoolKey(ch.level, ch.key))
            w.raw(ch.seed).u32(ch.bits).u64(ch.index)
            if ch.parent is None:
                w.u8(0)
            else:
                w.u8(1).fingerprint(ch.parent)
            w.u32(ch.slot)
        return w


class PowResponseBatch(WireMessage):
    kind: ClassVar[int] = 5

    responses: tuple[BitString, ...] = Field(..., description="One response per challenge")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.u64(len(self.responses))
        for response in self.responses:
            write_bits(w, response)
        return w


class PowResult(WireMessage):
    kind: ClassVar[int] = 6

    verdicts: tuple[PowVerdict, ...] = Field(..., description="One verdict per challenge")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.u64(len(self.verdicts))
        for verdict in self.verdicts:
            w.u8(_code(_VERDICTS, verdict))
        return w


class CheckRequest(WireMessage):
    kind: ClassVar[int] = 7

    fps: tuple[Fingerprint, ...] = Field(..., description="Fingerprints to check")

    def write(self, w: FrameWriter) -> FrameWriter:
        return _write_ordered(w, self.fps)


class CheckResponse(WireMessage):
    kind: ClassVar[int] = 8

    tiers: tuple[Tier, ...] = Field(..., description="One verdict per checked fingerprint")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.u64(len(self.tiers))
        for tier in self.tiers:
            w.u8(_code(_TIERS, tier))
        return w


class PoolRequest(WireMessage):
    """Edge asks the cloud for pairs of items its enclave cannot challenge."""

    kind: ClassVar[int] = 9

    edge_id: str = Field(..., min_length=1, description="Requesting edge server")
    files: tuple[Fingerprint, ...] = Field(default=(), description="File hashes")
    chunks: tuple[Fingerprint, ...] = Field(default=(), description="Chunk fingerprints")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.blob(self.edge_id.encode())
        write_fingerprints(w, self.files)
        return write_fingerprints(w, self.chunks)


class PoolResponse(WireMessage):
    """Sealed grants plus the items the cloud does not store or could not serve."""

    kind: ClassVar[int] = 10

    sealed: bytes = Field(..., description="EpochPayload sealed for the requesting enclave")
    not_stored: tuple[Fingerprint, ...] = Field(default=(), description="Unknown to the cloud")
    deferred: tuple[Fingerprint, ...] = Field(default=(), description="Left to real-time PoW")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.blob(self.sealed)
        write_fingerprints(w, self.not_stored)
        return write_fingerprints(w, self.deferred)


class UpdateRequest(WireMessage):
    """Edge report piggybacked on an epoch request."""

    kind: ClassVar[int] = 11

    edge_id: str = Field(..., min_length=1, description="Reporting edge server")
    local_chunks: tuple[Fingerprint, ...] = Field(default=(), description="Local-index chunks")
    local_files: tuple[Fingerprint, ...] = Field(default=(), description="Local-index files")
    exhausted: tuple[PoolKey, ...] = Field(default=(), description="Pools that ran dry")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.blob(self.edge_id.encode())
        write_fingerprints(w, self.local_chunks)
        write_fingerprints(w, self.local_files)
        w.u64(len(self.exhausted))
        for key in self.exhausted:
            write_pool_key(w, key)
        return w


class StoreUpload(WireMessage):
    """Unique ciphertext chunks plus the recipe, sent straight to the cloud."""

    kind: ClassVar[int] = 12

    chunks: tuple[CipherChunk, ...] = Field(default=(), description="Unique chunks")
    recipe: FileRecipe = Field(..., description="Recipe of the uploaded file")

    def write(self, w: FrameWriter) -> FrameWriter:
        w.u64(len(self.chunks))
        for chunk in self.chunks:
            w.blob(chunk.data)
        return write_recipe(w, self.recipe)

    def wire_size(self) -> int:
        return (
            1
            + 8
            + sum(4 + chunk.length for chunk in self.chunks)
            + recipe_wire_size(self.recipe)
        )


class EpochDelta(WireMessage):
    kind: ClassVar[int] = 13

    edge_id: str = Field(..., min_length=1, description="Destination edge server")
    epoch: int = Field(..., ge=0, description="Epoch the delta moves the edge to")
    sealed: bytes = Field(..., description="Sealed EpochPayload")

    def write(self, w: FrameWriter) -> FrameWriter:
        return w.blob(self.edge_id.encode()).u64(self.epoch).blob(self.sealed)


class Ack(WireMessage):
    kind: ClassVar[int] = 14

    ok: bool = True

    def write(self, w: FrameWriter) -> FrameWriter:
        return w.u8(int(self.ok))


class EpochPayload(BaseModel):
    """Plaintext of a sealed epoch update or pool response.

    Attributes:
        epoch: Epoch tag of added share-index entries
        added: Fingerprints entering the share-index
        removed: Fingerprints leaving the share-index
        grants: Pool grants for this enclave
        revoked: Pools the enclave must drop
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    epoch: int = Field(..., ge=0, description="Epoch tag")
    added: tuple[Fingerprint, ...] = Field(default=(), description="New share entries")
    removed: tuple[Fingerprint, ...] = Field(default=(), description="Dropped share entries")
    grants: tuple[PoolGrant, ...] = Field(default=(), description="Pool grants")
    revoked: tuple[PoolKey, ...] = Field(default=(), description="Revoked pools")

    @property
    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.grants or self.revoked)

    def encode(self) -> bytes:
        w = FrameWriter().u64(self.epoch)
        write_fingerprints(w, self.added)
        write_fingerprints(w, self.removed)
        w.u64(len(self.grants))
        for grant in self.grants:
            write_grant(w, grant)
        w.u64(len(self.revoked))
        for key in self.revoked:
            write_pool_key(w, key)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> Self:
        """Parse a payload produced by :meth:`encode`.

        Raises:
            DecodingError: If the frame is malformed
        """
        r = FrameReader(data)
        epoch = r.u64()
        added = read_fingerprints(r)
        removed = read_fingerprints(r)
        grants = tuple(read_grant(r) for _ in range(r.u64()))
        revoked = tuple(read_pool_key(r) for _ in range(r.u64()))
        r.expect_end()
        return cls(epoch=epoch, added=added, removed=removed, grants=grants, revoked=revoked)
