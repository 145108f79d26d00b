"""The uploading client.

A client chunks a file, obtains one message-locked key per distinct chunk from
the key server, encrypts, fingerprints the ciphertexts and then walks a
:class:`~edge_dedup.gateway.DedupGateway`: prove ownership, check, and upload
whatever is unique.

Example:
    >>> client = Client(ClientConfig(client_id="alice"), key_server, network)
    >>> plan = client.prepare_upload(data, meter)
    >>> report = await client.upload(plan, edge, meter)
    >>> report.bytes_sent
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property

from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.chunking import Chunker, ChunkerConfig
from edge_dedup.cloud import CloudServer
from edge_dedup.crypto import KeyServer, MleKey, decrypt_chunk, encrypt_chunk
from edge_dedup.encoding import recipe_wire_size
from edge_dedup.gateway import BatchResponder, DedupGateway
from edge_dedup.messages import Ack, DeriveKeyRequest, DeriveKeyResponse
from edge_dedup.pow import Challenge, PowLevel, PowVerdict, gen_response
from edge_dedup.simnet.network import CostMeter, Link, Network, Phase
from edge_dedup.types import (
    BitString,
    CipherChunk,
    ClientId,
    DecodingError,
    EmptyDataError,
    FileRecipe,
    Fingerprint,
    PlainChunk,
    RateLimitedError,
    Tier,
    UnknownIdError,
    UnknownScopeError,
    fingerprint_of,
)

logger = logging.getLogger(__name__)


class ClientConfig(BaseModel):
    """Client identity, chunking and key-server retry policy.

    Attributes:
        client_id: Identity presented to the key server and gateways
        chunker: Content-defined chunking parameters
        key_retries: Retries after a throttled key request
        backoff_ns: First retry delay; doubles on every retry
    """

    model_config = ConfigDict(frozen=True)

    client_id: str = Field(..., min_length=1, description="Client identity")
    chunker: ChunkerConfig = Field(default_factory=ChunkerConfig, description="Chunker settings")
    key_retries: int = Field(default=3, ge=0, description="Retries on throttling")
    backoff_ns: int = Field(default=1_000_000, ge=0, description="Initial backoff (ns)")


@dataclass(frozen=True, slots=True)
class PlannedChunk:
    plain: PlainChunk
    key: MleKey = field(repr=False)
    cipher: CipherChunk = field(repr=False)
    fp: Fingerprint


@dataclass
class UploadPlan:
    """Everything the client derived for one file before talking to a gateway.

    Attributes:
        file_hash: Fingerprint of the plaintext file
        chunks: Chunks in file order
        verdicts: Tier of every chunk once the upload ran
    """

    file_hash: Fingerprint
    chunks: tuple[PlannedChunk, ...]
    verdicts: list[Tier] = field(default_factory=list)

    @property
    def fingerprints(self) -> tuple[Fingerprint, ...]:
        return tuple(chunk.fp for chunk in self.chunks)

    @property
    def distinct(self) -> list[Fingerprint]:
        return list(dict.fromkeys(self.fingerprints))

    @cached_property
    def by_fingerprint(self) -> dict[Fingerprint, PlannedChunk]:
        return {chunk.fp: chunk for chunk in self.chunks}

    @cached_property
    def cipher_stream(self) -> bytes:
        """Ciphertext chunks concatenated in file order; file-level PoW samples this."""
        return b"".join(chunk.cipher.data for chunk in self.chunks)

    @property
    def logical_bytes(self) -> int:
        return sum(chunk.plain.length for chunk in self.chunks)

    def recipe(self) -> FileRecipe:
        return FileRecipe.build(self.file_hash, ((c.fp, c.plain.length) for c in self.chunks))

    def plaintext(self) -> bytes:
        return b"".join(chunk.plain.data for chunk in self.chunks)


@dataclass
class UploadReport:
    """Outcome of one upload.

    Attributes:
        file_hash: Uploaded file
        logical_bytes: Plaintext size of the file
        bytes_sent: Chunk bytes uploaded plus the recipe
        chunk_bytes_sent: Ciphertext bytes of uploaded chunks only
        uploaded: Distinct fingerprints whose chunks were sent
        tiers: Tier of every chunk occurrence, in file order
        pow: Ownership verdict per distinct fingerprint
        phases: Virtual nanoseconds per phase
    """

    file_hash: Fingerprint
    logical_bytes: int
    bytes_sent: int
    chunk_bytes_sent: int
    uploaded: tuple[Fingerprint, ...]
    tiers: list[Tier]
    pow: dict[Fingerprint, PowVerdict]
    phases: dict[Phase, int]

    @property
    def total_ns(self) -> int:
        return sum(self.phases.values())


class Client:
    """One uploading client; keeps the keys it derived so it can restore."""

    def __init__(self, config: ClientConfig, key_server: KeyServer, network: Network) -> None:
        self.config = config
        self.client_id = ClientId(config.client_id)
        self.key_server = key_server
        self.network = network
        self.chunker = Chunker(config.chunker)
        self._keys: dict[Fingerprint, MleKey] = {}

    def prepare_upload(self, data: bytes, meter: CostMeter) -> UploadPlan:
        """Chunk, derive keys, encrypt and fingerprint a file.

        Raises:
            EmptyDataError: If ``data`` is empty
            RateLimitedError: If the key server still throttles after every retry
        """
        if not data:
            raise EmptyDataError("Cannot upload an empty file")
        plain = self.chunker.chunk(data)
        plain_fps = [chunk.fingerprint() for chunk in plain]
        unique = list(dict.fromkeys(plain_fps))
        keys = dict(zip(unique, self._derive_keys(unique, meter), strict=True))
        chunks: list[PlannedChunk] = []
        for chunk, plain_fp in zip(plain, plain_fps, strict=True):
            key = keys[plain_fp]
            cipher = encrypt_chunk(chunk, key)
            chunks.append(PlannedChunk(chunk, key, cipher, cipher.fingerprint()))
        plan = UploadPlan(fingerprint_of(data), tuple(chunks))
        self._keys.update((chunk.fp, chunk.key) for chunk in chunks)
        logger.debug(
            f"Client {self.client_id} planned {plan.file_hash.short()}: "
            f"{len(chunks)} chunks, {len(unique)} distinct"
        )
        return plan

    def _derive_keys(self, plain_fps: Sequence[Fingerprint], meter: CostMeter) -> list[MleKey]:
        request = DeriveKeyRequest(client_id=self.client_id, plain_fps=tuple(plain_fps))
        delay = self.config.backoff_ns
        for attempt in range(self.config.key_retries + 1):
            try:
                keys = self.key_server.derive_keys(
                    self.client_id, plain_fps, now=self.network.clock.now
                )
            except RateLimitedError:
                self.network.exchange(
                    Link.CLIENT_KEYSERVER,
                    request.wire_size(),
                    Ack(ok=False).wire_size(),
                    phase=Phase.KEYGEN,
                    meter=meter,
                )
                if attempt == self.config.key_retries:
                    raise
                logger.info(f"Client {self.client_id} throttled, backing off {delay} ns")
                self.network.compute(delay, phase=Phase.KEYGEN, meter=meter)
                delay *= 2
                continue
            self.network.exchange(
                Link.CLIENT_KEYSERVER,
                request.wire_size(),
                DeriveKeyResponse(keys=tuple(keys)).wire_size(),
                phase=Phase.KEYGEN,
                meter=meter,
            )
            return keys
        raise AssertionError("unreachable")

    def answer_challenge(
        self, plan: UploadPlan, challenge: Challenge, scope: int | None = None
    ) -> BitString:
        """Compute the response to one challenge from the client's own bytes.

        File challenges sample :attr:`UploadPlan.cipher_stream`; chunk
        challenges sample the ciphertext chunk named by the challenge, or the
        chunk at index ``scope`` when one is given.

        Raises:
            UnknownScopeError: If the challenged file or chunk is not in the plan
        """
        if scope is not None:
            if not 0 <= scope < len(plan.chunks):
                raise UnknownScopeError(
                    f"Chunk index {scope} outside a {len(plan.chunks)}-chunk plan"
                )
            data = plan.chunks[scope].cipher.data
        elif challenge.level is PowLevel.FILE:
            if challenge.key != plan.file_hash:
                raise UnknownScopeError(f"Plan does not cover file {challenge.key.short()}")
            data = plan.cipher_stream
        else:
            chunk = plan.by_fingerprint.get(challenge.key)
            if chunk is None:
                raise UnknownScopeError(f"Plan has no chunk {challenge.key.short()}")
            data = chunk.cipher.data
        return gen_response(challenge.seed, data, challenge.bits)

    def respond(self, plan: UploadPlan) -> BatchResponder:
        def answer(challenges: Sequence[Challenge]) -> list[BitString]:
            return [self.answer_challenge(plan, challenge) for challenge in challenges]

        return answer

    async def upload(
        self, plan: UploadPlan, gateway: DedupGateway, meter: CostMeter
    ) -> UploadReport:
        """Prove ownership, check duplicates and upload the unique chunks.

        Chunks whose proof failed are never checked and are uploaded as-is.

        Raises:
            SessionAbortedError: If the gateway suspends this client
        """
        before = dict(meter.phases)
        session = await gateway.begin(self.client_id, plan.file_hash, plan.fingerprints, meter)
        verdicts = await gateway.prove_ownership(session, self.respond(plan))
        distinct = plan.distinct
        cleared = [
            fp for fp in distinct if verdicts.get(fp, PowVerdict.FAILED) is not PowVerdict.FAILED
        ]
        tier_of: dict[Fingerprint, Tier] = {}
        if cleared:
            tier_of = dict(zip(cleared, await gateway.check(session, cleared), strict=True))
        uploaded = tuple(fp for fp in distinct if tier_of.get(fp, Tier.UNIQUE) is Tier.UNIQUE)
        chunks = [plan.by_fingerprint[fp].cipher for fp in uploaded]
        recipe = plan.recipe()
        await gateway.store(session, chunks, recipe)

        plan.verdicts = [tier_of.get(fp, Tier.UNIQUE) for fp in plan.fingerprints]
        chunk_bytes = sum(chunk.length for chunk in chunks)
        phases = {
            phase: meter.phases[phase] - before.get(phase, 0)
            for phase in meter.phases
            if meter.phases[phase] != before.get(phase, 0)
        }
        return UploadReport(
            file_hash=plan.file_hash,
            logical_bytes=plan.logical_bytes,
            bytes_sent=chunk_bytes + recipe_wire_size(recipe),
            chunk_bytes_sent=chunk_bytes,
            uploaded=uploaded,
            tiers=list(plan.verdicts),
            pow=verdicts,
            phases=phases,
        )

    async def restore(self, file_hash: Fingerprint, cloud: CloudServer) -> bytes:
        """Fetch and decrypt a file this client uploaded.

        Raises:
            UnknownIdError: If the file or one of its keys is unknown
            DecodingError: If the reassembled file does not match ``file_hash``
        """
        recipe, chunks = await cloud.restore_file(file_hash)
        parts: list[bytes] = []
        for fp, chunk in zip(recipe.fingerprints, chunks, strict=True):
            key = self._keys.get(fp)
            if key is None:
                raise UnknownIdError(f"Client {self.client_id} holds no key for {fp.short()}")
            parts.append(decrypt_chunk(chunk, key).data)
        data = b"".join(parts)
        if fingerprint_of(data) != file_hash:
            raise DecodingError(f"Restored file does not hash to {file_hash.short()}")
        return data
