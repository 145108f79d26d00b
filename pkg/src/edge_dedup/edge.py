"""The edge server: enclave-held share-index and pools, LRU local index.

An edge server sits next to its clients. Ownership proofs are answered from
challenge pools inside a simulated enclave, and duplicate checks walk three
tiers: the local index (plain memory, no enclave cost), the share-index (one
enclave call) and finally the cloud (one round trip for the whole batch).
"""

import logging
import math
import os
from collections import Counter, deque
from collections.abc import Iterable, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.cloud import CloudServer, CloudVerdict
from edge_dedup.crypto import EnclaveIdentity, SecureChannel
from edge_dedup.encoding import FrameReader, FrameWriter
from edge_dedup.gateway import BatchResponder, UploadSession
from edge_dedup.lru import LruIndex
from edge_dedup.messages import (
    Ack,
    CheckRequest,
    CheckResponse,
    EpochDelta,
    EpochPayload,
    PoolRequest,
    PoolResponse,
    PowChallengeBatch,
    PowResponseBatch,
    PowResult,
    StoreUpload,
    UpdateRequest,
    UploadFileBegin,
    read_grant,
    read_pool_key,
    write_grant,
    write_pool_key,
)
from edge_dedup.pow import (
    Challenge,
    IssueLog,
    PoolGrant,
    PoolKey,
    PowLevel,
    PowMaps,
    PowVerdict,
    SuspicionTracker,
    install_grant,
    issue,
    judge,
    same_seed_challenges,
)
from edge_dedup.simnet.network import CostMeter, Link, Network, Phase
from edge_dedup.types import (
    AE_NONCE_SIZE,
    FINGERPRINT_SIZE,
    BitString,
    CapacityExceededError,
    ChannelAuthError,
    ChannelDownError,
    CipherChunk,
    ClientId,
    ExhaustedError,
    FileRecipe,
    Fingerprint,
    OwnershipRequiredError,
    SessionAbortedError,
    Tier,
    UnknownIdError,
)

logger = logging.getLogger(__name__)

SHARE_ENTRY_BYTES = FINGERPRINT_SIZE + 8
"""Enclave bytes per share-index entry: fingerprint plus epoch tag."""

_SEALING_AAD = b"edge-dedup/sealed-state"


def local_capacity_for(volume_bytes: int, avg_chunk: int, coverage: float = 0.05) -> int:
    """Local-index entries covering ``coverage`` of a data volume."""
    return max(16, math.ceil(coverage * volume_bytes / avg_chunk))


def enclave_capacity_for(volume_bytes: int, avg_chunk: int) -> int:
    """Enclave budget scaled from 80 MiB per 20 GiB of cloud data at 16 KiB chunks."""
    return max(256 << 10, volume_bytes * 16384 // (256 * avg_chunk))


class EdgeConfig(BaseModel):
    """Edge server sizing and behavior.

    Attributes:
        edge_id: Identity of the edge server and its enclave
        local_chunk_capacity: Chunk entries in the local index
        local_file_capacity: File entries in the local index
        enclave_capacity_bytes: Enclave budget for share-index and pools
        hit_window: Lookups in the hit-ratio window
        hit_threshold: Ratio below which an update is requested
        use_local_index: Disable to skip the local tier entirely
        seed: Seed of the enclave's key-agreement key
        code_label: Enclave code identity presented at attestation
    """

    model_config = ConfigDict(frozen=True)

    edge_id: str = Field(default="edge-0", min_length=1, description="Edge identity")
    local_chunk_capacity: int = Field(default=65536, ge=0, description="Local chunk entries")
    local_file_capacity: int = Field(default=4096, ge=0, description="Local file entries")
    enclave_capacity_bytes: int = Field(default=80 << 20, gt=0, description="Enclave budget")
    hit_window: int = Field(default=10_000, gt=0, description="Hit-ratio window")
    hit_threshold: float = Field(default=0.3, ge=0.0, le=1.0, description="Hit-ratio alarm")
    use_local_index: bool = Field(default=True, description="Enable the local tier")
    seed: int = Field(default=0, ge=0, description="Enclave key seed")
    code_label: str = Field(default="v1", min_length=1, description="Enclave code label")


class LocalIndex:
    """Chunk and file fingerprints seen recently at this edge."""

    def __init__(self, chunk_capacity: int, file_capacity: int) -> None:
        self.chunks = LruIndex[Fingerprint](chunk_capacity)
        self.files = LruIndex[Fingerprint](file_capacity)

    def memory_bytes(self) -> int:
        # fingerprint, two links and a map slot per entry
        return (len(self.chunks) + len(self.files)) * (FINGERPRINT_SIZE + 24)


class HitRatioMonitor:
    """Sliding-window ratio of local and share-index hits over lookups.

    Example:
        >>> monitor = HitRatioMonitor(window=2, threshold=0.5)
        >>> monitor.record(False), monitor.record(False)
        (False, True)
    """

    def __init__(self, window: int, threshold: float) -> None:
        if window <= 0:
            raise ValueError("Window must be positive")
        self.window = window
        self.threshold = threshold
        self._outcomes: deque[bool] = deque(maxlen=window)
        self._hits = 0
        self.alarms = 0

    @property
    def ratio(self) -> float:
        return self._hits / len(self._outcomes) if self._outcomes else 1.0

    def record(self, hit: bool) -> bool:
        """Add one lookup; True when a full window falls below the threshold."""
        if len(self._outcomes) == self.window:
            self._hits -= self._outcomes[0]
        self._outcomes.append(hit)
        self._hits += hit
        if len(self._outcomes) == self.window and self.ratio < self.threshold:
            logger.info(f"Hit ratio {self.ratio:.3f} fell below {self.threshold}")
            self.alarms += 1
            self.reset()
            return True
        return False

    def reset(self) -> None:
        self._outcomes.clear()
        self._hits = 0


class Enclave:
    """Simulated enclave holding the share-index and challenge pools.

    State is only reachable through these methods. Every update arrives
    sealed under the channel key and is staged on a copy, so a rejected
    update leaves the enclave as it was.
    """

    def __init__(
        self, identity: EnclaveIdentity, capacity_bytes: int, *, log: IssueLog | None = None
    ) -> None:
        self.identity = identity
        self.capacity_bytes = capacity_bytes
        self.epoch = 0
        self.evictions = 0
        self._log = log
        self._share: dict[Fingerprint, int] = {}
        self._maps = PowMaps(identity.enclave_id, log)
        self._channel: SecureChannel | None = None
        self._exhausted: set[PoolKey] = set()

    def connect(self, channel: SecureChannel) -> None:
        self._channel = channel

    @property
    def footprint(self) -> int:
        return len(self._share) * SHARE_ENTRY_BYTES + self._maps.footprint()

    @property
    def share_size(self) -> int:
        return len(self._share)

    def probe(self, fp: Fingerprint) -> bool:
        return fp in self._share

    def share_members(self) -> frozenset[Fingerprint]:
        return frozenset(self._share)

    def has_pool(self, level: PowLevel, key: Fingerprint) -> bool:
        entry = self._maps.get(level, key)
        return entry is not None and not entry.exhausted

    def is_exhausted(self, level: PowLevel, key: Fingerprint) -> bool:
        entry = self._maps.get(level, key)
        return entry is not None and entry.exhausted

    def issue(self, level: PowLevel, key: Fingerprint) -> Challenge:
        """Consume the next pair of a pool.

        Raises:
            UnknownIdError: If there is no pool for ``key``
            ExhaustedError: If the pool is empty
        """
        entry = self._maps.get(level, key)
        if entry is None:
            raise UnknownIdError(f"No {level} pool for {key.short()}")
        try:
            challenge, _ = issue(self._maps, entry)
        except ExhaustedError:
            self._exhausted.add(PoolKey(level, key))
            raise
        if entry.exhausted:
            self._exhausted.add(PoolKey(level, key))
        return challenge

    def same_seed(self, challenge: Challenge) -> list[Challenge]:
        entry = self._maps.get(PowLevel.FILE, challenge.key)
        if entry is None:
            raise UnknownIdError(f"No file pool for {challenge.key.short()}")
        return same_seed_challenges(entry, challenge)

    def judge(self, challenge: Challenge, response: BitString) -> bool:
        if challenge.parent is not None:
            entry = self._maps.get(PowLevel.FILE, challenge.parent)
        else:
            entry = self._maps.get(challenge.level, challenge.key)
        if entry is None:
            raise UnknownIdError(f"No pool for {challenge.key.short()}")
        return response.length == challenge.bits and judge(entry, challenge, response)

    def take_exhausted(self) -> tuple[PoolKey, ...]:
        """Pools that ran dry since the last report."""
        keys = tuple(sorted(self._exhausted))
        self._exhausted.clear()
        return keys

    def apply_sealed(self, sealed: bytes) -> EpochPayload:
        """Authenticate, decode and install a sealed update.

        Raises:
            ChannelDownError: If the enclave has no open channel
            ChannelAuthError: If the update fails authentication
            DecodingError: If the decrypted update is malformed
            CapacityExceededError: If the update's own grants do not fit
        """
        if self._channel is None:
            raise ChannelDownError(f"Enclave {self.identity.enclave_id} is not attached")
        payload = EpochPayload.decode(self._channel.open(sealed))
        share = dict(self._share)
        maps = self._maps.clone()
        for fp in payload.removed:
            share.pop(fp, None)
        for key in payload.revoked:
            maps.drop(key.level, key.key)
        for fp in payload.added:
            share[fp] = payload.epoch
        for grant in payload.grants:
            install_grant(maps, grant)
        fresh = {PoolKey(g.level, g.key) for g in payload.grants}
        evicted = self._fit(share, maps, fresh)
        self._share, self._maps = share, maps
        self._exhausted -= fresh
        self.epoch = max(self.epoch, payload.epoch)
        self.evictions += evicted
        return payload

    def _fit(self, share: dict[Fingerprint, int], maps: PowMaps, keep: set[PoolKey]) -> int:
        size = len(share) * SHARE_ENTRY_BYTES + maps.footprint()
        if size <= self.capacity_bytes:
            return 0
        for entry in list(maps.entries()):
            if entry.exhausted:
                size -= entry.footprint()
                maps.drop(entry.level, entry.key)
        evicted = 0
        for fp in sorted(share, key=lambda fp: (share[fp], fp)):
            if size <= self.capacity_bytes:
                break
            del share[fp]
            size -= SHARE_ENTRY_BYTES
            if PoolKey(PowLevel.CHUNK, fp) not in keep:
                dropped = maps.drop(PowLevel.CHUNK, fp)
                size -= dropped.footprint() if dropped else 0
            evicted += 1
        for entry in sorted(maps.entries(), key=lambda e: (e.level, e.key)):
            if size <= self.capacity_bytes:
                break
            if PoolKey(entry.level, entry.key) in keep:
                continue
            size -= entry.footprint()
            maps.drop(entry.level, entry.key)
        if size > self.capacity_bytes:
            raise CapacityExceededError(
                f"Update needs {size} enclave bytes, capacity is {self.capacity_bytes}"
            )
        logger.warning(
            f"Enclave {self.identity.enclave_id} evicted {evicted} share-index entries "
            f"to fit {self.capacity_bytes} bytes"
        )
        return evicted

    def seal(self) -> bytes:
        """Persist the enclave state encrypted under its sealing key."""
        w = FrameWriter().u64(self.epoch)
        w.u64(len(self._share))
        for fp in sorted(self._share):
            w.fingerprint(fp).u64(self._share[fp])
        live = [e for e in self._maps.entries() if not e.exhausted]
        w.u64(len(live))
        for entry in live:
            grant = PoolGrant(
                level=entry.level,
                key=entry.key,
                bits=entry.bits,
                pairs=tuple(entry.pairs[entry.idu :]),
                chunk_keys=entry.chunk_keys,
                chunk_bits=entry.chunk_bits,
            )
            write_grant(w, grant)
        w.u64(len(self._exhausted))
        for key in sorted(self._exhausted):
            write_pool_key(w, key)
        # Every instance of an identity shares the sealing key.
        nonce = os.urandom(AE_NONCE_SIZE)
        body = AESGCM(self.identity.sealing_key).encrypt(nonce, w.getvalue(), _SEALING_AAD)
        return nonce + body

    def unseal(self, blob: bytes) -> None:
        """Restore state sealed by an enclave with the same identity.

        Raises:
            ChannelAuthError: If the blob was sealed elsewhere or altered
        """
        try:
            plain = AESGCM(self.identity.sealing_key).decrypt(blob[:12], blob[12:], _SEALING_AAD)
        except (InvalidTag, ValueError) as exc:
            raise ChannelAuthError("Sealed enclave state failed authentication") from exc
        r = FrameReader(plain)
        epoch = r.u64()
        share = {r.fingerprint(): r.u64() for _ in range(r.u64())}
        maps = PowMaps(self.identity.enclave_id, self._log)
        for _ in range(r.u64()):
            install_grant(maps, read_grant(r))
        exhausted = {read_pool_key(r) for _ in range(r.u64())}
        r.expect_end()
        self.epoch, self._share, self._maps, self._exhausted = epoch, share, maps, exhausted


class EdgeServer:
    """PM-Dedup's upload gateway for the clients of one branch.

    Example:
        >>> edge = EdgeServer(EdgeConfig(edge_id="edge-0"), cloud, network)
        >>> edge.attach()
        >>> session = await edge.begin(client, file_hash, fps, meter)
        >>> await edge.prove_ownership(session, respond)
        >>> tiers = await edge.check(session, fps)
    """

    def __init__(
        self,
        config: EdgeConfig,
        cloud: CloudServer,
        network: Network,
        *,
        log: IssueLog | None = None,
    ) -> None:
        self.config = config
        self.cloud = cloud
        self.network = network
        self.identity = EnclaveIdentity(
            config.edge_id, code_label=config.code_label, seed=config.seed
        )
        self.enclave = Enclave(self.identity, config.enclave_capacity_bytes, log=log)
        self.local = LocalIndex(config.local_chunk_capacity, config.local_file_capacity)
        self.monitor = HitRatioMonitor(config.hit_window, config.hit_threshold)
        self.suspicion = SuspicionTracker(cloud.config.pow.suspicion_threshold)
        self.update_requested = False
        self.tiers: Counter[Tier] = Counter()
        self.realtime_fallbacks = 0

    @property
    def edge_id(self) -> str:
        return self.config.edge_id

    def attach(self) -> None:
        """Attest to the cloud and connect the enclave to its channel."""
        self.enclave.connect(self.cloud.attach_edge(self.identity))
        logger.info(f"Edge server {self.edge_id} attached to {self.cloud.config.cloud_id}")

    # -- gateway ------------------------------------------------------------

    async def begin(
        self,
        client: ClientId,
        file_hash: Fingerprint,
        fps: Sequence[Fingerprint],
        meter: CostMeter,
    ) -> UploadSession:
        if self.suspicion.is_suspended(client):
            raise SessionAbortedError(f"Client {client} is suspended at {self.edge_id}")
        return UploadSession(client, file_hash, tuple(fps), meter)

    async def prove_ownership(
        self, session: UploadSession, respond: BatchResponder
    ) -> dict[Fingerprint, PowVerdict]:
        """Run the dual-level PoW for every distinct chunk of the session.

        A file pool answers for the whole file in one round trip. Otherwise
        (or after a file-level mismatch) chunks are challenged from enclave
        pools, pools fetched from the cloud on demand, or real-time cloud
        challenges, all in a single client round trip.

        Raises:
            SessionAbortedError: If the client is or becomes suspended
        """
        if self.suspicion.is_suspended(session.client):
            raise SessionAbortedError(f"Client {session.client} is suspended at {self.edge_id}")
        meter = session.meter
        verdicts: dict[Fingerprint, PowVerdict] = {}
        opening = UploadFileBegin(
            client_id=session.client, file_hash=session.file_hash, chunk_fps=session.fps
        ).wire_size()
        pending = session.distinct

        if self.enclave.has_pool(PowLevel.FILE, session.file_hash):
            self.network.ecall(1, phase=Phase.POW, meter=meter)
            challenge = self.enclave.issue(PowLevel.FILE, session.file_hash)
            (response,) = self._round(session, [challenge], respond, opening)
            opening = 0
            if self.enclave.judge(challenge, response):
                for fp in pending:
                    verdicts[fp] = PowVerdict.VERIFIED
                session.cleared.update(pending)
                logger.debug(f"File {session.file_hash.short()} proven at file level")
                return verdicts
            narrowed = self.enclave.same_seed(challenge)
            self.network.ecall(len(narrowed), phase=Phase.POW, meter=meter)
            responses = self._round(session, narrowed, respond, 0)
            for chunk_challenge, chunk_response in zip(narrowed, responses, strict=True):
                ok = self.enclave.judge(chunk_challenge, chunk_response)
                if verdicts.get(chunk_challenge.key) is not PowVerdict.FAILED:
                    verdicts[chunk_challenge.key] = (
                        PowVerdict.VERIFIED if ok else PowVerdict.FAILED
                    )
            pending = [fp for fp in pending if fp not in verdicts]
        elif self.enclave.is_exhausted(PowLevel.FILE, session.file_hash):
            logger.info(
                f"File pool for {session.file_hash.short()} exhausted at {self.edge_id}, "
                "proving chunk by chunk"
            )
            self.update_requested = True

        missing = [fp for fp in pending if not self.enclave.has_pool(PowLevel.CHUNK, fp)]
        if missing:
            served = await self._request_pools(session, missing)
            for fp in served.not_stored:
                verdicts[fp] = PowVerdict.NO_PAIRS_AVAILABLE
                session.cloud_known[fp] = False

        local: list[Fingerprint] = []
        deferred: list[Fingerprint] = []
        for fp in pending:
            if fp in verdicts:
                continue
            if self.enclave.has_pool(PowLevel.CHUNK, fp):
                local.append(fp)
            else:
                deferred.append(fp)
        challenges = [self.enclave.issue(PowLevel.CHUNK, fp) for fp in local]
        self.network.ecall(len(challenges), phase=Phase.POW, meter=meter)
        remote = await self._realtime_challenges(session, deferred, verdicts)

        if challenges or remote:
            batch = challenges + remote
            responses = self._round(session, batch, respond, opening)
            remote_results: list[PowVerdict] = []
            for i, (challenge, answer) in enumerate(zip(batch, responses, strict=True)):
                if i >= len(challenges):
                    ok = self.cloud.realtime_judge(challenge, answer)
                    remote_results.append(PowVerdict.VERIFIED if ok else PowVerdict.FAILED)
                    if ok:
                        session.cloud_known[challenge.key] = True
                else:
                    ok = self.enclave.judge(challenge, answer)
                verdicts[challenge.key] = PowVerdict.VERIFIED if ok else PowVerdict.FAILED
            if remote:
                self._charge_realtime_verdicts(session, remote, remote_results)

        for fp, verdict in verdicts.items():
            if verdict is not PowVerdict.FAILED:
                session.cleared.add(fp)
        failures = sum(1 for v in verdicts.values() if v is PowVerdict.FAILED)
        if failures:
            logger.warning(f"Client {session.client} failed {failures} ownership proofs")
            if self.suspicion.record_failure(session.client, failures):
                raise SessionAbortedError(
                    f"Client {session.client} suspended after {failures} failed proofs"
                )
        return verdicts

    def _round(
        self,
        session: UploadSession,
        challenges: Sequence[Challenge],
        respond: BatchResponder,
        extra_bytes: int,
    ) -> list[BitString]:
        responses = respond(challenges)
        if len(responses) != len(challenges):
            raise SessionAbortedError(
                f"Client {session.client} answered {len(responses)} of {len(challenges)} challenges"
            )
        request = PowChallengeBatch(challenges=tuple(challenges))
        reply = PowResponseBatch(responses=tuple(responses))
        self.network.exchange(
            Link.CLIENT_EDGE,
            extra_bytes + request.wire_size(),
            reply.wire_size(),
            phase=Phase.POW,
            meter=session.meter,
        )
        return responses

    async def _request_pools(
        self, session: UploadSession, fps: Sequence[Fingerprint]
    ) -> PoolResponse:
        request = PoolRequest(edge_id=self.edge_id, chunks=tuple(fps))
        generated = self.cloud.pairs_generated
        response = await self.cloud.pool_request(request)
        model = self.network.model
        self.network.exchange(
            Link.EDGE_CLOUD,
            request.wire_size(),
            response.wire_size(),
            phase=Phase.POW,
            meter=session.meter,
        )
        self.network.compute(
            (self.cloud.pairs_generated - generated) * model.challenge_gen_ns,
            phase=Phase.POW,
            meter=session.meter,
        )
        self.network.ecall(1, phase=Phase.POW, meter=session.meter)
        try:
            self.enclave.apply_sealed(response.sealed)
        except CapacityExceededError as exc:
            logger.warning(f"Edge server {self.edge_id} could not hold fetched pools: {exc}")
        return response

    async def _realtime_challenges(
        self,
        session: UploadSession,
        fps: Sequence[Fingerprint],
        verdicts: dict[Fingerprint, PowVerdict],
    ) -> list[Challenge]:
        if not fps:
            return []
        challenges: list[Challenge] = []
        for fp in fps:
            challenge = await self.cloud.realtime_challenge(PoolKey(PowLevel.CHUNK, fp))
            if challenge is None:
                verdicts[fp] = PowVerdict.NO_PAIRS_AVAILABLE
                session.cloud_known[fp] = False
            else:
                challenges.append(challenge)
        self.realtime_fallbacks += len(challenges)
        request = PoolRequest(edge_id=self.edge_id, chunks=tuple(fps))
        self.network.exchange(
            Link.EDGE_CLOUD,
            request.wire_size(),
            PowChallengeBatch(challenges=tuple(challenges)).wire_size(),
            phase=Phase.POW,
            meter=session.meter,
        )
        self.network.compute(
            len(challenges) * self.network.model.challenge_gen_ns,
            phase=Phase.POW,
            meter=session.meter,
        )
        return challenges

    def _charge_realtime_verdicts(
        self, session: UploadSession, challenges: Sequence[Challenge], results: Sequence[PowVerdict]
    ) -> None:
        responses = PowResponseBatch(responses=tuple(BitString(0, c.bits) for c in challenges))
        self.network.exchange(
            Link.EDGE_CLOUD,
            responses.wire_size(),
            PowResult(verdicts=tuple(results)).wire_size(),
            phase=Phase.POW,
            meter=session.meter,
        )

    async def check(self, session: UploadSession, fps: Sequence[Fingerprint]) -> list[Tier]:
        """Classify fingerprints local index first, then share-index, then cloud.

        Raises:
            OwnershipRequiredError: If a fingerprint was not cleared by PoW
        """
        uncleared = [fp for fp in fps if fp not in session.cleared]
        if uncleared:
            raise OwnershipRequiredError(
                f"{len(uncleared)} fingerprints lack an ownership proof, "
                f"e.g. {uncleared[0].short()}"
            )
        meter = session.meter
        model = self.network.model
        use_local = self.config.use_local_index
        file_hit = False
        if use_local:
            self.network.compute(model.local_lookup_ns, phase=Phase.CHECK, meter=meter)
            file_hit = self.local.files.touch(session.file_hash)

        tiers: dict[Fingerprint, Tier] = {}
        unresolved: list[Fingerprint] = []
        for fp in dict.fromkeys(fps):
            if file_hit:
                tiers[fp] = Tier.HIT_LOCAL
                continue
            if use_local:
                self.network.compute(model.local_lookup_ns, phase=Phase.CHECK, meter=meter)
                if self.local.chunks.touch(fp):
                    tiers[fp] = Tier.HIT_LOCAL
                    continue
            self.network.ecall(1, phase=Phase.CHECK, meter=meter)
            if self.enclave.probe(fp):
                tiers[fp] = Tier.HIT_SHARE
                continue
            known = session.cloud_known.get(fp)
            if known is not None:
                tiers[fp] = Tier.HIT_CLOUD if known else Tier.UNIQUE
                continue
            unresolved.append(fp)

        if unresolved:
            verdicts = await self.cloud.cloud_check(unresolved)
            for fp, verdict in zip(unresolved, verdicts, strict=True):
                tiers[fp] = Tier.HIT_CLOUD if verdict is CloudVerdict.DUPLICATE else Tier.UNIQUE
            self.network.exchange(
                Link.EDGE_CLOUD,
                CheckRequest(fps=tuple(unresolved)).wire_size(),
                CheckResponse(tiers=tuple(tiers[fp] for fp in unresolved)).wire_size(),
                phase=Phase.CHECK,
                meter=meter,
            )

        ordered = [tiers[fp] for fp in fps]
        self.network.exchange(
            Link.CLIENT_EDGE,
            CheckRequest(fps=tuple(fps)).wire_size(),
            CheckResponse(tiers=tuple(ordered)).wire_size(),
            phase=Phase.CHECK,
            meter=meter,
        )
        for fp, tier in tiers.items():
            self.tiers[tier] += 1
            if use_local and tier in (Tier.HIT_SHARE, Tier.HIT_CLOUD):
                self.local.chunks.insert(fp)
            if self.monitor.record(tier in (Tier.HIT_LOCAL, Tier.HIT_SHARE)):
                self.update_requested = True
        return ordered

    async def store(
        self, session: UploadSession, chunks: Sequence[CipherChunk], recipe: FileRecipe
    ) -> None:
        """Forward unique chunks and the recipe to the cloud."""
        upload = StoreUpload(chunks=tuple(chunks), recipe=recipe)
        self.network.exchange(
            Link.CLIENT_CLOUD,
            upload.wire_size(),
            Ack().wire_size(),
            phase=Phase.TRANSFER,
            meter=session.meter,
        )
        items = [(chunk.fingerprint(), chunk) for chunk in chunks]
        await self.cloud.store_chunks(items)
        await self.cloud.store_recipe(recipe, uploaded=[fp for fp, _ in items])
        if self.config.use_local_index:
            for fp, _ in items:
                self.local.chunks.insert(fp)
            self.local.files.insert(recipe.file_hash)

    # -- epochs -------------------------------------------------------------

    def report(self) -> UpdateRequest:
        """Local-index membership and exhausted pools for the next epoch."""
        return UpdateRequest(
            edge_id=self.edge_id,
            local_chunks=tuple(self.local.chunks) if self.config.use_local_index else (),
            local_files=tuple(self.local.files) if self.config.use_local_index else (),
            exhausted=self.enclave.take_exhausted(),
        )

    def apply_epoch_delta(self, delta: EpochDelta) -> EpochPayload:
        """Install a sealed epoch delta and start a fresh suspicion epoch.

        Raises:
            UnknownIdError: If the delta is addressed to another edge server
            ChannelAuthError: If the delta fails authentication
            CapacityExceededError: If the delta's grants cannot fit
        """
        if delta.edge_id != self.edge_id:
            raise UnknownIdError(f"Delta for {delta.edge_id} delivered to {self.edge_id}")
        payload = self.enclave.apply_sealed(delta.sealed)
        self.suspicion.reset()
        self.update_requested = False
        logger.info(
            f"Edge server {self.edge_id} at epoch {payload.epoch}: "
            f"+{len(payload.added)} -{len(payload.removed)} share entries, "
            f"{len(payload.grants)} pools, footprint {self.enclave.footprint} bytes"
        )
        return payload


async def refresh_epoch(
    cloud: CloudServer, edges: Iterable[EdgeServer], network: Network, meter: CostMeter
) -> dict[str, EpochPayload]:
    """Collect edge reports, rebuild at the cloud and deliver every delta.

    Traffic is charged to ``meter`` under :attr:`Phase.BACKGROUND`.
    """
    by_id = {edge.edge_id: edge for edge in edges}
    reports = {edge_id: edge.report() for edge_id, edge in by_id.items()}
    deltas = await cloud.epoch_rebuild(reports)
    payloads: dict[str, EpochPayload] = {}
    for edge_id, delta in deltas.items():
        edge = by_id.get(edge_id)
        if edge is None:
            continue
        network.exchange(
            Link.EDGE_CLOUD,
            reports[edge_id].wire_size(),
            delta.wire_size(),
            phase=Phase.BACKGROUND,
            meter=meter,
        )
        try:
            payloads[edge_id] = edge.apply_epoch_delta(delta)
        except CapacityExceededError as exc:
            logger.error(f"Edge server {edge_id} rejected epoch {delta.epoch}: {exc}")
    return payloads
