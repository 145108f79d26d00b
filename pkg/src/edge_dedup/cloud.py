"""The cloud server.

The cloud is the authority on what is stored: it owns the full index, the
ciphertext chunk log and the file recipes (all behind a
:class:`~edge_dedup.storage.ChunkStoreBackend`). It also counts every chunk
reference in a count-min sketch, compiles a share-index per epoch and
pre-computes the challenge pools that edge enclaves use for proofs of
ownership.

Example:
    >>> cloud = CloudServer(MemoryChunkStore())
    >>> await cloud.store_chunks([(chunk.fingerprint(), chunk)])
    >>> await cloud.cloud_check([chunk.fingerprint()])
    [<CloudVerdict.DUPLICATE: 'duplicate'>]
"""

import hashlib
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field

from edge_dedup.crypto import (
    AttestationReport,
    CloudIdentity,
    EnclaveIdentity,
    SecureChannel,
    establish_secure_channel,
    measurement_of,
)
from edge_dedup.encoding import le64
from edge_dedup.messages import EpochDelta, EpochPayload, PoolRequest, PoolResponse, UpdateRequest
from edge_dedup.pow import (
    Challenge,
    IssueLog,
    PoolGrant,
    PoolKey,
    PowEntry,
    PowLevel,
    PowMaps,
    PowPolicy,
    allocate_pool,
    gen_challenges,
    issue,
    judge,
    same_seed_challenges,
)
from edge_dedup.sketch import (
    CandidateTracker,
    CountMinSketch,
    ShareIndex,
    ShareIndexSpec,
    SketchConfig,
    build_share_index,
)
from edge_dedup.storage.base import ChunkStoreBackend, IndexEntry
from edge_dedup.types import (
    BitString,
    ChannelDownError,
    CipherChunk,
    DanglingChunkError,
    EdgeId,
    FileRecipe,
    Fingerprint,
    FingerprintMismatchError,
    UnknownIdError,
)

logger = logging.getLogger(__name__)


class CloudConfig(BaseModel):
    """Cloud-side selection, pool and epoch settings.

    Attributes:
        cloud_id: Identity used in channel key derivation
        share_coverage: Share-index size as a fraction of distinct stored chunks
        sketch: Count-min sketch dimensions
        cms_fraction: Share of the share-index filled by frequency
        proximity_threshold: Minimum locality score
        min_candidates: Floor of the candidate heap size
        pow: Response sizing, pool depth and suspicion threshold
        epoch_bytes: Logical bytes uploaded between two epoch rebuilds
        csmk_seed: Seed of the challenge-seed master key
        identity_seed: Seed of the cloud's key-agreement key
        enclave_code: Code label whose measurement the cloud trusts
        max_pool_request_items: Items served per pool request; the rest are
            left to real-time proofs
    """

    model_config = ConfigDict(frozen=True)

    cloud_id: str = Field(default="cloud", min_length=1, description="Cloud identity")
    share_coverage: float = Field(default=0.1, gt=0.0, le=1.0, description="Share-index coverage")
    sketch: SketchConfig = Field(default_factory=SketchConfig, description="Sketch dimensions")
    cms_fraction: float = Field(default=0.9, ge=0.0, le=1.0, description="Frequency share")
    proximity_threshold: float = Field(default=0.5, ge=0.0, description="Locality cut-off")
    min_candidates: int = Field(default=1024, ge=1, description="Candidate heap floor")
    pow: PowPolicy = Field(default_factory=PowPolicy, description="PoW policy")
    epoch_bytes: int = Field(default=1 << 30, gt=0, description="Bytes per epoch")
    csmk_seed: int = Field(default=0, ge=0, description="Challenge master key seed")
    identity_seed: int = Field(default=0, ge=0, description="Key-agreement seed")
    enclave_code: str = Field(default="v1", min_length=1, description="Trusted enclave code")
    max_pool_request_items: int = Field(default=4096, ge=0, description="Pool request budget")


class CloudVerdict(StrEnum):
    DUPLICATE = "duplicate"
    UNIQUE = "unique"


@dataclass
class EdgeLink:
    """What the cloud knows about one attached edge server."""

    channel: SecureChannel
    share: frozenset[Fingerprint] = frozenset()
    granted: set[PoolKey] = field(default_factory=set)


@dataclass(frozen=True, slots=True)
class _Material:
    ptr: object
    data: bytes
    chunk_data: tuple[bytes, ...] = ()
    chunk_keys: tuple[Fingerprint, ...] = ()


class CloudServer:
    """Authoritative store plus share-index and challenge-pool producer.

    Thread Safety:
        Single writer. The simulator drives it from one event loop; no method
        yields between reading and updating in-memory selection state.
    """

    def __init__(
        self,
        store: ChunkStoreBackend,
        config: CloudConfig | None = None,
        *,
        log: IssueLog | None = None,
    ) -> None:
        self.store = store
        self.config = config or CloudConfig()
        self.identity = CloudIdentity(self.config.cloud_id, seed=self.config.identity_seed)
        self.expected_measurement = measurement_of(self.config.enclave_code)
        self.csmk = hashlib.sha256(b"edge-dedup/csmk" + le64(self.config.csmk_seed)).digest()
        self.maps = PowMaps(self.config.cloud_id, log)
        self.sketch = CountMinSketch.from_config(self.config.sketch)
        self.tracker = CandidateTracker(self.config.min_candidates)
        self.share = ShareIndex(())
        self.epoch = 0
        self.bytes_since_epoch = 0
        self.pairs_generated = 0
        self.realtime_issued = 0
        self._epoch_recipes: list[FileRecipe] = []
        self._edges: dict[EdgeId, EdgeLink] = {}
        self._retired: set[PoolKey] = set()

    # -- storage ------------------------------------------------------------

    async def cloud_check(self, fps: Sequence[Fingerprint]) -> list[CloudVerdict]:
        """Duplicate iff the fingerprint is in the full index; no side effects."""
        present = await self.store.index_contains(list(fps))
        return [
            CloudVerdict.DUPLICATE if fp in present else CloudVerdict.UNIQUE for fp in fps
        ]

    async def store_chunks(
        self, chunks: Sequence[tuple[Fingerprint, CipherChunk]]
    ) -> list[Fingerprint]:
        """Store ciphertext chunks; duplicates only gain a reference.

        Every chunk is checked before anything is written.

        Returns:
            Fingerprints that were new to the store

        Raises:
            FingerprintMismatchError: If a chunk does not hash to its fingerprint
        """
        for fp, chunk in chunks:
            if chunk.fingerprint() != fp:
                raise FingerprintMismatchError(f"Chunk claimed as {fp.short()} hashes differently")
        added: list[Fingerprint] = []
        for fp, chunk in chunks:
            entry = await self.store.index_get(fp)
            if entry is None:
                ref = await self.store.append_chunk(chunk.data)
                await self.store.index_put(fp, IndexEntry(ref, 1))
                added.append(fp)
            else:
                await self.store.index_put(fp, entry._replace(refcount=entry.refcount + 1))
        logger.debug(f"Stored {len(added)} new of {len(chunks)} submitted chunks")
        return added

    async def store_recipe(
        self, recipe: FileRecipe, *, uploaded: Iterable[Fingerprint] = ()
    ) -> None:
        """Persist a recipe and count its chunk references.

        A recipe stored again under the same file hash replaces the old one,
        which releases its references once the new ones are counted.

        Args:
            recipe: The file's recipe
            uploaded: Fingerprints submitted with this upload; each already
                holds one reference, so matching recipe entries add none

        Raises:
            DanglingChunkError: If an entry references a chunk that is not stored
        """
        fps = recipe.fingerprints
        present = await self.store.index_contains(sorted(set(fps)))
        missing = {fp for fp in fps if fp not in present}
        if missing:
            raise DanglingChunkError(
                f"Recipe {recipe.file_hash.short()} references {len(missing)} unstored chunks"
            )
        previous = await self.store.get_recipe(recipe.file_hash)
        covered = Counter(uploaded)
        for fp in fps:
            if covered[fp] > 0:
                covered[fp] -= 1
                continue
            await self._add_ref(fp)
        if previous is not None:
            # new references are in place before the replaced recipe lets go of its own
            for fp in previous.fingerprints:
                await self._drop_ref(fp)
        await self.store.put_recipe(recipe)
        self._observe(recipe)

    def _observe(self, recipe: FileRecipe) -> None:
        for fp in recipe.fingerprints:
            self.sketch.add(fp)
            self.tracker.offer(fp, self.sketch.frequency(fp))
        self._epoch_recipes.append(recipe)
        self.bytes_since_epoch += recipe.total_length

    async def _add_ref(self, fp: Fingerprint) -> None:
        entry = await self.store.index_get(fp)
        if entry is None:
            raise DanglingChunkError(f"Chunk {fp.short()} is not stored")
        await self.store.index_put(fp, entry._replace(refcount=entry.refcount + 1))

    async def _drop_ref(self, fp: Fingerprint) -> int:
        entry = await self.store.index_get(fp)
        if entry is None:
            return 0
        if entry.refcount > 1:
            await self.store.index_put(fp, entry._replace(refcount=entry.refcount - 1))
            return 0
        await self.store.index_delete(fp)
        self.maps.drop(PowLevel.CHUNK, fp)
        self._retired.add(PoolKey(PowLevel.CHUNK, fp))
        return entry.ref.length

    async def restore_file(self, file_hash: Fingerprint) -> tuple[FileRecipe, list[CipherChunk]]:
        """Return a file's recipe and its ciphertext chunks in file order.

        Raises:
            UnknownIdError: If no recipe is stored under ``file_hash``
            DanglingChunkError: If a referenced chunk has been reclaimed
        """
        recipe = await self.store.get_recipe(file_hash)
        if recipe is None:
            raise UnknownIdError(f"No recipe for file {file_hash.short()}")
        chunks = [CipherChunk(await self._read(fp)) for fp in recipe.fingerprints]
        return recipe, chunks

    async def delete_file(self, file_hash: Fingerprint) -> int:
        """Drop a recipe and one reference per entry.

        Returns:
            Bytes reclaimed from the index

        Raises:
            UnknownIdError: If no recipe is stored under ``file_hash``
        """
        recipe = await self.store.get_recipe(file_hash)
        if recipe is None:
            raise UnknownIdError(f"No recipe for file {file_hash.short()}")
        reclaimed = 0
        for fp in recipe.fingerprints:
            reclaimed += await self._drop_ref(fp)
        await self.store.delete_recipe(file_hash)
        self.maps.drop(PowLevel.FILE, file_hash)
        self._retired.add(PoolKey(PowLevel.FILE, file_hash))
        logger.info(f"Deleted file {file_hash.short()}, reclaimed {reclaimed} bytes")
        return reclaimed

    async def stored_bytes(self) -> int:
        return await self.store.stored_bytes()

    async def _read(self, fp: Fingerprint) -> bytes:
        entry = await self.store.index_get(fp)
        if entry is None:
            raise DanglingChunkError(f"Chunk {fp.short()} is not stored")
        return await self.store.read_chunk(entry.ref)

    # -- edge servers ---------------------------------------------------------

    def attach_edge(
        self, enclave: EnclaveIdentity, *, report: AttestationReport | None = None
    ) -> SecureChannel:
        """Attest an edge enclave and open its secure channel.

        Returns:
            The enclave's end of the channel

        Raises:
            AttestationError: If the enclave's measurement is not trusted
        """
        pair = establish_secure_channel(
            enclave, self.identity, expected_measurement=self.expected_measurement, report=report
        )
        previous = self._edges.get(EdgeId(enclave.enclave_id))
        if previous is not None:
            previous.channel.close()
        self._edges[EdgeId(enclave.enclave_id)] = EdgeLink(pair.cloud)
        return pair.enclave

    def detach_edge(self, edge_id: str) -> None:
        link = self._edges.get(EdgeId(edge_id))
        if link is not None:
            link.channel.close()

    @property
    def edge_ids(self) -> list[EdgeId]:
        return sorted(self._edges)

    def _link(self, edge_id: str) -> EdgeLink:
        link = self._edges.get(EdgeId(edge_id))
        if link is None:
            raise UnknownIdError(f"Edge server {edge_id} is not attached")
        if link.channel.is_closed:
            raise ChannelDownError(f"Channel to edge server {edge_id} is down")
        return link

    # -- challenge pools --------------------------------------------------------

    async def _material(self, key: PoolKey) -> _Material | None:
        if key.level is PowLevel.CHUNK:
            entry = await self.store.index_get(key.key)
            if entry is None:
                return None
            return _Material(ptr=entry.ref, data=await self.store.read_chunk(entry.ref))
        recipe = await self.store.get_recipe(key.key)
        if recipe is None:
            return None
        chunk_data = tuple([await self._read(fp) for fp in recipe.fingerprints])
        return _Material(
            ptr=key.key,
            data=b"".join(chunk_data),
            chunk_data=chunk_data,
            chunk_keys=recipe.fingerprints,
        )

    async def _generate(self, key: PoolKey, n: int) -> PowEntry | None:
        material = await self._material(key)
        if material is None:
            return None
        self.maps.ensure(key.level, key.key, ptr=material.ptr, chunk_keys=material.chunk_keys)
        entry = gen_challenges(
            self.maps,
            key.key,
            key.level,
            n,
            self.csmk,
            data=material.data,
            chunk_data=material.chunk_data,
            policy=self.config.pow,
        )
        self.pairs_generated += n
        return entry

    async def _grant(self, key: PoolKey, edge_ids: Sequence[EdgeId]) -> dict[str, PoolGrant] | None:
        entry = await self._generate(key, self.config.pow.pool_depth * len(edge_ids))
        if entry is None:
            return None
        grants = allocate_pool(entry, edge_ids)
        for edge_id in edge_ids:
            self._edges[edge_id].granted.add(key)
        return grants

    async def pool_request(self, request: PoolRequest) -> PoolResponse:
        """Serve fresh pairs for items an edge enclave cannot challenge.

        Items the cloud does not store come back in ``not_stored``; items past
        the per-request budget come back in ``deferred``.

        Raises:
            UnknownIdError: If the edge server is not attached
            ChannelDownError: If its channel is closed
        """
        edge_id = EdgeId(request.edge_id)
        link = self._link(edge_id)
        keys = [PoolKey(PowLevel.FILE, fp) for fp in request.files]
        keys += [PoolKey(PowLevel.CHUNK, fp) for fp in request.chunks]
        grants: list[PoolGrant] = []
        not_stored: list[Fingerprint] = []
        deferred: list[Fingerprint] = []
        for key in keys:
            if len(grants) >= self.config.max_pool_request_items:
                deferred.append(key.key)
                continue
            result = await self._grant(key, [edge_id])
            if result is None:
                not_stored.append(key.key)
            else:
                grants.append(result[edge_id])
        payload = EpochPayload(epoch=self.epoch, grants=tuple(grants))
        logger.debug(
            f"Pool request from {edge_id}: {len(grants)} granted, "
            f"{len(not_stored)} not stored, {len(deferred)} deferred"
        )
        return PoolResponse(
            sealed=link.channel.seal(payload.encode()),
            not_stored=tuple(not_stored),
            deferred=tuple(deferred),
        )

    async def realtime_challenge(self, key: PoolKey) -> Challenge | None:
        """Generate and issue one cloud-only challenge, or None if not stored."""
        entry = await self._generate(key, 1)
        if entry is None:
            return None
        challenge, _ = issue(self.maps, entry)
        self.realtime_issued += 1
        return challenge

    def realtime_same_seed(self, challenge: Challenge) -> list[Challenge]:
        """Chunk challenges replaying a file-level seed the cloud issued."""
        entry = self.maps.get(PowLevel.FILE, challenge.key)
        if entry is None:
            raise UnknownIdError(f"No file pool for {challenge.key.short()}")
        return same_seed_challenges(entry, challenge)

    def realtime_judge(self, challenge: Challenge, response: BitString) -> bool:
        """Judge a response to a challenge issued by :meth:`realtime_challenge`.

        Raises:
            UnknownIdError: If the challenged pool does not exist
        """
        level = PowLevel.FILE if challenge.parent is not None else challenge.level
        entry = self.maps.get(level, challenge.parent or challenge.key)
        if entry is None:
            raise UnknownIdError(f"No pool for {challenge.key.short()}")
        return response.length == challenge.bits and judge(entry, challenge, response)

    # -- epochs -----------------------------------------------------------------

    def needs_epoch(self) -> bool:
        return self.bytes_since_epoch >= self.config.epoch_bytes

    async def _select_share(
        self, reports: Mapping[EdgeId, UpdateRequest], epoch: int
    ) -> tuple[ShareIndex, int]:
        distinct = await self.store.index_size()
        slots = math.ceil(self.config.share_coverage * distinct)
        if slots == 0:
            return ShareIndex((), epoch), 0
        candidates = set(self.tracker.candidates()) | self.share.as_set()
        stored = await self.store.index_contains(sorted(candidates))
        anchors: set[Fingerprint] = set()
        for report in reports.values():
            anchors.update(report.local_chunks)
        spec = ShareIndexSpec(
            total_slots=slots,
            cms_fraction=self.config.cms_fraction,
            proximity_threshold=self.config.proximity_threshold,
        )
        share = build_share_index(
            self.sketch, stored, self._epoch_recipes, spec, extra_anchors=anchors, epoch=epoch
        )
        live = await self.store.index_contains(list(share.members))
        members = tuple(fp for fp in share.members if fp in live)
        return ShareIndex(members, epoch), slots

    async def epoch_rebuild(
        self, reports: Mapping[str, UpdateRequest] | None = None
    ) -> dict[EdgeId, EpochDelta]:
        """Compile the next share-index and the sealed delta for every edge.

        Pools are generated for share-index chunks an edge does not hold yet,
        for the local-index chunks and files the edge reports without a pool
        and for every pool the edge reports as exhausted. Pairs of one entry
        are split disjointly across the edges that need it.

        Args:
            reports: Edge reports keyed by edge id

        Returns:
            One delta per attached edge

        Raises:
            ChannelDownError: If any edge channel is closed (nothing changes)
        """
        for edge_id, link in self._edges.items():
            if link.channel.is_closed:
                raise ChannelDownError(f"Channel to edge server {edge_id} is down")
        by_edge = {EdgeId(k): v for k, v in (reports or {}).items()}
        epoch = self.epoch + 1
        share, slots = await self._select_share(by_edge, epoch)
        members = share.as_set()

        wanted: dict[EdgeId, set[PoolKey]] = {}
        needs: defaultdict[PoolKey, list[EdgeId]] = defaultdict(list)
        for edge_id in self.edge_ids:
            link = self._edges[edge_id]
            report = by_edge.get(edge_id)
            keys = {PoolKey(PowLevel.CHUNK, fp) for fp in members}
            exhausted: set[PoolKey] = set()
            if report is not None:
                keys.update(PoolKey(PowLevel.CHUNK, fp) for fp in report.local_chunks)
                keys.update(PoolKey(PowLevel.FILE, fp) for fp in report.local_files)
                exhausted = set(report.exhausted)
            wanted[edge_id] = keys
            for key in keys:
                if key in self._retired:
                    continue
                if key not in link.granted or key in exhausted:
                    needs[key].append(edge_id)

        grants: defaultdict[EdgeId, list[PoolGrant]] = defaultdict(list)
        failed: defaultdict[EdgeId, set[PoolKey]] = defaultdict(set)
        for key in sorted(needs):
            result = await self._grant(key, needs[key])
            for edge_id in needs[key]:
                if result is None:
                    failed[edge_id].add(key)
                else:
                    grants[edge_id].append(result[edge_id])

        deltas: dict[EdgeId, EpochDelta] = {}
        for edge_id in self.edge_ids:
            link = self._edges[edge_id]
            revoked = (link.granted - wanted[edge_id]) | (link.granted & self._retired)
            revoked |= failed[edge_id] & link.granted
            payload = EpochPayload(
                epoch=epoch,
                added=tuple(sorted(members - link.share)),
                removed=tuple(sorted(link.share - members)),
                grants=tuple(grants[edge_id]),
                revoked=tuple(sorted(revoked)),
            )
            link.share = frozenset(members)
            link.granted -= revoked
            deltas[edge_id] = EpochDelta(
                edge_id=edge_id, epoch=epoch, sealed=link.channel.seal(payload.encode())
            )

        self.tracker.clear()
        capacity = max(self.config.min_candidates, self.config.sketch.candidate_factor * slots)
        self.tracker.resize(capacity)
        for fp in share.members:
            self.tracker.offer(fp, self.sketch.frequency(fp))
        self._epoch_recipes.clear()
        self._retired.clear()
        self.bytes_since_epoch = 0
        self.share = share
        self.epoch = epoch
        logger.info(
            f"Epoch {epoch}: share-index of {len(share)} entries ({slots} slots), "
            f"{sum(len(g) for g in grants.values())} pool grants to {len(deltas)} edges"
        )
        return deltas
