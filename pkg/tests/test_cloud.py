"""Tests for the cloud server: storage, pools and epoch rebuilds."""

import pytest

from edge_dedup.cloud import CloudConfig, CloudServer, CloudVerdict
from edge_dedup.crypto import EnclaveIdentity
from edge_dedup.messages import EpochPayload, PoolRequest, UpdateRequest
from edge_dedup.pow import PoolKey, PowLevel, gen_response
from edge_dedup.storage import MemoryChunkStore
from edge_dedup.testing import random_bytes
from edge_dedup.types import (
    AttestationError,
    BitString,
    ChannelDownError,
    CipherChunk,
    DanglingChunkError,
    FileRecipe,
    FingerprintMismatchError,
    UnknownIdError,
    fingerprint_of,
)


def cipher(seed: int, size: int = 256) -> CipherChunk:
    return CipherChunk(random_bytes(seed, size))


async def store_file(
    cloud: CloudServer, name: bytes, chunks: list[CipherChunk], *, upload: bool = True
) -> FileRecipe:
    """Store a file the way a gateway does: unique chunks first, then the recipe."""
    items = [(c.fingerprint(), c) for c in dict.fromkeys(chunks)] if upload else []
    await cloud.store_chunks(items)
    recipe = FileRecipe.build(
        fingerprint_of(name), [(c.fingerprint(), c.plain_length) for c in chunks]
    )
    await cloud.store_recipe(recipe, uploaded=[fp for fp, _ in items])
    return recipe


class TestStorage:
    """Tests for the authoritative chunk store."""

    async def test_check_before_and_after_store(self, cloud):
        """A chunk is unique until stored, then duplicate."""
        chunk = cipher(1)
        fp = chunk.fingerprint()
        assert await cloud.cloud_check([fp]) == [CloudVerdict.UNIQUE]
        assert await cloud.store_chunks([(fp, chunk)]) == [fp]
        assert await cloud.cloud_check([fp]) == [CloudVerdict.DUPLICATE]

    async def test_duplicate_store_adds_reference_only(self, cloud):
        """Storing a known chunk again writes nothing new."""
        chunk = cipher(1)
        fp = chunk.fingerprint()
        await cloud.store_chunks([(fp, chunk)])
        assert await cloud.store_chunks([(fp, chunk)]) == []
        entry = await cloud.store.index_get(fp)
        assert entry.refcount == 2
        assert await cloud.stored_bytes() == chunk.length

    async def test_fingerprint_mismatch_writes_nothing(self, cloud):
        """A chunk that does not hash to its fingerprint is refused up front."""
        good, bad = cipher(1), cipher(2)
        with pytest.raises(FingerprintMismatchError):
            await cloud.store_chunks(
                [(good.fingerprint(), good), (good.fingerprint(), bad)]
            )
        assert await cloud.stored_bytes() == 0

    async def test_dangling_recipe(self, cloud):
        """A recipe naming an unstored chunk is refused."""
        chunk = cipher(1)
        recipe = FileRecipe.build(fingerprint_of(b"f"), [(chunk.fingerprint(), 10)])
        with pytest.raises(DanglingChunkError):
            await cloud.store_recipe(recipe)

    async def test_restore_in_file_order(self, cloud):
        """Restore returns chunks in recipe order, repeats included."""
        a, b = cipher(1), cipher(2)
        recipe = await store_file(cloud, b"f", [a, b, a])
        restored, chunks = await cloud.restore_file(recipe.file_hash)
        assert restored == recipe
        assert chunks == [a, b, a]

    async def test_restore_unknown_file(self, cloud):
        """Restoring a file that was never stored raises UnknownIdError."""
        with pytest.raises(UnknownIdError):
            await cloud.restore_file(fingerprint_of(b"missing"))

    async def test_reference_counting_across_files(self, cloud):
        """A chunk is reclaimed once the last recipe naming it is deleted."""
        a, b, c = cipher(1), cipher(2), cipher(3)
        first = await store_file(cloud, b"first", [a, b])
        await cloud.store_chunks([(c.fingerprint(), c)])
        second = FileRecipe.build(
            fingerprint_of(b"second"),
            [(a.fingerprint(), a.plain_length), (c.fingerprint(), c.plain_length)],
        )
        await cloud.store_recipe(second, uploaded=[c.fingerprint()])
        assert (await cloud.store.index_get(a.fingerprint())).refcount == 2

        assert await cloud.delete_file(first.file_hash) == b.length
        assert await cloud.cloud_check([a.fingerprint(), b.fingerprint()]) == [
            CloudVerdict.DUPLICATE,
            CloudVerdict.UNIQUE,
        ]
        assert await cloud.delete_file(second.file_hash) == a.length + c.length
        assert await cloud.stored_bytes() == 0

    async def test_repeated_chunk_in_one_file(self, cloud):
        """Each recipe entry holds a reference, including repeats."""
        a = cipher(1)
        recipe = await store_file(cloud, b"f", [a, a, a])
        assert (await cloud.store.index_get(a.fingerprint())).refcount == 3
        assert await cloud.delete_file(recipe.file_hash) == a.length

    async def test_reupload_keeps_references(self, cloud):
        """Uploading the same file twice does not double its references."""
        a = cipher(1)
        await store_file(cloud, b"f", [a])
        await store_file(cloud, b"f", [a])
        assert (await cloud.store.index_get(a.fingerprint())).refcount == 1

    async def test_rechunked_reupload_replaces_recipe(self, cloud):
        """A new recipe under the same file hash keeps its fresh chunks and releases the old."""
        a, b, c = cipher(1), cipher(2), cipher(3)
        await store_file(cloud, b"f", [a, b])
        recipe = await store_file(cloud, b"f", [a, c])
        assert (await cloud.store.index_get(a.fingerprint())).refcount == 1
        assert (await cloud.store.index_get(c.fingerprint())).refcount == 1
        assert await cloud.cloud_check([b.fingerprint()]) == [CloudVerdict.UNIQUE]

        restored, chunks = await cloud.restore_file(recipe.file_hash)
        assert restored == recipe
        assert chunks == [a, c]
        assert await cloud.delete_file(recipe.file_hash) == a.length + c.length
        assert await cloud.stored_bytes() == 0

    async def test_delete_unknown_file(self, cloud):
        """Deleting a file that was never stored raises UnknownIdError."""
        with pytest.raises(UnknownIdError):
            await cloud.delete_file(fingerprint_of(b"missing"))

    async def test_epoch_trigger(self, cloud):
        """needs_epoch fires once the configured logical bytes were uploaded."""
        assert not cloud.needs_epoch()
        chunk = CipherChunk(random_bytes(1, 1024))
        recipe = FileRecipe.build(fingerprint_of(b"big"), [(chunk.fingerprint(), 1 << 20)])
        await cloud.store_chunks([(chunk.fingerprint(), chunk)])
        await cloud.store_recipe(recipe, uploaded=[chunk.fingerprint()])
        assert cloud.needs_epoch()


class TestEdgeAttachment:
    """Tests for attestation and the per-edge channel."""

    def test_untrusted_measurement(self, cloud):
        """An enclave running other code is refused."""
        with pytest.raises(AttestationError):
            cloud.attach_edge(EnclaveIdentity("edge-0", code_label="v2"))

    def test_edge_ids(self, cloud):
        """Attached edges are listed sorted."""
        cloud.attach_edge(EnclaveIdentity("edge-b"))
        cloud.attach_edge(EnclaveIdentity("edge-a"))
        assert cloud.edge_ids == ["edge-a", "edge-b"]


class TestPools:
    """Tests for pool requests and real-time challenges."""

    async def test_pool_request_unknown_edge(self, cloud):
        """Pool requests from an unattached edge raise UnknownIdError."""
        with pytest.raises(UnknownIdError):
            await cloud.pool_request(PoolRequest(edge_id="ghost"))

    async def test_pool_request_grants_and_not_stored(self, cloud, cloud_config):
        """Stored chunks get a sealed grant; unknown ones are reported back."""
        channel = cloud.attach_edge(EnclaveIdentity("edge-0"))
        stored, missing = cipher(1), cipher(2)
        await cloud.store_chunks([(stored.fingerprint(), stored)])
        response = await cloud.pool_request(
            PoolRequest(edge_id="edge-0", chunks=(stored.fingerprint(), missing.fingerprint()))
        )
        assert response.not_stored == (missing.fingerprint(),)
        payload = EpochPayload.decode(channel.open(response.sealed))
        (grant,) = payload.grants
        assert grant.key == stored.fingerprint()
        assert len(grant.pairs) == cloud_config.pow.pool_depth

    async def test_pool_request_budget(self, issue_log):
        """Items past the per-request budget are deferred."""
        cloud = CloudServer(
            MemoryChunkStore(), CloudConfig(max_pool_request_items=1), log=issue_log
        )
        cloud.attach_edge(EnclaveIdentity("edge-0"))
        a, b = cipher(1), cipher(2)
        await cloud.store_chunks([(a.fingerprint(), a), (b.fingerprint(), b)])
        response = await cloud.pool_request(
            PoolRequest(edge_id="edge-0", chunks=(a.fingerprint(), b.fingerprint()))
        )
        assert len(response.deferred) == 1

    async def test_pool_request_after_detach(self, cloud):
        """A detached edge's requests raise ChannelDownError."""
        cloud.attach_edge(EnclaveIdentity("edge-0"))
        cloud.detach_edge("edge-0")
        with pytest.raises(ChannelDownError):
            await cloud.pool_request(PoolRequest(edge_id="edge-0"))

    async def test_realtime_challenge(self, cloud):
        """The holder of the chunk answers a real-time challenge; a guess fails."""
        chunk = cipher(1)
        await cloud.store_chunks([(chunk.fingerprint(), chunk)])
        challenge = await cloud.realtime_challenge(PoolKey(PowLevel.CHUNK, chunk.fingerprint()))
        assert challenge is not None
        assert cloud.realtime_issued == 1
        good = gen_response(challenge.seed, chunk.data, challenge.bits)
        assert cloud.realtime_judge(challenge, good)
        wrong = BitString(good.value ^ 1, good.length)
        assert not cloud.realtime_judge(challenge, wrong)

    async def test_realtime_challenge_unknown_item(self, cloud):
        """Nothing to challenge for an unstored chunk."""
        key = PoolKey(PowLevel.CHUNK, fingerprint_of(b"missing"))
        assert await cloud.realtime_challenge(key) is None


class TestEpochRebuild:
    """Tests for share-index compilation and per-edge deltas."""

    async def test_deltas_share_index_and_disjoint_grants(self, cloud):
        """Every edge learns the same share-index; pairs of one pool are split."""
        channels = {
            edge_id: cloud.attach_edge(EnclaveIdentity(edge_id)) for edge_id in ("e0", "e1")
        }
        chunks = [cipher(i) for i in range(16)]
        await store_file(cloud, b"one", chunks)
        await store_file(cloud, b"two", chunks[:8], upload=False)

        deltas = await cloud.epoch_rebuild()
        payloads = {
            edge_id: EpochPayload.decode(channels[edge_id].open(delta.sealed))
            for edge_id, delta in deltas.items()
        }
        assert set(payloads) == {"e0", "e1"}
        assert payloads["e0"].added == payloads["e1"].added
        assert 0 < len(payloads["e0"].added) <= 8
        assert cloud.epoch == 1
        assert cloud.bytes_since_epoch == 0

        first = {(g.key, p.index) for g in payloads["e0"].grants for p in g.pairs}
        second = {(g.key, p.index) for g in payloads["e1"].grants for p in g.pairs}
        assert first
        assert first.isdisjoint(second)

    async def test_reported_local_chunks_get_pools(self, cloud):
        """Chunks an edge reports from its local index are granted pools."""
        channel = cloud.attach_edge(EnclaveIdentity("e0"))
        chunks = [cipher(i) for i in range(4)]
        recipe = await store_file(cloud, b"f", chunks)
        report = UpdateRequest(
            edge_id="e0",
            local_chunks=(chunks[0].fingerprint(),),
            local_files=(recipe.file_hash,),
        )
        delta = (await cloud.epoch_rebuild({"e0": report}))["e0"]
        payload = EpochPayload.decode(channel.open(delta.sealed))
        keys = {PoolKey(g.level, g.key) for g in payload.grants}
        assert PoolKey(PowLevel.FILE, recipe.file_hash) in keys
        assert PoolKey(PowLevel.CHUNK, chunks[0].fingerprint()) in keys

    async def test_second_epoch_sends_only_changes(self, cloud):
        """An unchanged share-index is not resent, and granted pools are not regranted."""
        channel = cloud.attach_edge(EnclaveIdentity("e0"))
        await store_file(cloud, b"f", [cipher(i) for i in range(8)])
        first = (await cloud.epoch_rebuild())["e0"]
        assert EpochPayload.decode(channel.open(first.sealed)).added
        second = (await cloud.epoch_rebuild())["e0"]
        payload = EpochPayload.decode(channel.open(second.sealed))
        assert second.epoch == 2
        assert payload.added == ()
        assert payload.grants == ()

    async def test_closed_channel_aborts_rebuild(self, cloud):
        """A closed edge channel aborts the rebuild before anything changes."""
        cloud.attach_edge(EnclaveIdentity("e0"))
        cloud.detach_edge("e0")
        with pytest.raises(ChannelDownError):
            await cloud.epoch_rebuild()
        assert cloud.epoch == 0
