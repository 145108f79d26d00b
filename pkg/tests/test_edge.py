"""Tests for the edge server, its enclave and the hit-ratio monitor."""

import random

import pytest

from edge_dedup.client import Client, ClientConfig
from edge_dedup.crypto import (
    CloudIdentity,
    EnclaveIdentity,
    establish_secure_channel,
    measurement_of,
)
from edge_dedup.edge import (
    SHARE_ENTRY_BYTES,
    EdgeConfig,
    EdgeServer,
    Enclave,
    HitRatioMonitor,
    enclave_capacity_for,
    local_capacity_for,
    refresh_epoch,
)
from edge_dedup.messages import EpochDelta, EpochPayload, PoolRequest
from edge_dedup.pow import PowLevel, PowVerdict
from edge_dedup.simnet.network import CostMeter, Phase
from edge_dedup.testing import random_bytes, random_responder
from edge_dedup.types import (
    AE_NONCE_SIZE,
    CapacityExceededError,
    ChannelAuthError,
    CipherChunk,
    OwnershipRequiredError,
    SessionAbortedError,
    Tier,
    UnknownIdError,
    fingerprint_of,
)


@pytest.fixture
def make_edge(cloud, network, issue_log):
    """Build and attach edge servers over the shared cloud."""

    def build(edge_id: str = "edge-0", **overrides) -> EdgeServer:
        edge = EdgeServer(EdgeConfig(edge_id=edge_id, **overrides), cloud, network, log=issue_log)
        edge.attach()
        return edge

    return build


@pytest.fixture
def make_client(small_chunker, key_server, network):
    """Build clients sharing the key server and network."""

    def build(client_id: str) -> Client:
        return Client(ClientConfig(client_id=client_id, chunker=small_chunker), key_server, network)

    return build


async def upload(client, edge, data):
    meter = CostMeter()
    plan = client.prepare_upload(data, meter)
    return plan, await client.upload(plan, edge, meter)


class TestSizing:
    """Tests for capacity helpers."""

    def test_local_capacity(self):
        """Local capacity covers a fraction of the volume, with a floor."""
        assert local_capacity_for(100 << 20, 4096, 0.5) == 12800
        assert local_capacity_for(1024, 4096) == 16

    def test_enclave_capacity(self):
        """Twenty GiB at 16 KiB chunks maps to the 80 MiB budget."""
        assert enclave_capacity_for(20 << 30, 16384) == 80 << 20
        assert enclave_capacity_for(1 << 20, 16384) == 256 << 10


class TestHitRatioMonitor:
    """Tests for the sliding hit-ratio window."""

    def test_alarm_then_reset(self):
        """A full window below the threshold alarms once and starts over."""
        monitor = HitRatioMonitor(window=2, threshold=0.5)
        assert monitor.record(False) is False
        assert monitor.record(False) is True
        assert monitor.alarms == 1
        assert monitor.ratio == 1.0

    def test_ratio_at_threshold_is_fine(self):
        """A ratio equal to the threshold does not alarm."""
        monitor = HitRatioMonitor(window=2, threshold=0.5)
        monitor.record(True)
        assert monitor.record(False) is False
        assert monitor.ratio == 0.5

    def test_window_slides(self):
        """Old outcomes leave the window."""
        monitor = HitRatioMonitor(window=3, threshold=0.0)
        for hit in (False, False, True, True, True):
            monitor.record(hit)
        assert monitor.ratio == 1.0

    def test_invalid_window(self):
        """A window must hold at least one lookup."""
        with pytest.raises(ValueError):
            HitRatioMonitor(window=0, threshold=0.5)


class TestUploadPath:
    """Tests for the three-tier check through an edge server."""

    async def test_first_upload_is_unique(self, make_edge, make_client, sample_data, cloud):
        """Nothing is known yet: every chunk is unique and uploaded."""
        edge = make_edge()
        plan, report = await upload(make_client("alice"), edge, sample_data)
        assert set(report.tiers) == {Tier.UNIQUE}
        assert set(report.pow.values()) == {PowVerdict.NO_PAIRS_AVAILABLE}
        assert report.chunk_bytes_sent == await cloud.stored_bytes()
        assert report.phases[Phase.TRANSFER] > 0

    async def test_same_file_hits_local_index(self, make_edge, make_client, sample_data):
        """A second upload of a file the edge just stored is a local hit."""
        edge = make_edge()
        await upload(make_client("alice"), edge, sample_data)
        _, report = await upload(make_client("bob"), edge, sample_data)
        assert set(report.tiers) == {Tier.HIT_LOCAL}
        assert set(report.pow.values()) == {PowVerdict.VERIFIED}
        assert report.chunk_bytes_sent == 0
        assert edge.tiers[Tier.HIT_LOCAL] > 0

    async def test_without_local_index_asks_the_cloud(self, make_edge, make_client, sample_data):
        """With the local tier disabled, known chunks are cloud hits."""
        edge = make_edge(use_local_index=False)
        await upload(make_client("alice"), edge, sample_data)
        _, report = await upload(make_client("bob"), edge, sample_data)
        assert set(report.tiers) == {Tier.HIT_CLOUD}
        assert report.chunk_bytes_sent == 0

    async def test_share_index_hits_after_epoch(
        self, make_edge, make_client, sample_data, cloud, network
    ):
        """After an epoch the share-index answers checks inside the enclave."""
        edge = make_edge(use_local_index=False)
        await upload(make_client("alice"), edge, sample_data)
        await upload(make_client("bob"), edge, sample_data)
        payloads = await refresh_epoch(cloud, [edge], network, CostMeter())
        assert payloads["edge-0"].added
        assert edge.enclave.share_size == len(payloads["edge-0"].added)

        _, report = await upload(make_client("carol"), edge, sample_data)
        assert Tier.HIT_SHARE in report.tiers
        assert all(t.is_duplicate for t in report.tiers)

    async def test_file_level_proof_after_epoch(
        self, make_edge, make_client, sample_data, cloud, network
    ):
        """A file pool proves a whole file in one challenge."""
        edge = make_edge()
        await upload(make_client("alice"), edge, sample_data)
        await refresh_epoch(cloud, [edge], network, CostMeter())
        plan = make_client("bob").prepare_upload(sample_data, CostMeter())
        assert edge.enclave.has_pool(PowLevel.FILE, plan.file_hash)
        _, report = await upload(make_client("bob"), edge, sample_data)
        assert set(report.pow.values()) == {PowVerdict.VERIFIED}

    async def test_exhausted_file_pool_requests_update(
        self, make_edge, make_client, sample_data, cloud, network
    ):
        """Once the file pool runs dry, chunks are proven and a refill is requested."""
        edge = make_edge()
        await upload(make_client("alice"), edge, sample_data)
        await refresh_epoch(cloud, [edge], network, CostMeter())
        file_hash = make_client("bob").prepare_upload(sample_data, CostMeter()).file_hash
        while edge.enclave.has_pool(PowLevel.FILE, file_hash):
            await upload(make_client("bob"), edge, sample_data)
        assert edge.enclave.is_exhausted(PowLevel.FILE, file_hash)
        edge.update_requested = False

        _, report = await upload(make_client("carol"), edge, sample_data)
        assert set(report.pow.values()) == {PowVerdict.VERIFIED}
        assert edge.update_requested

    async def test_tiers_match_membership_oracle(self, make_edge, cloud):
        """Every verdict equals local, then share, then cloud membership."""
        rng = random.Random(9)
        chunks = [CipherChunk(random_bytes(i, 64)) for i in range(120)]
        fps = [chunk.fingerprint() for chunk in chunks]
        local, share = set(rng.sample(fps, 30)), set(rng.sample(fps, 30))
        stored = set(rng.sample(fps, 60))
        pairs = zip(fps, chunks, strict=True)
        await cloud.store_chunks([(fp, chunk) for fp, chunk in pairs if fp in stored])

        edge = make_edge(local_chunk_capacity=1000)
        pair = establish_secure_channel(
            edge.identity, CloudIdentity(), expected_measurement=measurement_of("v1")
        )
        edge.enclave.connect(pair.enclave)
        payload = EpochPayload(epoch=1, added=tuple(sorted(share)))
        edge.enclave.apply_sealed(pair.cloud.seal(payload.encode()))
        for fp in local:
            edge.local.chunks.insert(fp)

        for round_no in range(5):
            batch = rng.sample(fps, 40)
            file_hash = fingerprint_of(b"file" + bytes([round_no]))
            session = await edge.begin("alice", file_hash, batch, CostMeter())
            session.cleared.update(batch)
            expected = [
                Tier.HIT_LOCAL
                if fp in local
                else Tier.HIT_SHARE
                if fp in share
                else Tier.HIT_CLOUD
                if fp in stored
                else Tier.UNIQUE
                for fp in batch
            ]
            assert await edge.check(session, batch) == expected
            local.update(
                fp
                for fp, tier in zip(batch, expected, strict=True)
                if tier in (Tier.HIT_SHARE, Tier.HIT_CLOUD)
            )

    async def test_check_requires_ownership(self, make_edge):
        """Checking a fingerprint that was never proven is refused."""
        edge = make_edge()
        fp = fingerprint_of(b"x")
        session = await edge.begin("mallory", fingerprint_of(b"f"), [fp], CostMeter())
        with pytest.raises(OwnershipRequiredError):
            await edge.check(session, [fp])

    async def test_guessing_client_is_suspended(
        self, make_edge, make_client, sample_data, key_server
    ):
        """A client answering at random fails, gets suspended, and stays out."""
        edge = make_edge()
        plan, _ = await upload(make_client("alice"), edge, sample_data)
        session = await edge.begin("mallory", plan.file_hash, plan.fingerprints, CostMeter())
        with pytest.raises(SessionAbortedError):
            await edge.prove_ownership(session, random_responder(3))
        assert edge.suspicion.is_suspended("mallory")
        with pytest.raises(SessionAbortedError):
            await edge.begin("mallory", plan.file_hash, plan.fingerprints, CostMeter())

    async def test_hit_ratio_alarm_requests_update(self, make_edge, make_client):
        """A window of misses flags the edge for an early epoch."""
        edge = make_edge(hit_window=8, hit_threshold=0.5)
        await upload(make_client("alice"), edge, random_bytes(11, 32 << 10))
        assert edge.update_requested

    async def test_report_lists_local_index(self, make_edge, make_client, sample_data):
        """Edge reports carry the local chunk and file entries."""
        edge = make_edge()
        plan, _ = await upload(make_client("alice"), edge, sample_data)
        report = edge.report()
        assert plan.file_hash in report.local_files
        assert set(report.local_chunks) == set(plan.fingerprints)

    async def test_delta_for_another_edge(self, make_edge):
        """A delta addressed elsewhere is refused."""
        edge = make_edge()
        with pytest.raises(UnknownIdError):
            edge.apply_epoch_delta(EpochDelta(edge_id="edge-9", epoch=1, sealed=b"\x00" * 40))


class TestEnclave:
    """Tests for enclave updates, eviction and sealing."""

    @staticmethod
    def connected(capacity: int, enclave_id: str = "edge-0"):
        identity = EnclaveIdentity(enclave_id)
        pair = establish_secure_channel(
            identity, CloudIdentity(), expected_measurement=measurement_of("v1")
        )
        enclave = Enclave(identity, capacity)
        enclave.connect(pair.enclave)
        return enclave, pair.cloud

    def test_apply_and_replay(self):
        """A sealed update installs once; replaying it fails authentication."""
        enclave, cloud_end = self.connected(1 << 20)
        fp = fingerprint_of(b"a")
        sealed = cloud_end.seal(EpochPayload(epoch=1, added=(fp,)).encode())
        enclave.apply_sealed(sealed)
        assert enclave.probe(fp)
        assert enclave.epoch == 1
        with pytest.raises(ChannelAuthError):
            enclave.apply_sealed(sealed)

    def test_eviction_keeps_newest_entries(self):
        """Over capacity, oldest-epoch entries go first, then lowest fingerprint."""
        enclave, cloud_end = self.connected(2 * SHARE_ENTRY_BYTES)
        fps = sorted(fingerprint_of(bytes([i])) for i in range(4))
        enclave.apply_sealed(cloud_end.seal(EpochPayload(epoch=1, added=(fps[3],)).encode()))
        enclave.apply_sealed(
            cloud_end.seal(EpochPayload(epoch=2, added=tuple(fps[:3])).encode())
        )
        assert enclave.share_members() == frozenset(fps[1:3])
        assert enclave.evictions == 2

    async def test_grants_that_cannot_fit(self, cloud):
        """Grants larger than the enclave are rejected and nothing changes."""
        identity = EnclaveIdentity("edge-0")
        enclave = Enclave(identity, capacity_bytes=16)
        enclave.connect(cloud.attach_edge(identity))
        chunk = CipherChunk(random_bytes(1, 256))
        await cloud.store_chunks([(chunk.fingerprint(), chunk)])
        response = await cloud.pool_request(
            PoolRequest(edge_id="edge-0", chunks=(chunk.fingerprint(),))
        )
        with pytest.raises(CapacityExceededError):
            enclave.apply_sealed(response.sealed)
        assert enclave.footprint == 0

    async def test_seal_and_unseal(self, cloud):
        """Sealed state restores into an enclave with the same identity only."""
        identity = EnclaveIdentity("edge-0")
        enclave = Enclave(identity, 1 << 20)
        enclave.connect(cloud.attach_edge(identity))
        chunk = CipherChunk(random_bytes(1, 256))
        await cloud.store_chunks([(chunk.fingerprint(), chunk)])
        response = await cloud.pool_request(
            PoolRequest(edge_id="edge-0", chunks=(chunk.fingerprint(),))
        )
        enclave.apply_sealed(response.sealed)
        enclave.issue(PowLevel.CHUNK, chunk.fingerprint())
        blob = enclave.seal()

        restored = Enclave(EnclaveIdentity("edge-0"), 1 << 20)
        restored.unseal(blob)
        assert restored.has_pool(PowLevel.CHUNK, chunk.fingerprint())
        assert restored.footprint == enclave.footprint

        stranger = Enclave(EnclaveIdentity("edge-1"), 1 << 20)
        with pytest.raises(ChannelAuthError):
            stranger.unseal(blob)

    def test_restarted_enclave_never_repeats_a_sealing_nonce(self):
        """Two instances of one identity seal different state under distinct nonces."""
        identity = EnclaveIdentity("edge-0", seed=0)
        first, cloud_end = self.connected(1 << 20)
        first.apply_sealed(
            cloud_end.seal(EpochPayload(epoch=1, added=(fingerprint_of(b"a"),)).encode())
        )
        second = Enclave(identity, 1 << 20)
        blobs = [first.seal(), second.seal(), first.seal(), second.seal()]
        nonces = {blob[:AE_NONCE_SIZE] for blob in blobs}
        assert len(nonces) == len(blobs)

        restored = Enclave(identity, 1 << 20)
        restored.unseal(blobs[0])
        assert restored.probe(fingerprint_of(b"a"))

    async def test_exhausted_pools_are_reported(self, cloud, cloud_config):
        """Pools drained by issuing show up once in the next report."""
        identity = EnclaveIdentity("edge-0")
        enclave = Enclave(identity, 1 << 20)
        enclave.connect(cloud.attach_edge(identity))
        chunk = CipherChunk(random_bytes(1, 256))
        fp = chunk.fingerprint()
        await cloud.store_chunks([(fp, chunk)])
        response = await cloud.pool_request(PoolRequest(edge_id="edge-0", chunks=(fp,)))
        enclave.apply_sealed(response.sealed)
        for _ in range(cloud_config.pow.pool_depth):
            enclave.issue(PowLevel.CHUNK, fp)
        assert not enclave.has_pool(PowLevel.CHUNK, fp)
        (key,) = enclave.take_exhausted()
        assert key.key == fp
        assert enclave.take_exhausted() == ()
