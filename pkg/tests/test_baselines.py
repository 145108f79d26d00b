"""Tests for the comparison upload paths."""

import pytest

from edge_dedup.baselines import (
    EnclaveBaselineGateway,
    SourceBaselineGateway,
    TargetBaselineGateway,
)
from edge_dedup.client import Client, ClientConfig
from edge_dedup.gateway import DedupGateway
from edge_dedup.pow import PowVerdict
from edge_dedup.simnet.network import CostMeter, Phase
from edge_dedup.testing import random_bytes, wrong_data_responder
from edge_dedup.types import SessionAbortedError, Tier


@pytest.fixture
def make_client(small_chunker, key_server, network):
    def build(client_id: str) -> Client:
        return Client(ClientConfig(client_id=client_id, chunker=small_chunker), key_server, network)

    return build


async def upload(client, gateway, data):
    meter = CostMeter()
    plan = client.prepare_upload(data, meter)
    return await client.upload(plan, gateway, meter), meter


@pytest.mark.parametrize(
    "gateway_cls", [SourceBaselineGateway, EnclaveBaselineGateway, TargetBaselineGateway]
)
def test_baselines_are_gateways(gateway_cls, cloud, network):
    """Every baseline satisfies the gateway protocol."""
    assert isinstance(gateway_cls(cloud, network), DedupGateway)


class TestSourceBaseline:
    """Tests for cloud-generated real-time proofs."""

    async def test_first_upload_unique_second_duplicate(
        self, cloud, network, make_client, sample_data
    ):
        """A stored file is proven at file level and checked at the cloud."""
        gateway = SourceBaselineGateway(cloud, network)
        first, _ = await upload(make_client("alice"), gateway, sample_data)
        assert set(first.tiers) == {Tier.UNIQUE}
        second, meter = await upload(make_client("bob"), gateway, sample_data)
        assert set(second.tiers) == {Tier.HIT_CLOUD}
        assert set(second.pow.values()) == {PowVerdict.VERIFIED}
        assert second.chunk_bytes_sent == 0
        assert meter[Phase.POW] > 0

    async def test_wrong_data_is_suspended(self, cloud, network, make_client, sample_data):
        """Answers computed from other bytes fail and suspend the client."""
        gateway = SourceBaselineGateway(cloud, network)
        await upload(make_client("alice"), gateway, sample_data)
        plan = make_client("mallory").prepare_upload(sample_data, CostMeter())
        session = await gateway.begin("mallory", plan.file_hash, plan.fingerprints, CostMeter())
        with pytest.raises(SessionAbortedError):
            await gateway.prove_ownership(session, wrong_data_responder(random_bytes(9, 4096)))
        with pytest.raises(SessionAbortedError):
            await gateway.begin("mallory", plan.file_hash, plan.fingerprints, CostMeter())


class TestEnclaveBaseline:
    """Tests for client-enclave proofs."""

    async def test_one_enclave_call_per_chunk(self, cloud, network, make_client, sample_data):
        """Every distinct chunk costs an enclave call and is verified."""
        gateway = EnclaveBaselineGateway(cloud, network)
        await upload(make_client("alice"), gateway, sample_data)
        report, meter = await upload(make_client("bob"), gateway, sample_data)
        assert set(report.pow.values()) == {PowVerdict.VERIFIED}
        assert set(report.tiers) == {Tier.HIT_CLOUD}
        assert meter.ecalls == len(set(report.pow))


class TestTargetBaseline:
    """Tests for upload-everything deduplication."""

    async def test_everything_is_sent_but_stored_once(
        self, cloud, network, make_client, sample_data
    ):
        """Both uploads send every chunk; the cloud keeps one copy."""
        gateway = TargetBaselineGateway(cloud, network)
        first, _ = await upload(make_client("alice"), gateway, sample_data)
        second, _ = await upload(make_client("bob"), gateway, sample_data)
        assert second.chunk_bytes_sent == first.chunk_bytes_sent > 0
        assert set(second.tiers) == {Tier.UNIQUE}
        assert await cloud.stored_bytes() == first.chunk_bytes_sent
