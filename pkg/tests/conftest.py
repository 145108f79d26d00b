"""Pytest configuration and fixtures."""

import pytest

from edge_dedup.chunking import ChunkerConfig
from edge_dedup.cloud import CloudConfig, CloudServer
from edge_dedup.crypto import KeyServer
from edge_dedup.pow import IssueLog, PowPolicy
from edge_dedup.simnet.clock import SimClock
from edge_dedup.simnet.network import CostMeter, LatencyModel, Network
from edge_dedup.storage import MemoryChunkStore
from edge_dedup.testing import random_bytes


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "unit: mark test as unit test")
    config.addinivalue_line("markers", "integration: mark test as integration test")
    config.addinivalue_line("markers", "slow: mark test as slow running")


@pytest.fixture
def small_chunker():
    """Chunker settings small enough for kilobyte-sized test files."""
    return ChunkerConfig.for_average(1024)


@pytest.fixture
def sample_data():
    """Provide 64 KiB of seeded random bytes."""
    return random_bytes(7, 64 << 10)


@pytest.fixture
def network():
    """Provide a jitter-free network on a fresh virtual clock."""
    return Network(LatencyModel(), SimClock())


@pytest.fixture
def meter():
    """Provide an empty cost meter."""
    return CostMeter()


@pytest.fixture
def key_server():
    """Provide a key server with a fixed global secret."""
    return KeyServer.from_seed(1)


@pytest.fixture
def issue_log():
    """Provide a global challenge-issue audit log."""
    return IssueLog()


@pytest.fixture
def cloud_config():
    """Cloud settings with short responses and shallow pools."""
    return CloudConfig(
        share_coverage=0.5,
        min_candidates=64,
        pow=PowPolicy(bytes_per_bit=64, min_bits=32, max_bits=128, pool_depth=4),
        epoch_bytes=1 << 20,
    )


@pytest.fixture
def cloud(cloud_config, issue_log):
    """Provide a cloud server over an in-memory chunk store."""
    return CloudServer(MemoryChunkStore(), cloud_config, log=issue_log)


@pytest.fixture
def experiment_settings():
    """A four-snapshot experiment small enough to run in a unit test."""
    return {
        "name": "tiny",
        "seed": 5,
        "workload": {
            "base_size": 128 << 10,
            "snapshot_count": 4,
            "files_per_snapshot": 2,
            "mutation_rate": 0.3,
            "chunker": {"min_size": 512, "avg_size": 2048, "max_size": 8192},
        },
        "topology": {"clients": 2, "edges": 2},
        "cloud": {"min_candidates": 64},
        "edge": {"local_coverage": 0.5},
    }
