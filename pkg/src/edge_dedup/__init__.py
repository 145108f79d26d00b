"""
Edge Dedup - secure source-based deduplication offloaded to edge servers.

Clients encrypt chunks with server-aided message-locked encryption and upload
through an edge server. The edge server's simulated enclave holds a
cloud-selected share-index of hot fingerprints and pre-computed
proof-of-ownership pools, so most ownership proofs and duplicate checks finish
at edge latency instead of cloud latency.

Key Features:
    - FastCDC chunking and convergent AES-GCM encryption
    - Count-min sketch plus logical-locality share-index selection
    - Dual-level (file and chunk) pre-computed proofs of ownership with
      disjoint per-edge challenge pools
    - Tiered duplicate checks: local LRU index, enclave share-index, cloud
    - Deterministic virtual-time simulator with baseline modes
    - Pluggable async chunk stores (memory, SQLAlchemy)

Example:
    ```python
    from edge_dedup import CloudServer, EdgeServer, EdgeConfig, MemoryChunkStore

    cloud = CloudServer(MemoryChunkStore())
    edge = EdgeServer(EdgeConfig(edge_id="edge-0"), cloud, network)
    edge.attach()
    report = await client.upload(client.prepare_upload(data, meter), edge, meter)
    ```
"""

from importlib.metadata import PackageNotFoundError, version
from typing import TYPE_CHECKING, Any

from edge_dedup.baselines import (
    EnclaveBaselineGateway,
    SourceBaselineGateway,
    TargetBaselineGateway,
)
from edge_dedup.chunking import Chunker, ChunkerConfig
from edge_dedup.client import Client, ClientConfig, UploadPlan, UploadReport
from edge_dedup.cloud import CloudConfig, CloudServer, CloudVerdict
from edge_dedup.crypto import KeyServer, KeyServerConfig, decrypt_chunk, encrypt_chunk
from edge_dedup.edge import EdgeConfig, EdgeServer, refresh_epoch
from edge_dedup.gateway import DedupGateway, UploadSession
from edge_dedup.pow import PowLevel, PowPolicy, PowVerdict
from edge_dedup.sketch import CountMinSketch, SelectionScheme, Selector, SketchConfig
from edge_dedup.storage import ChunkStoreBackend, MemoryChunkStore
from edge_dedup.types import (
    CipherChunk,
    ConfigError,
    DecodingError,
    DedupError,
    FileRecipe,
    Fingerprint,
    PlainChunk,
    SessionAbortedError,
    StorageError,
    Tier,
    fingerprint_of,
)

if TYPE_CHECKING:
    from edge_dedup.storage import SQLAlchemyChunkStore

try:
    __version__ = version("edge-dedup")
except PackageNotFoundError:  # pragma: no cover - only when running from a non-installed tree
    __version__ = "0.0.0+unknown"

__license__ = "MIT"

__all__ = [
    "ChunkStoreBackend",
    "Chunker",
    "ChunkerConfig",
    "CipherChunk",
    "Client",
    "ClientConfig",
    "CloudConfig",
    "CloudServer",
    "CloudVerdict",
    "ConfigError",
    "CountMinSketch",
    "DecodingError",
    "DedupError",
    "DedupGateway",
    "EdgeConfig",
    "EdgeServer",
    "EnclaveBaselineGateway",
    "FileRecipe",
    "Fingerprint",
    "KeyServer",
    "KeyServerConfig",
    "MemoryChunkStore",
    "PlainChunk",
    "PowLevel",
    "PowPolicy",
    "PowVerdict",
    "SQLAlchemyChunkStore",
    "SelectionScheme",
    "Selector",
    "SessionAbortedError",
    "SketchConfig",
    "SourceBaselineGateway",
    "StorageError",
    "TargetBaselineGateway",
    "Tier",
    "UploadPlan",
    "UploadReport",
    "UploadSession",
    "decrypt_chunk",
    "encrypt_chunk",
    "fingerprint_of",
    "refresh_epoch",
]


def __getattr__(name: str) -> Any:
    if name == "SQLAlchemyChunkStore":
        try:
            from edge_dedup.storage import SQLAlchemyChunkStore
        except ImportError as exc:  # pragma: no cover
            msg = (
                "SQLAlchemyChunkStore requires the 'sql' extra. "
                "Install it with: pip install 'edge-dedup[sql]'"
            )
            raise ImportError(msg) from exc
        return SQLAlchemyChunkStore
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
