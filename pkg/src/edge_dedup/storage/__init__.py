"""Chunk-store backends for the cloud's chunk log, full index and recipes."""

from typing import TYPE_CHECKING, Any

from edge_dedup.storage.base import BaseChunkStore, ChunkRef, ChunkStoreBackend, IndexEntry
from edge_dedup.storage.memory import MemoryChunkStore

if TYPE_CHECKING:
    from edge_dedup.storage.sqlalchemy import SQLAlchemyChunkStore

__all__ = [
    "BaseChunkStore",
    "ChunkRef",
    "ChunkStoreBackend",
    "IndexEntry",
    "MemoryChunkStore",
    "SQLAlchemyChunkStore",
]


def __getattr__(name: str) -> Any:
    if name == "SQLAlchemyChunkStore":
        try:
            from edge_dedup.storage.sqlalchemy import SQLAlchemyChunkStore
        except ImportError as exc:  # pragma: no cover
            msg = (
                "SQLAlchemyChunkStore requires the 'sql' extra. "
                "Install it with: pip install 'edge-dedup[sql]'"
            )
            raise ImportError(msg) from exc
        return SQLAlchemyChunkStore
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
