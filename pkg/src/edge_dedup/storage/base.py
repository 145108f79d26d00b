"""Chunk-store backend interface and abstract base class.

The cloud persists three things through a backend: an append-only log of
ciphertext chunks, the full fingerprint index (storage reference plus
reference count) and file recipes. Backends are pluggable (memory, SQL).
"""

from abc import ABC, abstractmethod
from collections.abc import Sequence
from typing import Any, NamedTuple, Protocol, runtime_checkable

from edge_dedup.types import FileRecipe, Fingerprint


class ChunkRef(NamedTuple):
    """Location of a chunk in the log: backend-specific offset plus length."""

    offset: int
    length: int


class IndexEntry(NamedTuple):
    """Full-index record of one stored chunk."""

    ref: ChunkRef
    refcount: int


@runtime_checkable
class ChunkStoreBackend(Protocol):
    """Protocol defining the interface for chunk-store backends.

    Example:
        >>> class MyStore:
        ...     async def append_chunk(self, data: bytes) -> ChunkRef:
        ...         ...
        ...     async def read_chunk(self, ref: ChunkRef) -> bytes:
        ...         ...
    """

    async def append_chunk(self, data: bytes) -> ChunkRef:
        """Append ciphertext bytes to the chunk log.

        Args:
            data: Ciphertext chunk bytes

        Returns:
            Reference to the stored bytes

        Raises:
            StorageError: If the write fails
        """
        ...

    async def read_chunk(self, ref: ChunkRef) -> bytes:
        """Read the bytes behind ``ref``.

        Raises:
            StorageError: If the reference is invalid or the read fails
        """
        ...

    async def index_get(self, fp: Fingerprint) -> IndexEntry | None:
        """Look up one fingerprint in the full index."""
        ...

    async def index_put(self, fp: Fingerprint, entry: IndexEntry) -> None:
        """Insert or replace the index entry of ``fp``."""
        ...

    async def index_delete(self, fp: Fingerprint) -> bool:
        """Remove ``fp`` from the index; returns False if it was absent."""
        ...

    async def index_contains(self, fps: Sequence[Fingerprint]) -> set[Fingerprint]:
        """Return the subset of ``fps`` present in the index."""
        ...

    async def index_size(self) -> int:
        """Number of indexed fingerprints."""
        ...

    async def stored_bytes(self) -> int:
        """Total bytes of the chunks the index references."""
        ...

    async def put_recipe(self, recipe: FileRecipe) -> None:
        """Insert or replace the recipe of ``recipe.file_hash``."""
        ...

    async def get_recipe(self, file_hash: Fingerprint) -> FileRecipe | None:
        """Fetch a recipe, or None if unknown."""
        ...

    async def delete_recipe(self, file_hash: Fingerprint) -> bool:
        """Remove a recipe; returns False if it was absent."""
        ...

    async def recipe_hashes(self) -> list[Fingerprint]:
        """File hashes of all stored recipes, sorted."""
        ...

    async def clear(self) -> None:
        """Delete ALL chunks, index entries and recipes."""
        ...

    async def close(self) -> None:
        """Release backend resources."""
        ...


class BaseChunkStore(ABC):
    """Abstract base class for chunk stores with the closed-state guard."""

    def __init__(self) -> None:
        self._closed = False

    @abstractmethod
    async def append_chunk(self, data: bytes) -> ChunkRef:
        """Append ciphertext bytes to the chunk log."""

    @abstractmethod
    async def read_chunk(self, ref: ChunkRef) -> bytes:
        """Read the bytes behind ``ref``."""

    @abstractmethod
    async def index_get(self, fp: Fingerprint) -> IndexEntry | None:
        """Look up one fingerprint."""

    @abstractmethod
    async def index_put(self, fp: Fingerprint, entry: IndexEntry) -> None:
        """Insert or replace an index entry."""

    @abstractmethod
    async def index_delete(self, fp: Fingerprint) -> bool:
        """Remove an index entry."""

    async def index_contains(self, fps: Sequence[Fingerprint]) -> set[Fingerprint]:
        """Membership of a batch (default: one lookup per fingerprint)."""
        return {fp for fp in fps if await self.index_get(fp) is not None}

    @abstractmethod
    async def index_size(self) -> int:
        """Number of indexed fingerprints."""

    @abstractmethod
    async def stored_bytes(self) -> int:
        """Total bytes of indexed chunks."""

    @abstractmethod
    async def put_recipe(self, recipe: FileRecipe) -> None:
        """Store a recipe."""

    @abstractmethod
    async def get_recipe(self, file_hash: Fingerprint) -> FileRecipe | None:
        """Fetch a recipe."""

    @abstractmethod
    async def delete_recipe(self, file_hash: Fingerprint) -> bool:
        """Remove a recipe."""

    @abstractmethod
    async def recipe_hashes(self) -> list[Fingerprint]:
        """Sorted file hashes of all recipes."""

    @abstractmethod
    async def clear(self) -> None:
        """Clear all stored data."""

    async def close(self) -> None:
        """Close the store. Override if the backend holds resources."""
        self._closed = True

    @property
    def is_closed(self) -> bool:
        """Check if the store is closed."""
        return self._closed

    def _ensure_open(self) -> None:
        """Ensure the store is not closed.

        Raises:
            RuntimeError: If the store is closed
        """
        if self._closed:
            raise RuntimeError(f"{self.__class__.__name__} is closed")

    async def __aenter__(self) -> "BaseChunkStore":
        """Async context manager entry."""
        return self

    async def __aexit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        """Async context manager exit."""
        await self.close()
