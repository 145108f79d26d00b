"""In-memory chunk store with snapshot files.

Chunks live in one append-only ``bytearray``; offsets into it are the chunk
references. :meth:`MemoryChunkStore.save` writes the log, an index snapshot
and the recipes to a directory in the canonical framing, and
:meth:`MemoryChunkStore.load` reads them back.
"""

import logging
from collections.abc import Sequence
from pathlib import Path

from edge_dedup.encoding import FrameReader, FrameWriter, read_recipe, write_recipe
from edge_dedup.storage.base import BaseChunkStore, ChunkRef, IndexEntry
from edge_dedup.types import DecodingError, FileRecipe, Fingerprint, StorageError

logger = logging.getLogger(__name__)

CHUNK_LOG = "chunks.log"
INDEX_SNAPSHOT = "index.bin"
RECIPE_SNAPSHOT = "recipes.bin"


class MemoryChunkStore(BaseChunkStore):
    """Chunk store backed by Python containers.

    Example:
        >>> store = MemoryChunkStore()
        >>> ref = await store.append_chunk(b"ciphertext")
        >>> await store.read_chunk(ref)
        b'ciphertext'

    Thread Safety:
        Not thread-safe. Within one event loop no method awaits between its
        reads and writes, so coroutines cannot interleave inside a call.
    """

    def __init__(self) -> None:
        super().__init__()
        self._log = bytearray()
        self._index: dict[Fingerprint, IndexEntry] = {}
        self._recipes: dict[Fingerprint, FileRecipe] = {}
        self._indexed_bytes = 0

    async def append_chunk(self, data: bytes) -> ChunkRef:
        self._ensure_open()
        ref = ChunkRef(len(self._log), len(data))
        self._log += data
        return ref

    async def read_chunk(self, ref: ChunkRef) -> bytes:
        self._ensure_open()
        if ref.offset < 0 or ref.offset + ref.length > len(self._log):
            raise StorageError(f"Chunk reference {ref} is outside the log")
        return bytes(self._log[ref.offset : ref.offset + ref.length])

    async def index_get(self, fp: Fingerprint) -> IndexEntry | None:
        self._ensure_open()
        return self._index.get(fp)

    async def index_put(self, fp: Fingerprint, entry: IndexEntry) -> None:
        self._ensure_open()
        previous = self._index.get(fp)
        if previous is not None:
            self._indexed_bytes -= previous.ref.length
        self._index[fp] = entry
        self._indexed_bytes += entry.ref.length

    async def index_delete(self, fp: Fingerprint) -> bool:
        self._ensure_open()
        entry = self._index.pop(fp, None)
        if entry is None:
            return False
        self._indexed_bytes -= entry.ref.length
        return True

    async def index_contains(self, fps: Sequence[Fingerprint]) -> set[Fingerprint]:
        self._ensure_open()
        return {fp for fp in fps if fp in self._index}

    async def index_size(self) -> int:
        self._ensure_open()
        return len(self._index)

    async def stored_bytes(self) -> int:
        self._ensure_open()
        return self._indexed_bytes

    async def put_recipe(self, recipe: FileRecipe) -> None:
        self._ensure_open()
        self._recipes[recipe.file_hash] = recipe

    async def get_recipe(self, file_hash: Fingerprint) -> FileRecipe | None:
        self._ensure_open()
        return self._recipes.get(file_hash)

    async def delete_recipe(self, file_hash: Fingerprint) -> bool:
        self._ensure_open()
        return self._recipes.pop(file_hash, None) is not None

    async def recipe_hashes(self) -> list[Fingerprint]:
        self._ensure_open()
        return sorted(self._recipes)

    async def clear(self) -> None:
        self._ensure_open()
        self._log.clear()
        self._index.clear()
        self._recipes.clear()
        self._indexed_bytes = 0

    @property
    def log_bytes(self) -> int:
        """Size of the chunk log, including chunks no longer indexed."""
        return len(self._log)

    async def save(self, directory: Path) -> None:
        """Write the chunk log, index snapshot and recipes to ``directory``.

        Raises:
            StorageError: If a file cannot be written
        """
        self._ensure_open()
        index = FrameWriter().u64(len(self._index))
        for fp in sorted(self._index):
            entry = self._index[fp]
            index.fingerprint(fp).u64(entry.ref.offset).u64(entry.ref.length).u64(entry.refcount)
        recipes = FrameWriter().u64(len(self._recipes))
        for file_hash in sorted(self._recipes):
            write_recipe(recipes, self._recipes[file_hash])
        try:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / CHUNK_LOG).write_bytes(bytes(self._log))
            (directory / INDEX_SNAPSHOT).write_bytes(index.getvalue())
            (directory / RECIPE_SNAPSHOT).write_bytes(recipes.getvalue())
        except OSError as exc:
            raise StorageError(f"Failed to save chunk store to {directory}: {exc}") from exc
        logger.info(
            f"Saved {len(self._index)} chunks and {len(self._recipes)} recipes to {directory}"
        )

    @classmethod
    async def load(cls, directory: Path) -> "MemoryChunkStore":
        """Rebuild a store from files written by :meth:`save`.

        Raises:
            StorageError: If a file is missing, unreadable or malformed
        """
        store = cls()
        try:
            store._log = bytearray((directory / CHUNK_LOG).read_bytes())
            index = FrameReader((directory / INDEX_SNAPSHOT).read_bytes())
            for _ in range(index.u64()):
                fp = index.fingerprint()
                ref = ChunkRef(index.u64(), index.u64())
                await store.index_put(fp, IndexEntry(ref, index.u64()))
            index.expect_end()
            recipes = FrameReader((directory / RECIPE_SNAPSHOT).read_bytes())
            for _ in range(recipes.u64()):
                recipe = read_recipe(recipes)
                store._recipes[recipe.file_hash] = recipe
            recipes.expect_end()
        except (OSError, DecodingError) as exc:
            raise StorageError(f"Failed to load chunk store from {directory}: {exc}") from exc
        for fp, entry in store._index.items():
            if entry.ref.offset + entry.ref.length > len(store._log):
                raise StorageError(f"Index entry {fp.short()} points past the chunk log")
        return store
