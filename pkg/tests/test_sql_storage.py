"""Test suite for the SQLAlchemy chunk store (SQLAlchemyChunkStore)."""

import os
from typing import Any

import pytest

pytest.importorskip("sqlalchemy")
pytest.importorskip("aiosqlite")

from sqlalchemy.ext.asyncio import create_async_engine
from sqlalchemy.pool import StaticPool

from edge_dedup.cloud import CloudServer
from edge_dedup.storage import ChunkRef, ChunkStoreBackend, IndexEntry, SQLAlchemyChunkStore
from edge_dedup.types import CipherChunk, FileRecipe, StorageError, fingerprint_of

SQLITE_MEMORY_URL = "sqlite+aiosqlite:///:memory:"


def _backend_params() -> list[Any]:
    """Backends to run the suite against.

    SQLite (in-memory) always runs. PostgreSQL is added, and marked
    ``integration``, when ``EDGE_DEDUP_TEST_POSTGRES_URL`` points at a
    reachable async database.
    """
    params = [pytest.param(SQLITE_MEMORY_URL, id="sqlite")]
    postgres_url = os.environ.get("EDGE_DEDUP_TEST_POSTGRES_URL")
    if postgres_url:
        params.append(pytest.param(postgres_url, id="postgres", marks=pytest.mark.integration))
    return params


class TestSQLAlchemyChunkStore:
    """Behavioral suite for the SQL backend, run against every configured database."""

    @pytest.fixture(params=_backend_params())
    async def store(self, request):
        """Provide a fresh, schema-initialized store; tables are dropped on teardown."""
        store = SQLAlchemyChunkStore(database_url=request.param, table_prefix="dedup_test")
        await store.create_schema()
        await store.clear()
        yield store
        try:
            if not store.is_closed:
                await store.drop_schema()
        finally:
            await store.close()

    async def test_append_and_read(self, store):
        """Chunks come back through their reference."""
        ref = await store.append_chunk(b"ciphertext")
        assert ref.length == len(b"ciphertext")
        assert await store.read_chunk(ref) == b"ciphertext"

    async def test_read_unknown_reference(self, store):
        """A reference to no row raises StorageError."""
        with pytest.raises(StorageError):
            await store.read_chunk(ChunkRef(10_000, 3))

    async def test_index_upsert(self, store):
        """index_put inserts, then replaces, a single row."""
        fp = fingerprint_of(b"a")
        ref = await store.append_chunk(b"a")
        await store.index_put(fp, IndexEntry(ref, 1))
        await store.index_put(fp, IndexEntry(ref, 4))
        assert await store.index_get(fp) == IndexEntry(ref, 4)
        assert await store.index_size() == 1

    async def test_fallback_upsert_for_unsupported_dialect(self, store, monkeypatch):
        """Without a native UPSERT index_put deletes then inserts."""
        monkeypatch.setattr(store._engine.dialect, "name", "oracle")
        fp = fingerprint_of(b"a")
        ref = await store.append_chunk(b"a")
        await store.index_put(fp, IndexEntry(ref, 1))
        await store.index_put(fp, IndexEntry(ref, 2))
        assert await store.index_get(fp) == IndexEntry(ref, 2)
        assert await store.index_size() == 1

    async def test_index_delete_and_contains(self, store):
        """Deleted fingerprints leave the membership set."""
        a, b = fingerprint_of(b"a"), fingerprint_of(b"b")
        await store.index_put(a, IndexEntry(await store.append_chunk(b"a"), 1))
        await store.index_put(b, IndexEntry(await store.append_chunk(b"b"), 1))
        assert await store.index_delete(a) is True
        assert await store.index_delete(a) is False
        assert await store.index_contains([a, b]) == {b}

    async def test_stored_bytes(self, store):
        """stored_bytes sums the lengths of indexed chunks."""
        for payload in (b"aa", b"bbb"):
            ref = await store.append_chunk(payload)
            await store.index_put(fingerprint_of(payload), IndexEntry(ref, 1))
        assert await store.stored_bytes() == 5

    async def test_recipes(self, store):
        """Recipes round trip through the canonical framing."""
        a, b = fingerprint_of(b"a"), fingerprint_of(b"b")
        recipe = FileRecipe.build(fingerprint_of(b"ab"), [(a, 1), (b, 1), (a, 1)])
        await store.put_recipe(recipe)
        await store.put_recipe(recipe)
        assert await store.get_recipe(recipe.file_hash) == recipe
        assert await store.recipe_hashes() == [recipe.file_hash]
        assert await store.delete_recipe(recipe.file_hash) is True
        assert await store.get_recipe(recipe.file_hash) is None

    async def test_clear(self, store):
        """clear empties every table."""
        fp = fingerprint_of(b"a")
        await store.index_put(fp, IndexEntry(await store.append_chunk(b"a"), 1))
        await store.clear()
        assert await store.index_size() == 0
        assert await store.stored_bytes() == 0

    async def test_cloud_over_sql(self, store):
        """The cloud stores and restores through the SQL backend."""
        cloud = CloudServer(store)
        chunk = CipherChunk(b"c" * 64)
        fp = chunk.fingerprint()
        await cloud.store_chunks([(fp, chunk)])
        recipe = FileRecipe.build(fingerprint_of(b"file"), [(fp, chunk.plain_length)])
        await cloud.store_recipe(recipe, uploaded=[fp])
        restored, chunks = await cloud.restore_file(recipe.file_hash)
        assert restored == recipe
        assert chunks == [chunk]

    async def test_create_schema_is_idempotent(self, store):
        """create_schema can be called repeatedly without error."""
        await store.create_schema()
        await store.create_schema()
        assert await store.index_size() == 0

    async def test_operations_after_close_raise(self, store):
        """Any operation after close() raises RuntimeError."""
        await store.close()
        assert store.is_closed is True
        with pytest.raises(RuntimeError, match="closed"):
            await store.append_chunk(b"x")

    async def test_requires_database_url_or_engine(self):
        """Constructing with neither database_url nor engine raises ValueError."""
        with pytest.raises(ValueError, match="database_url"):
            SQLAlchemyChunkStore()

    async def test_accepts_existing_engine(self):
        """A borrowed engine is used but not disposed."""
        engine = create_async_engine(
            SQLITE_MEMORY_URL,
            poolclass=StaticPool,
            connect_args={"check_same_thread": False},
        )
        store = SQLAlchemyChunkStore(engine=engine)
        try:
            await store.create_schema()
            ref = await store.append_chunk(b"x")
            assert await store.read_chunk(ref) == b"x"
        finally:
            await store.close()
            await engine.dispose()

    def test_is_a_chunk_store_backend(self):
        """SQLAlchemyChunkStore satisfies the runtime-checkable protocol."""
        store = SQLAlchemyChunkStore(database_url=SQLITE_MEMORY_URL)
        assert isinstance(store, ChunkStoreBackend)
