"""Async SQL chunk store built on SQLAlchemy 2.0 Core.

Three tables hold the chunk log, the full index and the recipes. Chunk
references are primary keys of the log table. One code path serves SQLite and
PostgreSQL; only the index UPSERT branches on the dialect.

Install the optional dependencies with::

    pip install "edge-dedup[sql]"

Example:
    >>> store = SQLAlchemyChunkStore(database_url="sqlite+aiosqlite:///:memory:")
    >>> await store.create_schema()
    >>> ref = await store.append_chunk(b"ciphertext")
    >>> await store.read_chunk(ref)
    b'ciphertext'
    >>> await store.close()
"""

from collections.abc import Sequence
from typing import Any

from sqlalchemy import (
    BigInteger,
    Column,
    Integer,
    LargeBinary,
    MetaData,
    Table,
    delete,
    func,
    select,
)
from sqlalchemy.dialects.postgresql import insert as pg_insert
from sqlalchemy.dialects.sqlite import insert as sqlite_insert
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.ext.asyncio import AsyncEngine, create_async_engine
from sqlalchemy.pool import StaticPool

from edge_dedup.encoding import decode_recipe, encode_recipe
from edge_dedup.storage.base import BaseChunkStore, ChunkRef, IndexEntry
from edge_dedup.types import DecodingError, FileRecipe, Fingerprint, StorageError


class SQLAlchemyChunkStore(BaseChunkStore):
    """Async SQL chunk store using SQLAlchemy 2.0 Core.

    Engine ownership:
        If constructed from a ``database_url`` the store creates and OWNS the
        engine and disposes it on :meth:`close`. If an existing ``engine`` is
        supplied the store BORROWS it and never disposes it.
    """

    def __init__(
        self,
        database_url: str | None = None,
        *,
        engine: AsyncEngine | None = None,
        table_prefix: str = "dedup",
        schema: str | None = None,
    ) -> None:
        """Initialize the SQL chunk store.

        Exactly one of ``database_url`` or ``engine`` must be supplied.

        Args:
            database_url: An async SQLAlchemy URL such as
                ``"sqlite+aiosqlite:///:memory:"``; the engine is owned
            engine: An existing engine to borrow
            table_prefix: Prefix of the three table names
            schema: Optional database schema for the tables

        Raises:
            ValueError: If neither or both of ``database_url`` and ``engine``
                are provided.
        """
        super().__init__()

        if (database_url is None) == (engine is None):
            msg = (
                "Exactly one of 'database_url' or 'engine' must be provided (got both or neither)."
            )
            raise ValueError(msg)

        self._owns_engine: bool
        self._engine: AsyncEngine
        if database_url is not None:
            self._engine = self._create_engine(database_url)
            self._owns_engine = True
        else:
            assert engine is not None
            self._engine = engine
            self._owns_engine = False

        self._metadata = MetaData()
        self._chunks = Table(
            f"{table_prefix}_chunks",
            self._metadata,
            Column("id", Integer, primary_key=True, autoincrement=True),
            Column("data", LargeBinary, nullable=False),
            schema=schema,
        )
        self._index = Table(
            f"{table_prefix}_index",
            self._metadata,
            Column("fp", LargeBinary(32), primary_key=True),
            Column("chunk_id", Integer, nullable=False),
            Column("length", BigInteger, nullable=False),
            Column("refcount", BigInteger, nullable=False),
            schema=schema,
        )
        self._recipes = Table(
            f"{table_prefix}_recipes",
            self._metadata,
            Column("file_hash", LargeBinary(32), primary_key=True),
            Column("body", LargeBinary, nullable=False),
            schema=schema,
        )

    @staticmethod
    def _create_engine(database_url: str) -> AsyncEngine:
        """Create an owned async engine.

        In-memory SQLite needs a :class:`~sqlalchemy.pool.StaticPool` so the
        single connection (and its data) survives across operations.
        """
        if ":memory:" in database_url:
            return create_async_engine(
                database_url,
                poolclass=StaticPool,
                connect_args={"check_same_thread": False},
            )
        return create_async_engine(database_url)

    async def create_schema(self) -> None:
        """Create the tables if they do not exist (idempotent).

        Raises:
            RuntimeError: If the store is closed.
            StorageError: If the DDL operation fails.
        """
        self._ensure_open()
        try:
            async with self._engine.begin() as conn:
                await conn.run_sync(self._metadata.create_all, checkfirst=True)
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to create schema: {exc}") from exc

    async def drop_schema(self) -> None:
        """Drop the tables if they exist (idempotent)."""
        self._ensure_open()
        try:
            async with self._engine.begin() as conn:
                await conn.run_sync(self._metadata.drop_all, checkfirst=True)
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to drop schema: {exc}") from exc

    async def append_chunk(self, data: bytes) -> ChunkRef:
        self._ensure_open()
        try:
            async with self._engine.begin() as conn:
                result = await conn.execute(self._chunks.insert().values(data=data))
                key = result.inserted_primary_key
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to append chunk: {exc}") from exc
        assert key is not None
        return ChunkRef(int(key[0]), len(data))

    async def read_chunk(self, ref: ChunkRef) -> bytes:
        self._ensure_open()
        stmt = select(self._chunks.c.data).where(self._chunks.c.id == ref.offset)
        try:
            async with self._engine.connect() as conn:
                data = (await conn.execute(stmt)).scalar_one_or_none()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to read chunk {ref.offset}: {exc}") from exc
        if data is None:
            raise StorageError(f"Chunk {ref.offset} is not in the log")
        return bytes(data)

    async def index_get(self, fp: Fingerprint) -> IndexEntry | None:
        self._ensure_open()
        c = self._index.c
        stmt = select(c.chunk_id, c.length, c.refcount).where(c.fp == bytes(fp))
        try:
            async with self._engine.connect() as conn:
                row = (await conn.execute(stmt)).one_or_none()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to read index entry {fp.short()}: {exc}") from exc
        if row is None:
            return None
        return IndexEntry(ChunkRef(int(row.chunk_id), int(row.length)), int(row.refcount))

    def _build_upsert(self, values: dict[str, Any]) -> Any:
        """Dialect UPSERT for the index, or None when DELETE-then-INSERT is needed."""
        dialect = self._engine.dialect.name
        if dialect in ("postgresql", "sqlite"):
            insert = pg_insert if dialect == "postgresql" else sqlite_insert
            stmt = insert(self._index).values(**values)
            return stmt.on_conflict_do_update(
                index_elements=[self._index.c.fp],
                set_={
                    "chunk_id": stmt.excluded.chunk_id,
                    "length": stmt.excluded.length,
                    "refcount": stmt.excluded.refcount,
                },
            )
        return None

    async def index_put(self, fp: Fingerprint, entry: IndexEntry) -> None:
        self._ensure_open()
        values = {
            "fp": bytes(fp),
            "chunk_id": entry.ref.offset,
            "length": entry.ref.length,
            "refcount": entry.refcount,
        }
        try:
            stmt = self._build_upsert(values)
            async with self._engine.begin() as conn:
                if stmt is None:
                    await conn.execute(delete(self._index).where(self._index.c.fp == bytes(fp)))
                    await conn.execute(self._index.insert().values(**values))
                else:
                    await conn.execute(stmt)
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to write index entry {fp.short()}: {exc}") from exc

    async def index_delete(self, fp: Fingerprint) -> bool:
        self._ensure_open()
        try:
            async with self._engine.begin() as conn:
                result = await conn.execute(
                    delete(self._index).where(self._index.c.fp == bytes(fp))
                )
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to delete index entry {fp.short()}: {exc}") from exc
        return result.rowcount > 0

    async def index_contains(self, fps: Sequence[Fingerprint]) -> set[Fingerprint]:
        self._ensure_open()
        if not fps:
            return set()
        wanted = {bytes(fp): fp for fp in fps}
        stmt = select(self._index.c.fp).where(self._index.c.fp.in_(list(wanted)))
        try:
            async with self._engine.connect() as conn:
                rows = (await conn.execute(stmt)).scalars().all()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to query index membership: {exc}") from exc
        return {wanted[bytes(raw)] for raw in rows}

    async def index_size(self) -> int:
        self._ensure_open()
        try:
            async with self._engine.connect() as conn:
                result = await conn.execute(select(func.count()).select_from(self._index))
                count = result.scalar_one()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to count index entries: {exc}") from exc
        return int(count)

    async def stored_bytes(self) -> int:
        self._ensure_open()
        stmt = select(func.coalesce(func.sum(self._index.c.length), 0))
        try:
            async with self._engine.connect() as conn:
                total = (await conn.execute(stmt)).scalar_one()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to sum stored bytes: {exc}") from exc
        return int(total)

    async def put_recipe(self, recipe: FileRecipe) -> None:
        self._ensure_open()
        key = bytes(recipe.file_hash)
        try:
            async with self._engine.begin() as conn:
                await conn.execute(delete(self._recipes).where(self._recipes.c.file_hash == key))
                await conn.execute(
                    self._recipes.insert().values(file_hash=key, body=encode_recipe(recipe))
                )
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to store recipe {recipe.file_hash.short()}: {exc}") from exc

    async def get_recipe(self, file_hash: Fingerprint) -> FileRecipe | None:
        self._ensure_open()
        stmt = select(self._recipes.c.body).where(self._recipes.c.file_hash == bytes(file_hash))
        try:
            async with self._engine.connect() as conn:
                body = (await conn.execute(stmt)).scalar_one_or_none()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to read recipe {file_hash.short()}: {exc}") from exc
        if body is None:
            return None
        try:
            return decode_recipe(bytes(body))
        except DecodingError as exc:
            raise StorageError(f"Recipe {file_hash.short()} is corrupt: {exc}") from exc

    async def delete_recipe(self, file_hash: Fingerprint) -> bool:
        self._ensure_open()
        try:
            async with self._engine.begin() as conn:
                result = await conn.execute(
                    delete(self._recipes).where(self._recipes.c.file_hash == bytes(file_hash))
                )
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to delete recipe {file_hash.short()}: {exc}") from exc
        return result.rowcount > 0

    async def recipe_hashes(self) -> list[Fingerprint]:
        self._ensure_open()
        stmt = select(self._recipes.c.file_hash).order_by(self._recipes.c.file_hash)
        try:
            async with self._engine.connect() as conn:
                rows = (await conn.execute(stmt)).scalars().all()
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to list recipes: {exc}") from exc
        return [Fingerprint(bytes(raw)) for raw in rows]

    async def clear(self) -> None:
        """Delete every row of the three tables.

        Raises:
            RuntimeError: If the store is closed.
            StorageError: If the delete fails.
        """
        self._ensure_open()
        try:
            async with self._engine.begin() as conn:
                await conn.execute(delete(self._index))
                await conn.execute(delete(self._recipes))
                await conn.execute(delete(self._chunks))
        except SQLAlchemyError as exc:
            raise StorageError(f"Failed to clear chunk store: {exc}") from exc

    async def close(self) -> None:
        """Close the store, disposing the engine only if it is owned."""
        if self._closed:
            return
        if self._owns_engine:
            await self._engine.dispose()
        await super().close()
