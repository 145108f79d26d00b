"""Content-defined chunking with FastCDC.

Boundaries come from a gear rolling hash with normalized chunking: a stricter
mask before the average size and a looser one after it, clamped by the
minimum and maximum chunk sizes. Hashing restarts at every boundary and skips
the first ``min_size`` bytes, so boundaries depend only on local content.

The scan is vectorized with numpy. A gear hash only remembers the last 64
bytes, so once a chunk has hashed 64 bytes its hash equals a whole-buffer
64-byte window sum; only the first 63 hashed positions of each chunk are
computed one byte at a time.
"""

import functools
import hashlib
import hmac
import logging
from typing import Self

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from edge_dedup.encoding import le64
from edge_dedup.types import EmptyDataError, PlainChunk

logger = logging.getLogger(__name__)

_M64 = (1 << 64) - 1
_WINDOW = 64

U64Array = npt.NDArray[np.uint64]


class ChunkerConfig(BaseModel):
    """Chunk size bounds and the gear-table seed.

    Attributes:
        min_size: Smallest chunk the chunker emits (except a short final chunk)
        avg_size: Target average size; must be a power of two
        max_size: Largest chunk the chunker emits
        gear_seed: Seed of the gear table

    Example:
        >>> cfg = ChunkerConfig.for_average(8192)
        >>> (cfg.min_size, cfg.max_size)
        (2048, 32768)
    """

    model_config = ConfigDict(frozen=True)

    min_size: int = Field(default=4096, ge=16, description="Minimum chunk size in bytes")
    avg_size: int = Field(default=16384, ge=64, description="Average chunk size in bytes")
    max_size: int = Field(default=65536, description="Maximum chunk size in bytes")
    gear_seed: int = Field(default=0, ge=0, lt=1 << 64, description="Gear table seed")

    @model_validator(mode="after")
    def validate_sizes(self) -> "ChunkerConfig":
        """Ensure min < avg < max and that avg is a power of two."""
        if not self.min_size < self.avg_size < self.max_size:
            raise ValueError(
                f"Expected min_size < avg_size < max_size, got "
                f"{self.min_size}/{self.avg_size}/{self.max_size}"
            )
        if self.avg_size & (self.avg_size - 1):
            raise ValueError(f"avg_size must be a power of two, got {self.avg_size}")
        return self

    @classmethod
    def for_average(cls, avg_size: int, *, gear_seed: int = 0) -> Self:
        """Build a config with min = avg/4 and max = avg*4."""
        return cls(
            min_size=avg_size // 4,
            avg_size=avg_size,
            max_size=avg_size * 4,
            gear_seed=gear_seed,
        )

    @property
    def mask_bits(self) -> int:
        return self.avg_size.bit_length() - 1

    @property
    def mask_small(self) -> int:
        """Mask used below the average size (harder to match)."""
        return _high_mask(self.mask_bits + 2)

    @property
    def mask_large(self) -> int:
        """Mask used past the average size (easier to match)."""
        return _high_mask(max(1, self.mask_bits - 2))


def _high_mask(ones: int) -> int:
    return ((1 << ones) - 1) << (64 - ones)


@functools.cache
def gear_table(seed: int) -> tuple[int, ...]:
    """Return the 256-entry gear table for ``seed``.

    Entry ``i`` is the first 8 bytes (little-endian) of
    HMAC-SHA256(LE64(seed), LE64(i)).
    """
    key = le64(seed)
    return tuple(
        int.from_bytes(hmac.new(key, le64(i), hashlib.sha256).digest()[:8], "little")
        for i in range(256)
    )


@functools.cache
def _gear_array(seed: int) -> U64Array:
    table = np.array(gear_table(seed), dtype=np.uint64)
    table.setflags(write=False)
    return table


def _window_hashes(data: bytes, gear: U64Array) -> U64Array:
    """Gear hash of the (up to) 64-byte window ending at every offset."""
    g = gear[np.frombuffer(data, dtype=np.uint8)]
    n = g.shape[0]
    out = g.copy()
    for k in range(1, min(_WINDOW, n)):
        out[k:] += g[: n - k] << np.uint64(k)
    return out


class Chunker:
    """FastCDC chunker bound to one configuration.

    Example:
        >>> chunker = Chunker(ChunkerConfig.for_average(4096))
        >>> chunks = chunker.chunk(data)
        >>> b"".join(c.data for c in chunks) == data
        True
    """

    def __init__(self, config: ChunkerConfig | None = None) -> None:
        self.config = config or ChunkerConfig()
        self._gear = gear_table(self.config.gear_seed)
        self._gear_np = _gear_array(self.config.gear_seed)
        self._mask_s = self.config.mask_small
        self._mask_l = self.config.mask_large

    def cut_points(self, data: bytes) -> list[int]:
        """Return the end offset of every chunk in ``data``.

        Raises:
            EmptyDataError: If ``data`` is empty
        """
        if not data:
            raise EmptyDataError("Cannot chunk empty data")
        windows = _window_hashes(data, self._gear_np) if len(data) > self.config.min_size else None
        cuts: list[int] = []
        start = 0
        while start < len(data):
            start = self._next_cut(data, windows, start)
            cuts.append(start)
        return cuts

    def _next_cut(self, data: bytes, windows: U64Array | None, start: int) -> int:
        cfg = self.config
        end = len(data)
        if end - start <= cfg.min_size or windows is None:
            return end
        limit = start + min(end - start, cfg.max_size)
        normal = start + min(cfg.avg_size, limit - start)

        i = start + cfg.min_size
        warm = min(i + _WINDOW - 1, limit)
        fp = 0
        gear = self._gear
        while i < warm:
            fp = ((fp << 1) + gear[data[i]]) & _M64
            if not fp & (self._mask_s if i < normal else self._mask_l):
                return i + 1
            i += 1

        if i < normal:
            hits = np.flatnonzero((windows[i:normal] & np.uint64(self._mask_s)) == 0)
            if hits.size:
                return i + int(hits[0]) + 1
            i = normal
        if i < limit:
            hits = np.flatnonzero((windows[i:limit] & np.uint64(self._mask_l)) == 0)
            if hits.size:
                return i + int(hits[0]) + 1
        return limit

    def chunk(self, data: bytes) -> list[PlainChunk]:
        """Split ``data`` into plaintext chunks whose concatenation is ``data``."""
        chunks: list[PlainChunk] = []
        start = 0
        for cut in self.cut_points(data):
            chunks.append(PlainChunk(data[start:cut]))
            start = cut
        logger.debug(f"Chunked {len(data)} bytes into {len(chunks)} chunks")
        return chunks


def chunk_stream(data: bytes, config: ChunkerConfig | None = None) -> list[PlainChunk]:
    """Chunk ``data`` with a fresh :class:`Chunker`.

    Args:
        data: Non-empty byte sequence
        config: Chunker configuration (defaults to 4/16/64 KiB)

    Returns:
        Ordered chunks; every chunk except possibly the last is within
        ``[min_size, max_size]``

    Raises:
        EmptyDataError: If ``data`` is empty
    """
    return Chunker(config).chunk(data)
