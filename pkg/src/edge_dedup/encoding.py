"""Canonical binary framing for recipes, fingerprint arrays and bit strings.

All integers are little-endian. The same framing is used on the wire (message
sizes feed the latency model) and on disk (chunk-store snapshots).

Recipe layout::

    file_hash (32 bytes) | count (u64) | count × (fingerprint (32 bytes) | length (u64))
"""

import struct
from collections.abc import Iterable

from edge_dedup.types import (
    FINGERPRINT_SIZE,
    BitString,
    DecodingError,
    FileRecipe,
    Fingerprint,
    RecipeEntry,
)

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def le64(value: int) -> bytes:
    """Encode an unsigned 64-bit integer little-endian."""
    return _U64.pack(value)


class FrameWriter:
    """Append-only builder for framed payloads.

    Example:
        >>> w = FrameWriter()
        >>> _ = w.u64(3).raw(b"abc")
        >>> w.getvalue()
        b'\\x03\\x00\\x00\\x00\\x00\\x00\\x00\\x00abc'
    """

    def __init__(self) -> None:
        self._parts: list[bytes] = []
        self._size = 0

    def _push(self, part: bytes) -> "FrameWriter":
        self._parts.append(part)
        self._size += len(part)
        return self

    def u8(self, value: int) -> "FrameWriter":
        return self._push(_U8.pack(value))

    def u32(self, value: int) -> "FrameWriter":
        return self._push(_U32.pack(value))

    def u64(self, value: int) -> "FrameWriter":
        return self._push(_U64.pack(value))

    def raw(self, data: bytes) -> "FrameWriter":
        return self._push(bytes(data))

    def blob(self, data: bytes) -> "FrameWriter":
        """Write a u32 length prefix followed by ``data``."""
        return self.u32(len(data)).raw(data)

    def fingerprint(self, fp: Fingerprint) -> "FrameWriter":
        return self._push(bytes(fp))

    def __len__(self) -> int:
        return self._size

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class FrameReader:
    """Cursor over a framed payload; every read checks bounds."""

    def __init__(self, data: bytes) -> None:
        self._view = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        end = self._pos + n
        if n < 0 or end > len(self._view):
            raise DecodingError(
                f"Truncated frame: wanted {n} bytes at offset {self._pos}, "
                f"have {len(self._view) - self._pos}"
            )
        chunk = self._view[self._pos : end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return int(_U8.unpack(self._take(1))[0])

    def u32(self) -> int:
        return int(_U32.unpack(self._take(4))[0])

    def u64(self) -> int:
        return int(_U64.unpack(self._take(8))[0])

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def blob(self) -> bytes:
        return self.raw(self.u32())

    def fingerprint(self) -> Fingerprint:
        return Fingerprint(self.raw(FINGERPRINT_SIZE))

    @property
    def remaining(self) -> int:
        return len(self._view) - self._pos

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodingError(f"{self.remaining} trailing bytes after frame")


def write_recipe(w: FrameWriter, recipe: FileRecipe) -> FrameWriter:
    w.fingerprint(recipe.file_hash).u64(len(recipe.entries))
    for entry in recipe.entries:
        w.fingerprint(entry.fingerprint).u64(entry.length)
    return w


def read_recipe(r: FrameReader) -> FileRecipe:
    file_hash = r.fingerprint()
    count = r.u64()
    if count * (FINGERPRINT_SIZE + 8) > r.remaining:
        raise DecodingError(f"Recipe claims {count} entries but frame is too short")
    entries = tuple(RecipeEntry(r.fingerprint(), r.u64()) for _ in range(count))
    return FileRecipe(file_hash, entries)


def encode_recipe(recipe: FileRecipe) -> bytes:
    """Serialize a recipe in the canonical framing."""
    return write_recipe(FrameWriter(), recipe).getvalue()


def decode_recipe(data: bytes) -> FileRecipe:
    """Parse a recipe produced by :func:`encode_recipe`.

    Raises:
        DecodingError: If the frame is truncated or has trailing bytes
    """
    r = FrameReader(data)
    recipe = read_recipe(r)
    r.expect_end()
    return recipe


def recipe_wire_size(recipe: FileRecipe) -> int:
    return FINGERPRINT_SIZE + 8 + len(recipe.entries) * (FINGERPRINT_SIZE + 8)


def write_fingerprints(w: FrameWriter, fps: Iterable[Fingerprint]) -> FrameWriter:
    """Write a fingerprint array sorted bytewise with a u64 count prefix."""
    ordered = sorted(set(fps))
    w.u64(len(ordered))
    for fp in ordered:
        w.fingerprint(fp)
    return w


def read_fingerprints(r: FrameReader) -> tuple[Fingerprint, ...]:
    count = r.u64()
    if count * FINGERPRINT_SIZE > r.remaining:
        raise DecodingError(f"Fingerprint array claims {count} entries but frame is too short")
    fps = tuple(r.fingerprint() for _ in range(count))
    if any(a >= b for a, b in zip(fps, fps[1:], strict=False)):
        raise DecodingError("Fingerprint array is not strictly sorted")
    return fps


def write_bits(w: FrameWriter, bits: BitString) -> FrameWriter:
    """Write a bit string as u32 bit length plus MSB-padded big-endian bytes."""
    return w.u32(bits.length).raw(bits.to_bytes())


def read_bits(r: FrameReader) -> BitString:
    length = r.u32()
    value = int.from_bytes(r.raw((length + 7) // 8), "big")
    try:
        return BitString(value, length)
    except ValueError as exc:
        raise DecodingError(f"Malformed bit string: {exc}") from exc


def bits_wire_size(bits: BitString | int) -> int:
    length = bits if isinstance(bits, int) else bits.length
    return 4 + (length + 7) // 8
