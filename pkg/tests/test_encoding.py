"""Test suite for the canonical binary framing."""

import pytest

from edge_dedup.encoding import (
    FrameReader,
    FrameWriter,
    bits_wire_size,
    decode_recipe,
    encode_recipe,
    le64,
    read_bits,
    read_fingerprints,
    recipe_wire_size,
    write_bits,
    write_fingerprints,
)
from edge_dedup.types import BitString, DecodingError, FileRecipe, Fingerprint, fingerprint_of


@pytest.fixture
def recipe():
    """A three-entry recipe with a repeated chunk."""
    a, b = fingerprint_of(b"a"), fingerprint_of(b"b")
    return FileRecipe.build(fingerprint_of(b"file"), [(a, 100), (b, 7), (a, 100)])


class TestFrames:
    """Tests for FrameWriter and FrameReader."""

    def test_little_endian_integers(self):
        """Integers are written little-endian."""
        assert le64(1) == b"\x01" + bytes(7)
        assert FrameWriter().u32(0x01020304).getvalue() == b"\x04\x03\x02\x01"

    def test_length_tracks_written_bytes(self):
        """len() equals the size of getvalue()."""
        w = FrameWriter().u8(1).u64(2).blob(b"xyz")
        assert len(w) == len(w.getvalue()) == 1 + 8 + 4 + 3

    def test_reader_reads_back_in_order(self):
        """A reader returns fields in the order written."""
        fp = fingerprint_of(b"x")
        w = FrameWriter().u8(9).u32(70000).blob(b"hello").fingerprint(fp)
        r = FrameReader(w.getvalue())
        assert (r.u8(), r.u32(), r.blob(), r.fingerprint()) == (9, 70000, b"hello", fp)
        r.expect_end()

    def test_truncated_frame(self):
        """Reading past the end raises DecodingError."""
        with pytest.raises(DecodingError, match="Truncated"):
            FrameReader(b"\x01\x02").u32()

    def test_trailing_bytes(self):
        """expect_end rejects unread bytes."""
        r = FrameReader(b"\x01\x02")
        r.u8()
        with pytest.raises(DecodingError, match="trailing"):
            r.expect_end()


class TestRecipeFraming:
    """Tests for recipe serialization."""

    def test_layout(self, recipe):
        """A recipe is file hash, u64 count and (fingerprint, u64 length) per entry."""
        data = encode_recipe(recipe)
        assert len(data) == recipe_wire_size(recipe) == 32 + 8 + 3 * 40
        assert data[:32] == recipe.file_hash
        assert data[32:40] == le64(3)

    def test_decode_restores_order(self, recipe):
        """Decoding keeps the entry order, including repeats."""
        assert decode_recipe(encode_recipe(recipe)) == recipe

    def test_decode_rejects_short_frame(self, recipe):
        """A count larger than the frame is reported before reading."""
        data = encode_recipe(recipe)
        with pytest.raises(DecodingError):
            decode_recipe(data[:-10])

    def test_decode_rejects_trailing_bytes(self, recipe):
        """Extra bytes after a recipe are an error."""
        with pytest.raises(DecodingError):
            decode_recipe(encode_recipe(recipe) + b"\x00")


class TestFingerprintArrays:
    """Tests for sorted fingerprint arrays."""

    def test_written_sorted_and_distinct(self):
        """Arrays are written sorted and without duplicates."""
        fps = [fingerprint_of(bytes([i])) for i in range(5)]
        w = write_fingerprints(FrameWriter(), fps + fps[:2])
        r = FrameReader(w.getvalue())
        assert read_fingerprints(r) == tuple(sorted(fps))

    def test_unsorted_input_rejected(self):
        """A reader refuses arrays that are not strictly ascending."""
        high, low = Fingerprint(b"\xff" * 32), Fingerprint(bytes(32))
        w = FrameWriter().u64(2).fingerprint(high).fingerprint(low)
        with pytest.raises(DecodingError, match="sorted"):
            read_fingerprints(FrameReader(w.getvalue()))


class TestBitFraming:
    """Tests for bit-string framing."""

    def test_size(self):
        """A bit string costs a u32 length plus whole bytes."""
        assert bits_wire_size(BitString(0, 9)) == 4 + 2
        assert bits_wire_size(64) == 12

    def test_read_back(self):
        """Bit strings keep their length, including leading zeros."""
        bits = BitString(0b0001, 4)
        r = FrameReader(write_bits(FrameWriter(), bits).getvalue())
        assert read_bits(r) == bits

    def test_value_wider_than_length(self):
        """Padding bits that are set make the frame malformed."""
        w = FrameWriter().u32(3).raw(b"\xff")
        with pytest.raises(DecodingError, match="Malformed"):
            read_bits(FrameReader(w.getvalue()))
