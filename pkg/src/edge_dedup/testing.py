"""Oracles, adversaries and fixtures for exercising the library in tests.

- :class:`ReferenceLru` is an ``OrderedDict`` model of :class:`~edge_dedup.lru.LruIndex`.
- :func:`brute_force_locality_scores` recomputes locality scores with a naive
  double loop.
- :class:`ExactCounter` gives the true frequencies a count-min sketch estimates.
- :func:`reference_cut_points` is a byte-at-a-time FastCDC scan.
- :func:`random_responder` and :func:`wrong_data_responder` answer challenges
  without holding the challenged bytes.

It is a submodule and is not exported from the package's ``__all__``; import
it explicitly with ``import edge_dedup.testing``.
"""

from collections import Counter, OrderedDict
from collections.abc import Hashable, Iterable, Iterator, Sequence
from typing import Generic, TypeVar

import numpy as np

from edge_dedup.chunking import ChunkerConfig, gear_table
from edge_dedup.gateway import BatchResponder
from edge_dedup.pow import Challenge, gen_response
from edge_dedup.types import BitString, FileRecipe, Fingerprint, PlainChunk

K = TypeVar("K", bound=Hashable)

_M64 = (1 << 64) - 1


class ReferenceLru(Generic[K]):
    """Same contract as :class:`~edge_dedup.lru.LruIndex`, backed by an ``OrderedDict``."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._items: OrderedDict[K, None] = OrderedDict()

    def touch(self, key: K) -> bool:
        if key not in self._items:
            return False
        self._items.move_to_end(key, last=False)
        return True

    def insert(self, key: K) -> K | None:
        if self.capacity == 0:
            return None
        if key in self._items:
            self._items.move_to_end(key, last=False)
            return None
        self._items[key] = None
        self._items.move_to_end(key, last=False)
        if len(self._items) > self.capacity:
            evicted, _ = self._items.popitem(last=True)
            return evicted
        return None

    def remove(self, key: K) -> bool:
        if key not in self._items:
            return False
        del self._items[key]
        return True

    def least_recent(self) -> K | None:
        return next(reversed(self._items), None)

    def __contains__(self, key: object) -> bool:
        return key in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[K]:
        return iter(self._items)


def brute_force_locality_scores(
    frequent: Iterable[Fingerprint], recipes: Iterable[FileRecipe]
) -> dict[Fingerprint, float]:
    """Locality scores by scanning every (anchor, chunk) pair of every recipe."""
    anchors = sorted(set(frequent))
    scores: dict[Fingerprint, float] = {}
    for recipe in recipes:
        fps = list(recipe.fingerprints)
        for anchor in anchors:
            if anchor not in fps:
                continue
            anchor_pos = fps.index(anchor)
            for pos in range(len(fps)):
                distance = pos - anchor_pos if pos >= anchor_pos else anchor_pos - pos
                scores[fps[pos]] = scores.get(fps[pos], 0.0) + 1.0 / (1 + distance)
    return scores


class ExactCounter:
    """True occurrence counts of fingerprints."""

    def __init__(self) -> None:
        self.counts: Counter[Fingerprint] = Counter()

    def add(self, fp: Fingerprint, count: int = 1) -> None:
        self.counts[fp] += count

    def frequency(self, fp: Fingerprint) -> int:
        return self.counts[fp]

    @property
    def total(self) -> int:
        return self.counts.total()


def reference_cut_points(config: ChunkerConfig, data: bytes) -> list[int]:
    """FastCDC boundaries computed one byte at a time."""
    gear = gear_table(config.gear_seed)
    mask_s, mask_l = config.mask_small, config.mask_large
    cuts: list[int] = []
    start = 0
    end = len(data)
    while start < end:
        if end - start <= config.min_size:
            cut = end
        else:
            limit = start + min(end - start, config.max_size)
            normal = start + min(config.avg_size, limit - start)
            cut = limit
            fp = 0
            for i in range(start + config.min_size, limit):
                fp = ((fp << 1) + gear[data[i]]) & _M64
                if not fp & (mask_s if i < normal else mask_l):
                    cut = i + 1
                    break
        cuts.append(cut)
        start = cut
    return cuts


def fixed_chunks(data: bytes, size: int) -> list[PlainChunk]:
    """Split ``data`` into fixed-size chunks; the last one may be shorter."""
    if size <= 0:
        raise ValueError("Chunk size must be positive")
    return [PlainChunk(data[i : i + size]) for i in range(0, len(data), size)]


def random_bytes(seed: int, size: int) -> bytes:
    return np.random.default_rng(seed).bytes(size)


def random_responder(seed: int) -> BatchResponder:
    """An adversary that knows only fingerprints and guesses every bit."""
    rng = np.random.default_rng(seed)

    def guess(bits: int) -> BitString:
        value = int.from_bytes(rng.bytes((bits + 7) // 8), "big")
        return BitString(value >> (-bits % 8), bits)

    def answer(challenges: Sequence[Challenge]) -> list[BitString]:
        return [guess(c.bits) for c in challenges]

    return answer


def wrong_data_responder(data: bytes) -> BatchResponder:
    """An adversary that answers honestly, but from bytes it substitutes for the real ones."""

    def answer(challenges: Sequence[Challenge]) -> list[BitString]:
        return [gen_response(c.seed, data, c.bits) for c in challenges]

    return answer
