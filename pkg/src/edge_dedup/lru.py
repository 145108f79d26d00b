"""Bounded LRU set built from a hash map and a circular doubly linked list.

The list hangs off a sentinel head: ``head.forward`` is the most recently
used node and ``head.backward`` the least recently used one.
"""

from collections.abc import Hashable, Iterator
from typing import Generic, TypeVar

K = TypeVar("K", bound=Hashable)


class _Node(Generic[K]):
    __slots__ = ("backward", "forward", "key")

    def __init__(self, key: K | None) -> None:
        self.key = key
        self.forward: _Node[K] = self
        self.backward: _Node[K] = self


class LruIndex(Generic[K]):
    """A capacity-bounded set with least-recently-used eviction.

    Example:
        >>> idx = LruIndex[str](capacity=2)
        >>> idx.insert("a"), idx.insert("b")
        (None, None)
        >>> idx.touch("a")
        True
        >>> idx.insert("c")
        'b'
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("Capacity must be non-negative")
        self.capacity = capacity
        self._head: _Node[K] = _Node(None)
        self._map: dict[K, _Node[K]] = {}
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def _unlink(self, node: _Node[K]) -> None:
        node.backward.forward = node.forward
        node.forward.backward = node.backward

    def _push_front(self, node: _Node[K]) -> None:
        first = self._head.forward
        node.backward = self._head
        node.forward = first
        first.backward = node
        self._head.forward = node

    def touch(self, key: K) -> bool:
        """Mark ``key`` most recently used; a miss changes nothing."""
        node = self._map.get(key)
        if node is None:
            self.misses += 1
            return False
        self.hits += 1
        if self._head.forward is not node:
            self._unlink(node)
            self._push_front(node)
        return True

    def insert(self, key: K) -> K | None:
        """Insert or refresh ``key``; returns the evicted key, if any."""
        if key in self._map:
            node = self._map[key]
            self._unlink(node)
            self._push_front(node)
            return None
        if self.capacity == 0:
            return None
        evicted: K | None = None
        if len(self._map) >= self.capacity:
            victim = self._head.backward
            self._unlink(victim)
            assert victim.key is not None
            evicted = victim.key
            del self._map[evicted]
            self.evictions += 1
        node = _Node(key)
        self._push_front(node)
        self._map[key] = node
        return evicted

    def remove(self, key: K) -> bool:
        node = self._map.pop(key, None)
        if node is None:
            return False
        self._unlink(node)
        return True

    def least_recent(self) -> K | None:
        return self._head.backward.key

    def __contains__(self, key: object) -> bool:
        return key in self._map

    def __len__(self) -> int:
        return len(self._map)

    def __iter__(self) -> Iterator[K]:
        """Iterate from most to least recently used."""
        node = self._head.forward
        while node is not self._head:
            assert node.key is not None
            yield node.key
            node = node.forward

    def clear(self) -> None:
        self._map.clear()
        self._head.forward = self._head
        self._head.backward = self._head
