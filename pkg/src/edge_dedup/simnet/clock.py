"""Deterministic virtual clock."""

from edge_dedup.types import VirtualTime


class SimClock:
    """Virtual nanosecond clock; it only moves when something is charged.

    Example:
        >>> clock = SimClock()
        >>> clock.advance(1_500)
        1500
    """

    def __init__(self, start: int = 0) -> None:
        if start < 0:
            raise ValueError("Virtual time starts at a non-negative instant")
        self._now = start

    @property
    def now(self) -> VirtualTime:
        return VirtualTime(self._now)

    def advance(self, delta: int) -> VirtualTime:
        """Move forward by ``delta`` nanoseconds and return the new time."""
        if delta < 0:
            raise ValueError(f"Virtual time cannot move backwards (delta={delta})")
        self._now += delta
        return VirtualTime(self._now)
