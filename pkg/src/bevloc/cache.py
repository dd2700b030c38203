"""Bounded caches for extracted scan features."""

import logging
import threading
from collections import OrderedDict
from collections.abc import Callable, Hashable
from typing import Any, Generic, TypeVar

logger: logging.Logger = logging.getLogger(name=__name__)

V = TypeVar("V")


class LimitedSizeDict(OrderedDict):
    """A dictionary that holds at most 'max_size' items and evicts the least recently stored."""

    def __init__(self, max_size: int) -> None:
        """Initialize the LimitedSizeDict.

        Args:
            max_size: Maximum number of items to store in the dictionary
        """
        if max_size < 1:
            raise ValueError(f"max_size must be at least 1, got {max_size}")
        self.max_size: int = max_size
        super().__init__()

    def __setitem__(self, key: Any, value: Any) -> None:
        """Set an item in the dictionary, removing the oldest if full.

        Args:
            key: Dictionary key
            value: Value to store
        """
        if key in self:
            self.move_to_end(key=key)
        super().__setitem__(key, value)
        if len(self) > self.max_size:
            evicted, _ = self.popitem(last=False)
            logger.debug(msg=f"Evicted {evicted!r} from cache")


class FeatureCache(Generic[V]):
    """Thread-safe LRU cache in front of an expensive per-key computation."""

    def __init__(self, max_size: int) -> None:
        """Initialize the FeatureCache.

        Args:
            max_size: Maximum number of entries kept
        """
        self._entries: LimitedSizeDict = LimitedSizeDict(max_size=max_size)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        """Number of cached entries."""
        with self._lock:
            return len(self._entries)

    def __contains__(self, key: Hashable) -> bool:
        """Whether ``key`` is cached."""
        with self._lock:
            return key in self._entries

    def get_or_compute(self, key: Hashable, compute: Callable[[], V]) -> V:
        """Return the cached value for ``key``, computing and storing it on a miss.

        The computation runs outside the lock; concurrent misses on the same
        key may compute twice and the later result wins.

        Args:
            key: Cache key
            compute: Zero-argument producer of the value

        Returns:
            The cached or freshly computed value
        """
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key=key)
                self.hits += 1
                return self._entries[key]
            self.misses += 1
        value = compute()
        with self._lock:
            self._entries[key] = value
        logger.debug(msg=f"Cached features for {key!r}")
        return value

    def put(self, key: Hashable, value: V) -> None:
        """Store ``value`` under ``key``, evicting the oldest entry when full."""
        with self._lock:
            self._entries[key] = value

    def clear(self) -> None:
        """Drop every entry and reset the counters."""
        with self._lock:
            self._entries.clear()
            self.hits = 0
            self.misses = 0
