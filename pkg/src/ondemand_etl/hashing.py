"""Fixed 64-bit FNV-1a hash shared by the partitioner and fact identifiers."""

from __future__ import annotations

from functools import lru_cache

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes | str) -> int:
    """Return the 64-bit FNV-1a hash of ``data`` (strings are UTF-8 encoded).

    >>> fnv1a_64(b"")
    14695981039346656037
    >>> hex(fnv1a_64(b"a"))
    '0xaf63dc4c8601ec8c'
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@lru_cache(maxsize=65536)
def partition_for(key: str, partition_count: int) -> int:
    """Partition index of ``key`` in a topic with ``partition_count`` partitions."""
    if partition_count < 1:
        raise ValueError("partition_count must be >= 1")
    return fnv1a_64(key) % partition_count
