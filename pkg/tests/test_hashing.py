import pytest
from hypothesis import given, strategies as st

from ondemand_etl.hashing import fnv1a_64, partition_for


@pytest.mark.parametrize(
    "text, expected",
    [("", 14695981039346656037), ("a", 0xAF63DC4C8601EC8C), ("foobar", 0x85944171F73967E8)],
)
def test_reference_vectors(text, expected):
    assert fnv1a_64(text) == expected
    assert fnv1a_64(text.encode()) == expected


@given(st.text(), st.integers(1, 64))
def test_partition_in_range(key, n):
    p = partition_for(key, n)
    assert 0 <= p < n
    assert p == fnv1a_64(key) % n
