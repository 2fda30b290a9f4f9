import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ofmlmc.streams import SampleKey, derive_stream, stream_from, stream_id, stream_key, uniform_from

keys = st.builds(
    SampleKey,
    st.integers(min_value=0, max_value=2**64 - 1),
    st.integers(min_value=0, max_value=20),
    st.integers(min_value=0, max_value=10**9),
)


@given(keys)
def test_stream_is_a_pure_function_of_the_key(key):
    a = derive_stream(key).standard_normal(4)
    b = stream_from(stream_key(key)).standard_normal(4)
    np.testing.assert_array_equal(a, b)


def test_stream_prefix_is_stable():
    w = stream_key(SampleKey(1, 2, 3))
    short = stream_from(w).standard_normal(3)
    longer = stream_from(w).standard_normal(10)
    np.testing.assert_array_equal(short, longer[:3])


def test_neighbouring_keys_differ():
    a = stream_key(SampleKey(1, 0, 0))
    assert a != stream_key(SampleKey(1, 0, 1))
    assert a != stream_key(SampleKey(1, 1, 0))
    assert a != stream_key(SampleKey(2, 0, 0))


def test_invalid_key_rejected():
    with pytest.raises(ValueError):
        stream_key(SampleKey(1, -1, 0))


@pytest.mark.slow
def test_no_stream_id_collisions_in_a_million_keys():
    ids = {stream_id(SampleKey(7, level, i)) for level in range(4) for i in range(250_000)}
    assert len(ids) == 1_000_000


def test_uniform_from_range_and_salt():
    w = stream_key(SampleKey(1, 0, 0))
    u = uniform_from(w, b"a")
    assert 0.0 <= u < 1.0
    assert u != uniform_from(w, b"b")
    assert u == uniform_from(w, b"a")
