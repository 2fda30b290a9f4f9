import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofmlmc.levels import LevelHierarchy, warmup_allocation, work_model


@pytest.mark.parametrize(
    "level, base, rate, expected",
    [(0, 1.0, 4.0, 1.0), (3, 1.0, 4.0, 4096.0), (2, 2.0, 1.0, 8.0)],
)
def test_work_model(level, base, rate, expected):
    assert work_model(level, base, rate) == expected


def test_work_model_rejects_negative_level():
    with pytest.raises(ValueError):
        work_model(-1, 1.0, 4.0)


def test_warmup_paper_hierarchy():
    assert warmup_allocation(LevelHierarchy.geometric(4, 1.0, 4.0)) == [512, 64, 8, 1]


def test_warmup_single_level():
    assert warmup_allocation(LevelHierarchy(work=(7.5,))) == [1]


def test_warmup_rate_two():
    assert warmup_allocation(LevelHierarchy.geometric(3, 1.0, 2.0)) == [4, 2, 1]


def test_hierarchy_requires_increasing_work():
    with pytest.raises(ValueError):
        LevelHierarchy(work=(1.0, 1.0))


def test_pair_costs():
    h = LevelHierarchy.geometric(3, 1.0, 4.0)
    np.testing.assert_array_equal(h.pair_costs(), [1.0, 17.0, 272.0])


@given(st.integers(1, 7), st.floats(0.5, 6.0))
def test_warmup_monotone_and_single_finest(num_levels, rate):
    h = LevelHierarchy.geometric(num_levels, 1.0, rate)
    m = warmup_allocation(h)
    assert m[-1] == 1
    assert all(a >= b for a, b in zip(m, m[1:]))


@given(st.integers(1, 8))
def test_warmup_cost_bound_default_rate(num_levels):
    h = LevelHierarchy.geometric(num_levels, 1.0, 4.0)
    m = np.array(warmup_allocation(h))
    assert float(np.dot(m, h.pair_costs())) <= 2.5 * h.work[-1]
