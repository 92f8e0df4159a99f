import numpy as np
import pytest
from hypothesis import given, strategies as st

from xgranchunk.errors import EmptyDocument, EmptyPattern, IndexOutOfRange, NoGranularities
from xgranchunk.patterns import (
    MASK_VALUE, ChunkPattern, build_explicit_patterns, build_sliding_patterns, mask_to_patterns,
    parse_pattern_spec, pattern_to_mask,
)


def sets(ps):
    return [set(x) for x in ps.index_sets()]


def test_exact_tiling():
    ps = build_sliding_patterns(4, [2])
    assert sets(ps) == [{0, 1}, {2, 3}] and ps.m == 2


def test_trailing_partial_kept():
    ps = build_sliding_patterns(5, [2])
    assert sets(ps) == [{0, 1}, {2, 3}, {4}] and ps.m == 3


def test_duplicates_removed_first_kept():
    # g=1: {0},{1},{2}; g=2: {0,1},{2}; g=3: {0,1,2}; the second {2} is dropped
    ps = build_sliding_patterns(3, [3, 1, 2])
    assert sets(ps) == [{0}, {1}, {2}, {0, 1}, {0, 1, 2}]
    assert ps.m == 5


def test_granularity_larger_than_document():
    ps = build_sliding_patterns(3, [8])
    assert ps.index_sets() == [(0, 1, 2)]


def test_default_granularities_on_64():
    ps = build_sliding_patterns(64)
    assert ps.m == 32 + 16 + 8 + 4 + 2 == 62
    assert [p.granularity for p in ps][:3] == [2, 2, 2]
    assert ps[-1].sentence_indices == tuple(range(32, 64))


def test_overlap_via_stride():
    ps = build_sliding_patterns(5, [3], stride=1)
    assert ps.index_sets() == [(0, 1, 2), (1, 2, 3), (2, 3, 4), (3, 4), (4,)]
    ps = build_sliding_patterns(6, [2, 4], stride={4: 2})
    assert ps.index_sets() == [(0, 1), (2, 3), (4, 5), (0, 1, 2, 3), (2, 3, 4, 5)]


def test_sliding_errors():
    with pytest.raises(EmptyDocument):
        build_sliding_patterns(0, [2])
    with pytest.raises(NoGranularities):
        build_sliding_patterns(4, [])


def test_explicit_patterns():
    ps = build_explicit_patterns(4, [{0, 2}])
    assert ps[0].sentence_indices == (0, 2) and not ps[0].contiguous
    ps = build_explicit_patterns(4, [{1}])
    assert ps[0].granularity == 1 and ps[0].contiguous and ps[0].start == 1
    with pytest.raises(IndexOutOfRange) as err:
        build_explicit_patterns(3, [{1}, {0, 3}])
    assert err.value.set_position == 1 and err.value.index == 3
    with pytest.raises(EmptyPattern):
        build_explicit_patterns(3, [set()])


def test_explicit_order_preserved():
    ps = build_explicit_patterns(5, [[4], [0, 1], [3, 1]])
    assert ps.index_sets() == [(4,), (0, 1), (1, 3)]


def test_pattern_invariants():
    with pytest.raises(ValueError):
        ChunkPattern((2, 1))
    with pytest.raises(EmptyPattern):
        ChunkPattern(())


def test_mask_examples():
    m = pattern_to_mask(build_explicit_patterns(3, [{0, 1}]))
    assert m.tolist() == [[0, 0, MASK_VALUE]]
    m = pattern_to_mask(build_explicit_patterns(4, [range(4)]))
    assert (m == 0).all()
    m = pattern_to_mask(build_explicit_patterns(2, [{0}, {1}]))
    assert m.tolist() == [[0, MASK_VALUE], [MASK_VALUE, 0]]
    assert m.dtype == np.float32
    assert np.isfinite(m).all()


def test_parse_pattern_spec():
    assert parse_pattern_spec("2,4,8") == ([2, 4, 8], None)
    assert parse_pattern_spec("4:2") == ([4], 2)
    with pytest.raises(ValueError):
        parse_pattern_spec("a,b")
    with pytest.raises(NoGranularities):
        parse_pattern_spec(":3")


index_sets = st.integers(1, 20).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.sets(st.integers(0, n - 1), min_size=1), min_size=1, max_size=10)))


@given(index_sets)
def test_mask_round_trip(case):
    n, raw = case
    ps = build_explicit_patterns(n, raw)
    mask = pattern_to_mask(ps)
    assert mask.shape == (ps.m, n)
    assert ((mask == 0).sum(axis=1) >= 1).all()
    assert mask_to_patterns(mask) == ps


@given(st.integers(1, 80), st.sets(st.integers(1, 40), min_size=1, max_size=5))
def test_sliding_coverage(n, gs):
    ps = build_sliding_patterns(n, gs)
    for g in gs:
        covered = set()
        # a duplicated window counts for every granularity that produced it
        for s in range(0, n, g):
            window = tuple(range(s, min(s + g, n)))
            assert window in ps.index_sets()
            covered.update(window)
        assert covered == set(range(n))
    assert len(set(ps.index_sets())) == ps.m
    assert all(p.contiguous for p in ps)


@given(st.integers(1, 100))
def test_unit_granularity(n):
    ps = build_sliding_patterns(n, [1], stride=1)
    assert ps.m == n
    assert ((pattern_to_mask(ps) == 0).sum(axis=1) == 1).all()
