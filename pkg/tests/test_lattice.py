import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinfield.lattice import (
    Box,
    Region,
    block_index,
    block_of,
    connected_components,
    dist,
    enlargement,
    is_connected,
    neighbors,
    outer_boundary,
)

sites = st.tuples(st.integers(-30, 30), st.integers(-30, 30))
site_sets = st.frozensets(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=1, max_size=25)


def test_neighbors_fixed_order():
    assert neighbors((0, 0)) == [(1, 0), (-1, 0), (0, 1), (0, -1)]
    assert neighbors((2, 3)) == [(3, 3), (1, 3), (2, 4), (2, 2)]


@given(sites)
def test_neighbors_symmetric(i):
    for j in neighbors(i):
        assert i in neighbors(j)


def test_block_of_examples():
    assert block_of((0, 0), 2).center == (0, 0)
    assert block_of((3, 0), 2).center == (5, 0)
    assert block_of((2, 2), 2).center == (0, 0)
    assert block_of((-3, -3), 2).center == (-5, -5)


@given(sites, st.integers(1, 6))
def test_blocks_tile_the_plane(i, l):
    s = 2 * l + 1
    # brute force over nearby centers
    hits = [
        (cx, cy)
        for cx in range(i[0] - 2 * s, i[0] + 2 * s + 1)
        for cy in range(i[1] - 2 * s, i[1] + 2 * s + 1)
        if cx % s == 0 and cy % s == 0 and max(abs(i[0] - cx), abs(i[1] - cy)) <= l
    ]
    assert hits == [block_of(i, l).center]
    assert i in block_of(i, l)
    assert block_of(i, l).index == block_index(i, l)


def test_block_radius_validated():
    with pytest.raises(ValueError):
        block_index((0, 0), 0)


def test_enlargement_examples():
    assert len(enlargement({(0, 0)}, 1)) == 9
    assert enlargement({(0, 0)}, 0) == {(0, 0)}
    assert enlargement({(0, 0)}, 1, "l1") == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}
    with pytest.raises(ValueError, match="empty set has no enlargement"):
        enlargement(set(), 1)


@given(site_sets, st.integers(0, 4), st.sampled_from(["linf", "l1"]))
def test_enlargement_monotone_and_grows(D, k, kind):
    a = enlargement(D, k, kind)
    b = enlargement(D, k + 1, kind)
    assert D <= a <= b
    assert len(a) >= len(D) + k
    assert all(dist(i, D, kind) <= k for i in a)


@given(site_sets)
def test_outer_boundary_at_distance_one(D):
    ob = outer_boundary(D)
    assert not (ob & D)
    assert all(dist(i, D) == 1 for i in ob)


def test_components_examples():
    assert len(connected_components({(0, 0), (1, 0)})) == 1
    assert len(connected_components({(0, 0), (2, 0)})) == 2
    assert len(connected_components({(0, 0), (1, 1)})) == 2
    assert len(connected_components({(0, 0), (1, 1)}, "linf")) == 1
    assert connected_components(set()) == []


@given(site_sets)
def test_components_partition(B):
    comps = connected_components(B)
    assert frozenset().union(*comps) == B
    assert sum(len(c) for c in comps) == len(B)
    for c in comps:
        assert is_connected(c)
    for a in range(len(comps)):
        for b in range(a + 1, len(comps)):
            assert not any(n in comps[b] for s in comps[a] for n in neighbors(s))
    mins = [min(c) for c in comps]
    assert mins == sorted(mins)


def test_dist_examples():
    assert dist((0, 0), {(3, 4)}, "linf") == 4
    assert dist((0, 0), {(3, 4)}, "l1") == 7
    assert dist((0, 0), {(3, 4)}, "l2") == pytest.approx(5.0)
    assert dist((1, 1), {(1, 1), (9, 9)}) == 0
    with pytest.raises(ValueError):
        dist((0, 0), set())


@pytest.mark.parametrize("N", [0, 1, 3])
def test_box_structure(N):
    box = Box(N)
    assert len(box.sites) == (2 * N + 1) ** 2
    inside = set(box.sites)
    for s in box.sites:
        assert all(n in inside or n in box.boundary for n in neighbors(s))
    assert box.to_array_index((-N, -N)) == (0, 0)


def test_region_mask_roundtrip():
    r = Region.rect(4, 3)
    assert len(r) == 12
    A = {(0, 0), (3, 2), (1, 1)}
    assert r.mask_to_set(r.set_to_mask(A)) == A
    assert r.set_to_mask({r.sites[5]}) == 1 << 5
