import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from safed.ring import (EmptyRingError, NodeRef, OverlayRouting, exact_fingers, finger_start, in_interval,
                        lookup_next_hop, responsible_node, update_finger_table)


def ref(rid):
    return NodeRef(rid, rid + 1, rid)


def linear_responsible(key, members, m):
    # oracle: smallest clockwise distance from the key
    return min(members, key=lambda x: (x - key) % (1 << m))


def linear_in_open(x, a, b, m):
    # oracle: walk the circle from a to b
    size = 1 << m
    cur = (a + 1) % size
    while cur != b:
        if cur == x:
            return True
        cur = (cur + 1) % size
    return a == b and x != a


def converged_ring(ids, m, s=2):
    ids = sorted(ids)
    n = len(ids)
    table = {}
    for i, rid in enumerate(ids):
        r = OverlayRouting(0, ref(rid), m, s)
        r.set_successors(ref(ids[(i + k) % n]) for k in range(1, s + 1))
        r.predecessor = ref(ids[i - 1]) if n > 1 else None
        for j, f in enumerate(exact_fingers(rid, ids, m), start=1):
            r.set_finger(j, ref(f))
        table[rid] = r
    return table


def route(table, start, key, limit=10_000):
    """Iterate next-hop until the key falls between a node and its successor."""
    cur = start
    hops = 0
    while True:
        r = table[cur]
        succ = r.successor.rid
        if key == cur:
            return cur, hops
        if in_interval(key, cur, succ, right_closed=True):
            return succ, hops + (succ != cur)
        cur = lookup_next_hop(key, r).rid
        hops += 1
        assert hops < limit


# --- interval ------------------------------------------------------------------------

def test_interval_examples():
    assert in_interval(3, 1, 5)
    assert in_interval(0, 6, 2)
    assert not in_interval(6, 6, 6)


def test_interval_closed_ends():
    assert in_interval(5, 1, 5, right_closed=True)
    assert not in_interval(5, 1, 5)
    assert in_interval(1, 1, 5, left_closed=True)
    assert in_interval(6, 6, 6, right_closed=True)


@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 15))
def test_interval_matches_walk(x, a, b):
    assert in_interval(x, a, b) == linear_in_open(x, a, b, 4)


@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
def test_interval_rotation_invariant(x, a, b, k):
    rot = lambda v: (v + k) % 256  # noqa: E731
    assert in_interval(x, a, b) == in_interval(rot(x), rot(a), rot(b))


# --- responsible node ------------------------------------------------------------------

@pytest.mark.parametrize("key,want", [(4, 5), (0, 1), (7, 7)])
def test_responsible_examples(key, want):
    assert responsible_node(key, {1, 5, 7}) == want


def test_responsible_empty():
    with pytest.raises(EmptyRingError):
        responsible_node(3, [])


@pytest.mark.criterion(6)
@given(st.sets(st.integers(0, 2**16 - 1), min_size=1, max_size=256), st.integers(0, 2**16 - 1))
def test_responsible_matches_scan(members, key):
    assert responsible_node(key, members) == linear_responsible(key, members, 16)


# --- routing ----------------------------------------------------------------------------

def test_next_hop_falls_back_to_successor():
    r = OverlayRouting(0, ref(10), 8, 2)
    r.set_successors([ref(40), ref(90)])
    assert lookup_next_hop(11, r) == ref(40)


def test_next_hop_closest_preceding():
    r = OverlayRouting(0, ref(0), 8, 2)
    r.set_successors([ref(10)])
    for f in (10, 30, 70, 130):
        update_finger_table(r, ref(f))
    assert lookup_next_hop(100, r).rid == 70
    assert lookup_next_hop(71, r).rid == 70
    assert lookup_next_hop(70, r).rid == 30


@pytest.mark.criterion(6)
@settings(max_examples=60, deadline=None)
@given(st.sets(st.integers(0, 2**12 - 1), min_size=1, max_size=256), st.data())
def test_lookup_iteration_matches_scan(ids, data):
    m = 12
    table = converged_ring(ids, m)
    start = data.draw(st.sampled_from(sorted(ids)))
    key = data.draw(st.integers(0, 2**m - 1))
    got, _ = route(table, start, key)
    assert got == linear_responsible(key, ids, m)


@pytest.mark.criterion(6)
def test_hop_count_is_logarithmic():
    rnd = random.Random(7)
    m = 32
    ids = rnd.sample(range(2**m), 64)
    table = converged_ring(ids, m)
    worst = 0
    for start in ids:
        for _ in range(40):
            key = rnd.randrange(2**m)
            got, hops = route(table, start, key)
            assert got == linear_responsible(key, ids, m)
            worst = max(worst, hops)
    assert worst <= 2 * math.log2(64) + 2


# --- finger table ------------------------------------------------------------------------

def test_finger_start():
    assert finger_start(5, 1, 3) == 6
    assert finger_start(5, 3, 3) == 1


def test_learning_self_is_ignored():
    r = OverlayRouting(0, ref(5), 8)
    update_finger_table(r, ref(5))
    assert r.distinct_fingers() == []


def test_learning_closer_member_replaces_slot():
    r = OverlayRouting(0, ref(0), 8)
    update_finger_table(r, ref(100))
    assert r.fingers[6].rid == 100          # finger 7 starts at 64
    update_finger_table(r, ref(70))
    assert r.fingers[6].rid == 70
    # finger 8 starts at 128; clockwise from there this device (0) comes before 70 or 100
    assert r.fingers[7] is None
    update_finger_table(r, ref(140))
    assert r.fingers[7].rid == 140
    assert r.fingers[6].rid == 70


@pytest.mark.criterion(6)
@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2**10 - 1), min_size=2, max_size=64, unique=True), st.randoms())
def test_incremental_learning_converges_to_exact(ids, rnd):
    m = 10
    me = ids[0]
    r = OverlayRouting(0, ref(me), m)
    order = list(ids[1:])
    rnd.shuffle(order)
    for rid in order:
        update_finger_table(r, ref(rid))
    want = exact_fingers(me, sorted(ids), m)
    got = [f.rid if f else me for f in r.fingers]
    assert got == want
    # table size equals the number of distinct responsible nodes of me + 2^(i-1)
    assert len(r.distinct_fingers()) == len({w for w in want if w != me}) <= m


def test_successor_list_dedup_and_length():
    r = OverlayRouting(0, ref(1), 8, 2)
    r.set_successors([ref(1), ref(5), ref(5), ref(9), ref(12)])
    assert [x.rid for x in r.successors] == [5, 9]


def test_forget_clears_every_slot():
    r = OverlayRouting(0, ref(0), 8, 2)
    r.set_successors([ref(10), ref(20)])
    r.predecessor = ref(200)
    update_finger_table(r, ref(10))
    r.forget(10)
    assert ref(10) not in r.known()
    assert r.successor.rid == 20
