"""Identifier-circle arithmetic and per-overlay Chord routing state.

Identifiers are plain ints in ``[0, 2**m)``.  Interval tests need no
modulus (they only compare), so ``m`` is only passed where distances or
finger starts are computed.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

DEFAULT_BITS = 64
DEFAULT_SUCCESSORS = 2


class EmptyRingError(LookupError):
    """Raised when a lookup is attempted on an overlay with no members."""


class DuplicateIdError(ValueError):
    """Two devices hashed to the same ring position in one overlay."""


class NodeRef(NamedTuple):
    """A routing entry: ring position, DH public value (the OID) and address."""

    rid: int
    oid: int
    addr: int

    def short(self) -> str:
        return f"{self.rid:016x}@{self.addr}"


def distance(a: int, b: int, m: int) -> int:
    """Clockwise distance from ``a`` to ``b``."""
    return (b - a) % (1 << m)


def in_interval(x: int, a: int, b: int, left_closed: bool = False,
                right_closed: bool = False) -> bool:
    """True iff ``x`` lies on the circular interval from ``a`` to ``b``.

    Open on both ends by default.  When ``a == b`` the interval spans the
    whole circle; the shared endpoint is included only if one side is closed.
    """
    if x == a:
        return left_closed or (a == b and right_closed)
    if x == b:
        return right_closed
    if a == b:
        return True
    if a < b:
        return a < x < b
    return x > a or x < b


def responsible_node(key: int, members: Iterable[int]) -> int:
    """First member at or after ``key`` going clockwise."""
    ids = sorted(members)
    if not ids:
        raise EmptyRingError("overlay has no members")
    return successor_in_sorted(key, ids)


def successor_in_sorted(key: int, ids: Sequence[int]) -> int:
    i = bisect.bisect_left(ids, key)
    return ids[i] if i < len(ids) else ids[0]


def finger_start(rid: int, i: int, m: int) -> int:
    """Start of finger ``i`` (1-based): ``rid + 2**(i-1)`` mod ``2**m``."""
    return (rid + (1 << (i - 1))) % (1 << m)


@dataclass
class OverlayRouting:
    """Routing state one device keeps for one overlay."""

    overlay: int
    me: NodeRef
    m: int = DEFAULT_BITS
    s: int = DEFAULT_SUCCESSORS
    predecessor: Optional[NodeRef] = None
    successors: list = field(default_factory=list)
    fingers: list = field(default_factory=list)
    _distinct: Optional[list] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.fingers:
            self.fingers = [None] * self.m

    @property
    def successor(self) -> NodeRef:
        return self.successors[0] if self.successors else self.me

    def distinct_fingers(self) -> list:
        if self._distinct is None:
            seen = {}
            for f in self.fingers:
                if f is not None and f.rid != self.me.rid:
                    seen[f.rid] = f
            self._distinct = list(seen.values())
        return self._distinct

    def set_successors(self, refs: Iterable[NodeRef]) -> None:
        out = []
        seen = {self.me.rid}
        for r in refs:
            if r is None or r.rid in seen:
                continue
            seen.add(r.rid)
            out.append(r)
            if len(out) == self.s:
                break
        self.successors = out

    def set_finger(self, i: int, ref: Optional[NodeRef]) -> None:
        if ref is not None and ref.rid == self.me.rid:
            ref = None
        if self.fingers[i - 1] != ref:
            self.fingers[i - 1] = ref
            self._distinct = None

    def forget(self, rid: int) -> None:
        """Drop every reference to a departed member."""
        self.successors = [r for r in self.successors if r.rid != rid]
        if self.predecessor is not None and self.predecessor.rid == rid:
            self.predecessor = None
        for i, f in enumerate(self.fingers):
            if f is not None and f.rid == rid:
                self.fingers[i] = None
                self._distinct = None

    def known(self) -> list:
        """Every distinct member this device can address in the overlay."""
        refs = {r.rid: r for r in self.distinct_fingers()}
        for r in self.successors:
            refs[r.rid] = r
        if self.predecessor is not None:
            refs[self.predecessor.rid] = self.predecessor
        refs.pop(self.me.rid, None)
        return list(refs.values())


def lookup_next_hop(target: int, routing: OverlayRouting) -> NodeRef:
    """Known member that most closely precedes ``target``.

    Falls back to the first successor when nothing known lies strictly
    between this device and the target.
    """
    me = routing.me.rid
    mask = (1 << routing.m) - 1
    limit = (target - me) & mask
    best = None
    best_d = 0
    for cand in routing.distinct_fingers():
        d = (cand.rid - me) & mask
        if best_d < d < limit:
            best, best_d = cand, d
    for cand in routing.successors:
        d = (cand.rid - me) & mask
        if best_d < d < limit:
            best, best_d = cand, d
    if best is None:
        return routing.successor
    return best


def update_finger_table(routing: OverlayRouting, learned: NodeRef) -> OverlayRouting:
    """Place ``learned`` into every finger slot it is the closest known fit for."""
    if learned.rid == routing.me.rid:
        return routing
    m = routing.m
    mask = (1 << m) - 1
    me = routing.me.rid
    for i in range(1, m + 1):
        start = (me + (1 << (i - 1))) & mask
        d = (learned.rid - start) & mask
        if d > ((me - start) & mask):
            continue                      # this device itself succeeds the start
        cur = routing.fingers[i - 1]
        if cur is None or d < ((cur.rid - start) & mask):
            routing.set_finger(i, learned)
    return routing


def exact_fingers(me: int, sorted_ids: Sequence[int], m: int) -> list:
    """Finger targets of ``me`` on a fully known ring (slot ``i-1`` holds finger ``i``)."""
    return [successor_in_sorted(finger_start(me, i, m), sorted_ids) for i in range(1, m + 1)]
