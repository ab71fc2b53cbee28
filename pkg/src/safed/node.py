"""Per-device protocol engine.

A :class:`Device` reacts to deliveries and timers handed to it by the
network (see ``simnet``).  It never touches another device directly; all
interaction is through ``self.net.send``.
"""

from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .attest import AttestationSession, Slot, bind, measure
from .crypto import (AuthenticationError, CertificateError, ReplayWindow, TrustedAnchor, SECRET_BYTES,
                     UID_BYTES, check_certificate, ring_position)
from .ring import NodeRef, OverlayRouting, finger_start, in_interval, lookup_next_hop
from .wire import Kind, Packet, Payload

DELTA = 0xFFFF  # ``total`` marker of a single-record proofs-update outside a full transfer
MAX_HOPS = 128
PROOF_BYTES = UID_BYTES + wire.DIGEST_BYTES


class Status(str, enum.Enum):
    SETTING = "device-setting"
    UNKNOWN = "device-unknown"
    CERTIFIED = "device-certified"
    RUNNING = "member-and-running"


class OvStatus(str, enum.Enum):
    JOINING = "joining"
    NON_MEMBER = "non-member"
    MEMBER = "member"


GLOBAL_EDGES = {(None, Status.SETTING), (Status.SETTING, Status.UNKNOWN),
                (Status.UNKNOWN, Status.CERTIFIED), (Status.CERTIFIED, Status.RUNNING)}
OVERLAY_EDGES = {(None, OvStatus.JOINING), (OvStatus.JOINING, OvStatus.NON_MEMBER),
                 (OvStatus.JOINING, OvStatus.MEMBER), (OvStatus.NON_MEMBER, OvStatus.MEMBER)}


@functools.lru_cache(maxsize=1 << 16)
def uid_key(uid: bytes, m: int) -> int:
    return ring_position(uid, m)


@dataclass
class OverlayState:
    index: int
    me: NodeRef
    routing: OverlayRouting
    status: Optional[OvStatus] = None
    store: dict = field(default_factory=dict)       # uid -> (key, digest)
    leftovers: dict = field(default_factory=dict)   # new owner's rid -> {uid: (key, digest)}
    update_from: Optional[int] = None               # rid of the member whose full update we hold
    update_src: Optional[int] = None
    update_seen: set = field(default_factory=set)
    pending_nm: dict = field(default_factory=dict)  # rid -> [ref, last_seen, last_update_sent]
    finger_next: int = 0
    prefix: tuple = (None, 0)
    entry: Optional[NodeRef] = None
    join_attempts: int = 0

    def lookup(self, uid: bytes):
        rec = self.store.get(uid)
        if rec is not None:
            return rec[1]
        for bucket in self.leftovers.values():
            rec = bucket.get(uid)
            if rec is not None:
                return rec[1]
        return None

    def proof_count(self) -> int:
        return len(self.store) + sum(len(b) for b in self.leftovers.values())


class Device:
    """One swarm member: trusted anchor, per-overlay state, attestation session."""

    def __init__(self, net, addr: int, anchor: TrustedAnchor, region: bytes, rng):
        self.net = net
        cfg = net.cfg
        self.addr = addr
        self.anchor = anchor
        self.uid = anchor.uid
        self.region = region
        self.golden = anchor.proof
        self.rng = rng
        self.o, self.s, self.m = cfg.o, cfg.s, cfg.m
        self.status: Optional[Status] = None
        self.ov: list = [None] * self.o
        self.pending: dict = {}
        self._rid = 0
        self.session = AttestationSession(self.o)
        self._session_token = 0
        self.replay = ReplayWindow(cfg.replay_window)
        self.halted = False
        self.corrupt_mode: Optional[str] = None
        self.cert_nonce: Optional[bytes] = None
        self.entry_addr: Optional[int] = None
        self._set_status(Status.SETTING)

    # --- bookkeeping -------------------------------------------------------
    def __repr__(self):
        return f"Device({self.addr}, {self.status.value if self.status else None})"

    def _set_status(self, new: Status) -> None:
        self.net.trace("fsm", dev=self.addr, old=self.status.value if self.status else None, new=new.value)
        self.status = new

    def _set_ov_status(self, st: OverlayState, new: OvStatus) -> None:
        if st.status == new:
            return
        self.net.trace("fsm", dev=self.addr, overlay=st.index,
                       old=st.status.value if st.status else None, new=new.value)
        st.status = new
        if new == OvStatus.MEMBER and self.status == Status.CERTIFIED and \
                all(x is not None and x.status == OvStatus.MEMBER for x in self.ov):
            self._set_status(Status.RUNNING)

    def _new_request(self, kind: str, ov: int, ctx, timeout_us: int) -> int:
        self._rid = (self._rid + 1) & 0xFFFFFFFF
        rid = self._rid
        self.pending[rid] = (kind, ov, ctx)
        self.net.after(timeout_us, self, ("req", rid))
        return rid

    def _nonce(self) -> bytes:
        return self.rng.randbytes(16)

    def ref(self, ov: int) -> NodeRef:
        return self.ov[ov].me

    def make_overlay(self, ov: int) -> OverlayState:
        oid = self.anchor.new_oid(ov, self.rng)
        me = NodeRef(ring_position(oid, self.m), oid, self.addr)
        st = OverlayState(ov, me, OverlayRouting(ov, me, self.m, self.s))
        self.ov[ov] = st
        return st

    def _regenerate(self, st: OverlayState) -> None:
        oid = self.anchor.new_oid(st.index, self.rng)
        st.me = NodeRef(ring_position(oid, self.m), oid, self.addr)
        st.routing = OverlayRouting(st.index, st.me, self.m, self.s)

    # --- transport ---------------------------------------------------------
    def _send(self, ov: int, dest: NodeRef, payload: Payload, source: Optional[NodeRef] = None) -> None:
        me = self.ov[ov].me
        self.net.send(self, dest, Packet(ov, source or me, me, payload))

    def deliver(self, src_addr: int, dest_oid: int, item) -> None:
        if self.halted:
            return
        if isinstance(item, tuple):
            self._on_cert(src_addr, item)
            return
        if isinstance(item, (bytes, bytearray)):
            try:
                pkt = wire.decode(item, self.anchor, src_addr, self.m)
            except wire.WireError as exc:
                self.net.trace("wire-reject", dev=self.addr, error=type(exc).__name__)
                return
        else:
            pkt = item
            st = self.ov[pkt.overlay] if pkt.overlay < self.o else None
            if st is None or st.me.oid != dest_oid:
                self.net.trace("wire-reject", dev=self.addr, error="HeaderAuthError")
                return
        if not self.replay.accept((pkt.overlay, pkt.sender.oid), pkt.payload.nonce):
            self.net.trace("replay-rejected", dev=self.addr, overlay=pkt.overlay)
            return
        self._dispatch(pkt)

    def on_timer(self, token) -> None:
        if self.halted:
            return
        what = token[0]
        if what == "req":
            req = self.pending.pop(token[1], None)
            if req is not None:
                self._on_timeout(token[1], *req)
        elif what == "tick":
            self.tick()
        elif what == "rejoin":
            st = self.ov[token[1]]
            if st.status == OvStatus.JOINING:
                self._send_join(st)
        elif what == "certify":
            if self.status == Status.UNKNOWN:
                self.start_certification(self.entry_addr)

    # --- certification ------------------------------------------------------
    def start_certification(self, entry_addr: int) -> None:
        if self.status == Status.SETTING:
            self._set_status(Status.UNKNOWN)
        self.entry_addr = entry_addr
        self.cert_nonce = self._nonce()
        frame = wire.encode_cert_request(self.anchor.certificate, self.cert_nonce, self.o)
        self.net.send_raw(self, entry_addr, ("cert-req", frame), len(frame))
        self.net.after(self.net.deadline_us, self, ("certify",))

    def _on_cert(self, src_addr: int, item) -> None:
        tag, frame = item
        if tag == "cert-req":
            self._answer_certification(src_addr, frame)
        elif tag == "cert-resp":
            self._finish_certification(src_addr, frame)

    def _answer_certification(self, src_addr: int, frame: bytes) -> None:
        if self.status != Status.RUNNING:
            return
        try:
            cert, r = wire.decode_cert_request(frame)
            check_certificate(cert, self.anchor.ca_certificate, self.anchor.scheme.pki, self.net.now_s)
        except (wire.WireError, CertificateError) as exc:
            self.net.trace("cert-reject", dev=self.addr, peer=src_addr, error=type(exc).__name__)
            return
        oids = [self.anchor.oid(i) for i in range(self.o)]
        sealed = self.anchor.sign_encrypt(cert.subject_public, wire.pack_oids(oids, r), self.rng)
        out = wire.encode_cert_response(sealed, self.anchor.certificate, self.o)
        self.net.send_raw(self, src_addr, ("cert-resp", out), len(out))

    def _finish_certification(self, src_addr: int, frame: bytes) -> None:
        if self.status != Status.UNKNOWN or self.cert_nonce is None:
            return
        try:
            sealed, ncert = wire.decode_cert_response(frame)
            check_certificate(ncert, self.anchor.ca_certificate, self.anchor.scheme.pki, self.net.now_s)
            oids, r = wire.unpack_oids(self.anchor.verify_decrypt(ncert.subject_public, sealed))
        except (wire.WireError, CertificateError, AuthenticationError) as exc:
            self.net.trace("cert-abort", dev=self.addr, error=type(exc).__name__)
            return
        if r != self.cert_nonce or len(oids) != self.o:
            self.net.trace("cert-abort", dev=self.addr, error="NonceMismatch")
            return
        self.cert_nonce = None
        self._set_status(Status.CERTIFIED)
        for i, oid in enumerate(oids):
            st = self.make_overlay(i)
            st.entry = NodeRef(ring_position(oid, self.m), oid, src_addr)
            self.start_join(i)

    def become_first(self) -> None:
        """Bootstrap member: alone in every overlay, holding its own proofs."""
        for s in (Status.UNKNOWN, Status.CERTIFIED):
            self._set_status(s)
        for i in range(self.o):
            st = self.make_overlay(i)
            self._set_ov_status(st, OvStatus.JOINING)
            st.store[self.uid] = (uid_key(self.uid, self.m), self.golden)
            self._set_ov_status(st, OvStatus.MEMBER)

    # --- join -------------------------------------------------------------------
    def start_join(self, ov: int) -> None:
        st = self.ov[ov]
        self._set_ov_status(st, OvStatus.JOINING)
        self._send_join(st)

    def _send_join(self, st: OverlayState) -> None:
        st.join_attempts += 1
        rid = self._new_request("join", st.index, None, self.net.deadline_us)
        payload = Payload(Kind.JOIN_REQUEST, self._nonce(), key=st.me.rid, request_id=rid)
        self._send(st.index, st.entry, payload)

    def _on_join_response(self, st: OverlayState, pkt: Packet) -> None:
        p = pkt.payload
        if p.flags & wire.F_COLLISION:
            self.net.trace("oid-collision", dev=self.addr, overlay=st.index)
            self._regenerate(st)
            self._send_join(st)
            return
        if p.ref is None:
            return
        st.routing.set_successors((p.ref,) + p.refs)
        st.routing.predecessor = None
        self._set_ov_status(st, OvStatus.NON_MEMBER)
        self._originate(st.index, Payload(Kind.PROOF_STORE, self._nonce(), key=uid_key(self.uid, self.m),
                                          uid=self.uid, digest=self.golden))

    # --- routing -------------------------------------------------------------
    def _originate(self, ov: int, payload: Payload) -> None:
        me = self.ov[ov].me
        self._route(Packet(ov, me, me, payload))

    def _request(self, ov: int, kind: str, ctx, payload: Payload, timeout_us: Optional[int] = None) -> int:
        rid = self._new_request(kind, ov, ctx, timeout_us or self.net.deadline_us)
        payload.request_id = rid
        self._originate(ov, payload)
        return rid

    def _route(self, pkt: Packet) -> None:
        st = self.ov[pkt.overlay]
        r = st.routing
        p = pkt.payload
        key = p.key
        me = st.me.rid
        succ = r.successor
        pred = r.predecessor
        if succ.rid == me and pred is not None:
            succ = pred
        final = p.flags & wire.F_FINAL
        if succ.rid == me or (pred is not None and in_interval(key, pred.rid, me, right_closed=True)):
            self._handle_local(st, pkt)
        elif final and pred is None:
            self._handle_local(st, pkt)
        elif p.hops >= MAX_HOPS:
            self.net.trace("ttl-drop", dev=self.addr, overlay=pkt.overlay, kind=p.kind.name)
        elif final:
            self._forward(pkt, pred, p.flags | wire.F_BACKTRACK)
        elif in_interval(key, me, succ.rid, right_closed=True):
            self._forward(pkt, succ, p.flags | wire.F_FINAL)
        else:
            self._forward(pkt, lookup_next_hop(key, r), p.flags)

    def _forward(self, pkt: Packet, nxt: NodeRef, flags: int) -> None:
        self._send(pkt.overlay, nxt, pkt.payload.forwarded(flags), source=pkt.source)

    def _reply(self, pkt: Packet, payload: Payload) -> None:
        payload.request_id = pkt.payload.request_id
        self._send(pkt.overlay, pkt.source, payload)

    def _handle_local(self, st: OverlayState, pkt: Packet) -> None:
        p = pkt.payload
        k = p.kind
        if k == Kind.JOIN_REQUEST:
            self._answer_lookup(st, pkt)
        elif k == Kind.PROOF_STORE or k == Kind.RECOVERY_STORE:
            if p.uid is not None and p.digest is not None:
                self.store_record(st, p.uid, p.digest, recovery=k == Kind.RECOVERY_STORE)
        elif k == Kind.PROOF_QUERY:
            digest = self._answer_query(st, p.uid)
            if digest is None:
                self._reply(pkt, Payload(Kind.PROOF_RESPONSE, self._nonce(), flags=wire.F_NO_PROOF, uid=p.uid))
            else:
                self._reply(pkt, Payload(Kind.PROOF_RESPONSE, self._nonce(), uid=p.uid, digest=digest))
        elif k == Kind.ATTEST_CHALLENGE:
            self._reply(pkt, Payload(Kind.ATTEST_REPORT, self._nonce(), uid=self.uid,
                                     digest=bind(measure(self.region), p.nonce)))

    def _answer_lookup(self, st: OverlayState, pkt: Packet) -> None:
        p = pkt.payload
        me = st.me
        if p.key == me.rid and pkt.source.oid != me.oid:
            self._reply(pkt, Payload(Kind.SUCCESSOR_RESPONSE, self._nonce(), flags=wire.F_COLLISION))
            return
        best, refs = me, tuple(st.routing.successors[:self.s])
        if not p.flags & wire.F_FINGER and st.pending_nm:
            # a joiner that lands in the arc of a pending non-member takes it as successor
            bd = (me.rid - p.key) % (1 << self.m)
            for ref, _, _ in st.pending_nm.values():
                d = (ref.rid - p.key) % (1 << self.m)
                if d < bd and ref.rid != p.key:
                    best, bd = ref, d
            if best is not me:
                refs = (me,) + refs[:self.s - 1]
        self._reply(pkt, Payload(Kind.SUCCESSOR_RESPONSE, self._nonce(), ref=best, refs=refs))

    def _answer_query(self, st: OverlayState, uid: bytes):
        if self.corrupt_mode is not None:
            tag = b"" if self.corrupt_mode == "colluding" else self.addr.to_bytes(4, "little")
            return hashlib.sha512(b"forged" + tag + uid).digest()
        return st.lookup(uid)

    # --- proof storage ----------------------------------------------------------
    def store_record(self, st: OverlayState, uid: bytes, digest: bytes, recovery: bool = False) -> None:
        key = uid_key(uid, self.m)
        fresh = uid not in st.store
        st.store[uid] = (key, digest)
        if recovery and fresh:
            self.net.trace("recovered", dev=self.addr, overlay=st.index, uid=uid[:8].hex())
        if st.pending_nm and st.status == OvStatus.MEMBER:
            for ref, _, _ in list(st.pending_nm.values()):
                if not in_interval(key, ref.rid, st.me.rid, right_closed=True):
                    self._send(st.index, ref, Payload(Kind.PROOFS_UPDATE, self._nonce(), total=DELTA,
                                                      key=key, uid=uid, digest=digest))

    def wipe_proofs(self) -> list:
        lost = []
        for st in self.ov:
            if st is None:
                continue
            lost.extend((uid, st.index) for uid in st.store)
            st.store.clear()
            st.leftovers.clear()
        return lost

    def _send_update(self, st: OverlayState, target: NodeRef) -> None:
        recs = [(uid, k, d) for uid, (k, d) in st.store.items()
                if not in_interval(k, target.rid, st.me.rid, right_closed=True)]
        total = len(recs)
        if not recs:
            self._send(st.index, target, Payload(Kind.PROOFS_UPDATE, self._nonce(), total=0))
        for seq, (uid, k, d) in enumerate(recs):
            self._send(st.index, target, Payload(Kind.PROOFS_UPDATE, self._nonce(), seq=seq, total=total,
                                                 key=k, uid=uid, digest=d))
        self.net.trace("proofs-update", dev=self.addr, overlay=st.index, to=target.addr, records=total)

    def _on_update(self, st: OverlayState, pkt: Packet) -> None:
        p = pkt.payload
        pred = st.routing.predecessor
        if p.uid is not None and p.digest is not None:
            key = uid_key(p.uid, self.m)
            if st.status == OvStatus.MEMBER and pred is not None and \
                    not in_interval(key, pred.rid, st.me.rid, right_closed=True):
                # not ours either: hand it on to whoever is responsible
                self._originate(st.index, Payload(Kind.PROOF_STORE, self._nonce(), key=key,
                                                  uid=p.uid, digest=p.digest))
            elif st.status == OvStatus.MEMBER:
                self.store_record(st, p.uid, p.digest)      # also reaches pending non-members
            else:
                st.store[p.uid] = (key, p.digest)
        if p.total == DELTA or st.status == OvStatus.MEMBER:
            return
        src = pkt.sender.rid
        if st.update_src != src:
            st.update_src, st.update_seen = src, set()
            st.update_from = None
        st.update_seen.add(p.seq)
        if p.total == 0 or len(st.update_seen) >= p.total:
            st.update_from = src

    def _set_predecessor(self, st: OverlayState, new: NodeRef, grant: bool) -> None:
        me = st.me.rid
        st.routing.predecessor = new
        if not st.routing.successors:
            st.routing.set_successors([new])
        moved = {}
        for uid, rec in list(st.store.items()):
            if not in_interval(rec[0], new.rid, me, right_closed=True):
                moved[uid] = st.store.pop(uid)
        for tag in list(st.leftovers):
            bucket = st.leftovers[tag]
            for uid, rec in list(bucket.items()):
                if in_interval(rec[0], new.rid, me, right_closed=True):
                    st.store[uid] = bucket.pop(uid)
            if not bucket:
                del st.leftovers[tag]
        if moved:
            st.leftovers.setdefault(new.rid, {}).update(moved)
            if not grant:
                for uid, (k, d) in moved.items():
                    self._send(st.index, new, Payload(Kind.PROOFS_UPDATE, self._nonce(), total=DELTA,
                                                      key=k, uid=uid, digest=d))
        st.pending_nm.pop(new.rid, None)
        self.net.trace("rectify", dev=self.addr, overlay=st.index, status=st.status.value,
                       pred=new.addr, grant=grant)

    # --- stabilize / rectify -----------------------------------------------------
    def _my_flags(self, st: OverlayState, dest: NodeRef) -> int:
        if st.status != OvStatus.MEMBER:
            f = wire.F_NONMEMBER
            if st.update_from == dest.rid:
                f |= wire.F_HAVE_UPDATE
            return f
        return wire.F_INTEGRATED if st.routing.predecessor is not None else 0

    def tick(self) -> None:
        self.net.after(self.net.period_us, self, ("tick",))
        for st in self.ov:
            if st is not None and st.status in (OvStatus.NON_MEMBER, OvStatus.MEMBER):
                self.stabilize(st)
                if self.net.cfg.fingers:
                    self.refresh_fingers(st)
        if self.status == Status.RUNNING and self.net.cfg.attest_trigger == "random":
            p = self.net.cfg.attest_prob
            start = self.rng.randrange(self.o)
            for j in range(self.o):
                if self.rng.random() < p and self.engage_attestation((start + j) % self.o):
                    break

    def stabilize(self, st: OverlayState) -> None:
        r = st.routing
        succ = r.successor
        if succ.rid == st.me.rid:
            pred = r.predecessor
            if pred is not None and st.status == OvStatus.MEMBER:
                r.set_successors([pred])
                self._notify(st)
            return
        now = self.net.now
        for rid, ent in list(st.pending_nm.items()):
            if now - ent[1] > 5 * self.net.period_us:
                del st.pending_nm[rid]
        rid = self._new_request("stab", st.index, succ, self.net.timeout_us)
        self._send(st.index, succ, Payload(Kind.STABILIZE, self._nonce(), flags=self._my_flags(st, succ),
                                           request_id=rid))

    def _notify(self, st: OverlayState) -> None:
        succ = st.routing.successor
        if succ.rid != st.me.rid:
            self._send(st.index, succ, Payload(Kind.NOTIFY, self._nonce(), flags=self._my_flags(st, succ)))

    def _pong(self, st: OverlayState, pkt: Packet, pred: Optional[NodeRef]) -> None:
        self._reply(pkt, Payload(Kind.SUCCESSOR_RESPONSE, self._nonce(), flags=wire.F_PING, ref=pred,
                                 refs=tuple(st.routing.successors[:self.s])))

    def _on_stabilize(self, st: OverlayState, pkt: Packet) -> None:
        p = pkt.payload
        x = pkt.sender
        if p.flags & wire.F_PING:
            self._pong(st, pkt, st.routing.predecessor)
            return
        if p.flags & wire.F_INTEGRATED:
            st.leftovers.pop(x.rid, None)
        pred = st.routing.predecessor
        if p.flags & wire.F_NONMEMBER and st.status == OvStatus.MEMBER and x.rid != st.me.rid:
            ent = st.pending_nm.get(x.rid)
            if ent is not None:
                ent[1] = self.net.now
            eligible = pred is None or in_interval(x.rid, pred.rid, st.me.rid)
            if eligible and not p.flags & wire.F_HAVE_UPDATE:
                if ent is None or self.net.now - ent[2] > 3 * self.net.period_us:
                    self._send_update(st, x)
                    st.pending_nm[x.rid] = [x, self.net.now, self.net.now]
        if p.flags & wire.F_SUSPECT and p.ref is not None and pred is not None and pred.rid == p.ref.rid:
            rid = self._new_request("ping", st.index, pkt, self.net.timeout_us)
            self._send(st.index, pred, Payload(Kind.STABILIZE, self._nonce(), flags=wire.F_PING, request_id=rid))
            return
        self._pong(st, pkt, pred)

    def _on_successor_response(self, st: OverlayState, pkt: Packet, kind: str, ctx) -> None:
        p = pkt.payload
        r = st.routing
        if kind == "join":
            if st.status == OvStatus.JOINING:
                self._on_join_response(st, pkt)
        elif kind == "finger":
            if p.ref is not None and p.ref.rid != st.me.rid:
                r.set_finger(ctx, p.ref)
        elif kind == "ping":
            self._pong(st, ctx, r.predecessor)
        elif kind in ("stab", "suspect"):
            x = p.ref
            lst = [pkt.sender, *p.refs]
            if x is not None and x.rid != st.me.rid and in_interval(x.rid, st.me.rid, pkt.sender.rid):
                lst.insert(0, x)
            r.set_successors(lst)
            self._notify(st)

    def _on_notify(self, st: OverlayState, pkt: Packet) -> None:
        p = pkt.payload
        x = pkt.sender
        if p.flags & wire.F_GRANT:
            if st.status == OvStatus.NON_MEMBER and x.rid == st.routing.successor.rid:
                st.pending_nm.clear()
                self._set_ov_status(st, OvStatus.MEMBER)
            return
        if st.status != OvStatus.MEMBER or x.rid == st.me.rid:
            return  # rectify disabled while not a member
        pred = st.routing.predecessor
        closer = pred is None or in_interval(x.rid, pred.rid, st.me.rid)
        if p.flags & wire.F_NONMEMBER:
            if p.flags & wire.F_HAVE_UPDATE and x.rid in st.pending_nm and \
                    (closer or (pred is not None and pred.rid == x.rid)):
                if pred is None or pred.rid != x.rid:
                    self._set_predecessor(st, x, grant=True)
                self._send(st.index, x, Payload(Kind.NOTIFY, self._nonce(), flags=wire.F_GRANT))
        elif closer:
            self._set_predecessor(st, x, grant=False)

    # --- fingers --------------------------------------------------------------
    def refresh_fingers(self, st: OverlayState) -> None:
        r = st.routing
        succ = r.successor
        if succ.rid == st.me.rid:
            return
        d = (succ.rid - st.me.rid) % (1 << self.m)
        k = min(d.bit_length(), self.m)
        if st.prefix != (succ, k):
            for i in range(1, k + 1):
                r.set_finger(i, succ)
            st.prefix = (succ, k)
        if k >= self.m:
            return
        i = st.finger_next if k < st.finger_next <= self.m else k + 1
        st.finger_next = i + 1
        self._request(st.index, "finger", i, Payload(Kind.JOIN_REQUEST, self._nonce(), flags=wire.F_FINGER,
                                                     key=finger_start(st.me.rid, i, self.m)))

    # --- absence detection ------------------------------------------------------
    def _on_timeout(self, rid: int, kind: str, ov: int, ctx) -> None:
        st = self.ov[ov] if ov is not None and ov >= 0 else None
        if kind in ("stab", "suspect"):
            dead = ctx
            st.routing.forget(dead.rid)
            if st.routing.successors:
                nxt = st.routing.successors[0]
                rid2 = self._new_request("suspect", ov, nxt, 3 * self.net.timeout_us)
                self._send(ov, nxt, Payload(Kind.STABILIZE, self._nonce(),
                                            flags=self._my_flags(st, nxt) | wire.F_SUSPECT,
                                            ref=dead, request_id=rid2))
            else:
                self._partition(st)
        elif kind == "ping":
            pkt = ctx
            dead = st.routing.predecessor
            if dead is None:
                return
            st.routing.forget(dead.rid)
            self.net.alert(self, ov, dead)
            sender = pkt.sender
            if not pkt.payload.flags & wire.F_NONMEMBER:
                self._set_predecessor(st, sender, grant=False)
            else:
                self._reabsorb(st)
            self._pong(st, pkt, st.routing.predecessor)
        elif kind == "join":
            backoff = min(8, st.join_attempts) * self.net.period_us
            self.net.after(backoff, self, ("rejoin", ov))
        elif kind == "challenge":
            if ctx == self._session_token and self.session.attest_in_progress:
                self.session.abort()
                self.net.verdict(self, None, reason="report-timeout")
        elif kind == "query":
            j, token = ctx
            if token == self._session_token and self.session.attest_in_progress:
                self.session.fill(j, Slot.TIMEOUT)
                self._maybe_vote()

    def _reabsorb(self, st: OverlayState) -> None:
        for bucket in st.leftovers.values():
            st.store.update(bucket)
        st.leftovers.clear()

    def _partition(self, st: OverlayState) -> None:
        self.net.trace("partition", dev=self.addr, overlay=st.index)
        cands = sorted(st.routing.distinct_fingers(), key=lambda f: (f.rid - st.me.rid) % (1 << self.m))
        st.routing.set_successors(cands[:self.s])

    # --- attestation ------------------------------------------------------------
    def engage_attestation(self, ov: int) -> bool:
        """Start a session from overlay ``ov`` unless one is already running."""
        if self.session.attest_in_progress or self.status != Status.RUNNING:
            return False
        self._session_token += 1
        nonce = self._nonce()
        self.session.begin(ov, nonce, self.net.now)
        self.net.trace("attest-start", dev=self.addr, overlay=ov, status=self.status.value)
        target = self.rng.getrandbits(self.m)
        self._request(ov, "challenge", self._session_token,
                      Payload(Kind.ATTEST_CHALLENGE, nonce, key=target))
        return True

    def _on_report(self, pkt: Packet, token) -> None:
        if token != self._session_token or not self.session.attest_in_progress:
            return
        p = pkt.payload
        if p.uid is None or p.digest is None:
            return
        self.session.report(p.uid, p.digest, pkt.source)
        key = uid_key(p.uid, self.m)
        for j in range(self.o):
            self._request(j, "query", (j, token), Payload(Kind.PROOF_QUERY, self._nonce(), key=key, uid=p.uid))

    def _on_proof_response(self, pkt: Packet, ctx) -> None:
        j, token = ctx
        if token != self._session_token or not self.session.attest_in_progress:
            return
        p = pkt.payload
        if p.flags & wire.F_NO_PROOF or p.digest is None:
            self.session.fill(j, Slot.NO_PROOF, pkt.source)
        else:
            self.session.fill(j, p.digest, pkt.source)
        self._maybe_vote()

    def _maybe_vote(self) -> None:
        sess = self.session
        if not sess.ready():
            return
        verdict = sess.finish()
        if verdict.elected is not None:
            key = uid_key(sess.uid, self.m)
            for j in verdict.recovered:
                self._originate(j, Payload(Kind.RECOVERY_STORE, self._nonce(), key=key, uid=sess.uid,
                                           digest=verdict.elected))
        self.net.verdict(self, verdict)

    # --- dispatch -----------------------------------------------------------------
    def _dispatch(self, pkt: Packet) -> None:
        st = self.ov[pkt.overlay]
        p = pkt.payload
        k = p.kind
        if k in wire.ROUTED_KINDS:
            self._route(pkt)
        elif k == Kind.STABILIZE:
            self._on_stabilize(st, pkt)
        elif k == Kind.NOTIFY:
            self._on_notify(st, pkt)
        elif k == Kind.PROOFS_UPDATE:
            self._on_update(st, pkt)
        else:
            req = self.pending.pop(p.request_id, None)
            if req is None:
                return
            kind, ov, ctx = req
            if k == Kind.SUCCESSOR_RESPONSE:
                self._on_successor_response(st, pkt, kind, ctx)
            elif k == Kind.ATTEST_REPORT and kind == "challenge":
                self._on_report(pkt, ctx)
            elif k == Kind.PROOF_RESPONSE and kind == "query":
                self._on_proof_response(pkt, ctx)

    # --- snapshot and accounting -------------------------------------------------
    def storage_bytes(self) -> int:
        """Byte-accounted storage, tallied slot by slot from live state."""
        total = self.anchor.fixed_storage_bytes()
        for st in self.ov:
            if st is None:
                continue
            total += SECRET_BYTES + wire.REF_BYTES          # secret X and own OID record
            total += wire.REF_BYTES                         # predecessor slot
            total += wire.REF_BYTES * self.s                # successor slots
            total += wire.REF_BYTES * len(st.routing.distinct_fingers())
            total += PROOF_BYTES * st.proof_count()
        return total

    def snapshot(self) -> dict:
        ovs = []
        for st in self.ov:
            if st is None:
                ovs.append(None)
                continue
            r = st.routing
            ovs.append({
                "index": st.index,
                "status": st.status.value if st.status else None,
                "rid": st.me.rid,
                "pred": r.predecessor.rid if r.predecessor else None,
                "successors": [x.rid for x in r.successors],
                "fingers": sorted(f.rid for f in r.distinct_fingers()),
                "store": sorted(uid[:8].hex() for uid in st.store),
                "leftovers": {str(t): len(b) for t, b in st.leftovers.items()},
                "proofs": st.proof_count(),
            })
        return {"addr": self.addr, "uid": self.uid[:8].hex(), "key": uid_key(self.uid, self.m),
                "status": self.status.value,
                "halted": self.halted, "corrupt": self.corrupt_mode,
                "tampered": measure(self.region) != self.golden,
                "overlays": ovs, "storage_bytes": self.storage_bytes()}
