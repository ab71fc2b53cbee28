import random

import pytest

from safed import wire
from safed.attest import Outcome
from safed.crypto import CertificateAuthority
from safed.invariants import check_conservation, check_fsm, check_ring
from safed.node import OvStatus, Status, uid_key
from safed.simnet import Network, SimConfig


def network(**kw):
    kw.setdefault("attest_prob", 0.0)
    net = Network(SimConfig(**kw))
    net.build()
    return net


def by_rid(net, ov, rid):
    return next(d for d in net.devices if d.ov[ov] is not None and d.ov[ov].me.rid == rid)


def events(trace, kind, **match):
    return [r for r in trace if r["type"] == kind and all(r.get(k) == v for k, v in match.items())]


# --- join flow ----------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_three_device_join_sequence():
    net = network(seed=1, n=3, o=1, bootstrap="join", join_interval_ms=1000, horizon_s=8)
    res = net.run()
    tr = res.trace
    for joiner in (1, 2):
        states = [r["new"] for r in events(tr, "fsm", dev=joiner) if "overlay" in r]
        assert states == ["joining", "non-member", "member"]
        upd = events(tr, "proofs-update", to=joiner)
        grant = events(tr, "rectify", pred=joiner, grant=True)
        assert upd and grant
        # the update copy precedes the grant, and both come from the joiner's successor
        assert upd[0]["t_us"] < grant[0]["t_us"] and upd[0]["dev"] == grant[0]["dev"]
        assert events(tr, "fsm", dev=joiner, new="member-and-running")
    assert check_fsm(tr) == []
    assert check_ring(res.final) == [] and check_conservation(res.final) == []


@pytest.mark.criterion(6)
def test_handoff_copies_then_leftovers_are_deleted():
    net = network(seed=3, n=8, o=1, bootstrap="join", join_interval_ms=2000, horizon_s=30)
    window = None
    t = 0.0
    while t < 30 and window is None:
        t += 0.005
        net.run(t)
        for d in net.devices:
            st = d.ov[0]
            if st is None or st.status != OvStatus.NON_MEMBER or st.update_from is None:
                continue
            holder = by_rid(net, 0, st.update_from)
            both = [u for u in st.store if u != d.uid and u in holder.ov[0].store]
            if both:
                window = (d, holder, both)
    assert window is not None, "no join carried records"
    joiner, holder, copied = window
    # during the handoff the old holder still answers for the copied records
    for u in copied:
        assert holder.ov[0].lookup(u) == joiner.ov[0].store[u][1]
    while joiner.ov[0].status != OvStatus.MEMBER:
        t += 0.005
        net.run(t)
    # after the grant the moved records sit in the holder's leftovers, still answerable
    bucket = holder.ov[0].leftovers.get(joiner.ov[0].me.rid, {})
    assert set(copied) <= set(bucket)
    assert all(holder.ov[0].lookup(u) is not None for u in copied)
    net.run(t + 3)
    # once the joiner stabilizes as an integrated member the leftovers are gone
    assert joiner.ov[0].me.rid not in holder.ov[0].leftovers
    assert all(u not in holder.ov[0].store for u in copied)
    net.run(30)
    assert check_conservation(net.snapshot()) == []


@pytest.mark.criterion(6)
@pytest.mark.parametrize("seed", [1, 2, 3, 4])
@pytest.mark.parametrize("n", [3, 5, 8])
def test_concurrent_joins_converge(seed, n):
    """Every joiner contacts the same entry at the same instant."""
    res = network(seed=seed, n=n, o=2, bootstrap="join", join_interval_ms=0, horizon_s=60).run()
    snap = res.final
    assert all(d["status"] == Status.RUNNING.value for d in snap["devices"])
    assert check_fsm(res.trace) == []
    assert check_ring(snap) == []
    assert check_conservation(snap) == []


@pytest.mark.criterion(6)
def test_joiner_in_pending_arc_takes_non_member_successor():
    """A joiner landing between a pending non-member and its successor is pointed at the non-member."""
    net = network(seed=1, n=4, o=1, bootstrap="join", join_interval_ms=0, horizon_s=0)
    m = net.cfg.m
    holder = net.devices[0]
    st = holder.ov[0]
    me = st.me
    # a fake pending non-member just behind the holder
    nm = wire.NodeRef((me.rid - 1000) % (1 << m), 99, 3)
    st.pending_nm[nm.rid] = [nm, 0, 0]
    joiner_key = (nm.rid - 10) % (1 << m)
    sent = []
    holder._reply = lambda pkt, payload: sent.append(payload)
    pkt = wire.Packet(0, me, me, wire.Payload(wire.Kind.JOIN_REQUEST, bytes(16), key=joiner_key))
    holder._answer_lookup(st, pkt)
    assert sent[0].ref == nm and sent[0].refs[0] == me
    # a joiner outside that arc still gets the holder
    sent.clear()
    pkt = wire.Packet(0, me, me, wire.Payload(wire.Kind.JOIN_REQUEST, bytes(16), key=(nm.rid + 10) % (1 << m)))
    holder._answer_lookup(st, pkt)
    assert sent[0].ref == me


def test_rectify_only_by_members():
    res = network(seed=5, n=6, o=1, bootstrap="join", join_interval_ms=300, horizon_s=20).run()
    rect = events(res.trace, "rectify")
    assert rect and all(r["status"] == OvStatus.MEMBER.value for r in rect)


# --- certification ----------------------------------------------------------------------

def cert_pair(seed=1):
    net = network(seed=seed, n=2, o=2, bootstrap="join", join_interval_ms=10_000, horizon_s=0)
    net.run(0)
    return net, net.devices[0], net.devices[1]


def test_certification_success():
    net, entry, joiner = cert_pair()
    net.run(12)
    assert joiner.status in (Status.CERTIFIED, Status.RUNNING)
    # overlay entries carry the entry device's OIDs
    assert [joiner.ov[i].entry.oid for i in range(2)] == [entry.ov[i].me.oid for i in range(2)]


def test_stale_nonce_aborts():
    net, entry, joiner = cert_pair()
    joiner._set_status(Status.UNKNOWN)
    joiner.cert_nonce = b"A" * 16
    oids = [entry.anchor.oid(i) for i in range(2)]
    sealed = entry.anchor.sign_encrypt(joiner.anchor.public_key, wire.pack_oids(oids, b"B" * 16), entry.rng)
    joiner._finish_certification(0, wire.encode_cert_response(sealed, entry.anchor.certificate, 2))
    assert joiner.status == Status.UNKNOWN
    assert events(net.trace_log, "cert-abort", dev=1, error="NonceMismatch")


def test_replayed_response_is_ignored():
    net, entry, joiner = cert_pair()
    captured = []
    orig = net.send_raw

    def spy(src, dst, item, nbytes):
        if item[0] == "cert-resp":
            captured.append(item)
        orig(src, dst, item, nbytes)

    net.send_raw = spy
    net.run(12)
    assert captured and joiner.status != Status.UNKNOWN
    before = len(net.trace_log)
    joiner.deliver(0, None, captured[0])
    assert len(net.trace_log) == before      # no state change, no new OIDs


def test_response_under_wrong_key_aborts():
    net, entry, joiner = cert_pair()
    joiner._set_status(Status.UNKNOWN)
    joiner.cert_nonce = b"A" * 16
    oids = [entry.anchor.oid(i) for i in range(2)]
    # sealed to the entry's own key instead of the joiner's
    sealed = entry.anchor.sign_encrypt(entry.anchor.public_key, wire.pack_oids(oids, b"A" * 16), entry.rng)
    joiner._finish_certification(0, wire.encode_cert_response(sealed, entry.anchor.certificate, 2))
    assert joiner.status == Status.UNKNOWN
    assert events(net.trace_log, "cert-abort", dev=1, error="AuthenticationError")


def test_self_signed_request_rejected():
    net, entry, _ = cert_pair()
    rogue = CertificateAuthority(net.scheme, random.Random(77))
    frame = wire.encode_cert_request(rogue.issue(rogue.public), b"r" * 16, 2)
    before = net.bytes_sent
    entry._answer_certification(1, frame)
    assert events(net.trace_log, "cert-reject", dev=0, error="UnknownCAError")
    assert net.bytes_sent == before


def test_non_running_device_does_not_answer():
    net, entry, joiner = cert_pair()
    frame = wire.encode_cert_request(entry.anchor.certificate, b"r" * 16, 2)
    before = net.bytes_sent
    joiner._answer_certification(0, frame)
    assert net.bytes_sent == before


# --- attestation ------------------------------------------------------------------------

def aim(verifier, rid):
    """Make the verifier's random challenge target land on ``rid``."""
    orig = verifier.rng.getrandbits
    verifier.rng.getrandbits = lambda bits: rid if bits == verifier.m else orig(bits)


def test_attestation_needs_running_status():
    net, _, joiner = cert_pair()
    assert not joiner.engage_attestation(0)


def test_tampered_prover_is_caught():
    net = network(seed=2, n=10, o=3, horizon_s=0)
    victim = net.devices[4]
    reg = bytearray(victim.region)
    reg[0] ^= 1
    victim.region = bytes(reg)
    verifier = net.devices[0]
    # drive the challenge straight at the victim's ring position
    aim(net.devices[0], victim.ov[0].me.rid)
    assert verifier.engage_attestation(0)
    assert not verifier.engage_attestation(1)      # one session at a time
    net.run(5)
    v = events(net.trace_log, "verdict", verifier=0)
    assert v[0]["prover"] == 4 and v[0]["outcome"] == Outcome.PROVER_CORRUPTED.value
    assert 4 in v[0]["flagged"] and net.devices[4].halted


def test_healthy_prover_and_recovery():
    net = network(seed=2, n=10, o=3, horizon_s=0, reaction="persist")
    prover = net.devices[5]
    for st in (d.ov[1] for d in net.devices):
        st.store.pop(prover.uid, None)
    aim(net.devices[0], prover.ov[0].me.rid)
    net.devices[0].engage_attestation(0)
    net.run(5)
    v = events(net.trace_log, "verdict", verifier=0)[0]
    assert v["prover"] == 5 and v["outcome"] == Outcome.HEALTHY.value and v["recovered"] == [1]
    assert events(net.trace_log, "recovered", overlay=1)
    assert check_conservation(net.snapshot()) == []


def test_uid_key_is_cached_ring_position():
    from safed.crypto import ring_position
    uid = bytes(range(64))
    assert uid_key(uid, 64) == ring_position(uid, 64)
