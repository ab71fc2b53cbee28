"""Global checks over snapshots and traces.

Each checker returns a list of human-readable violations; empty means the
property holds.
"""

from __future__ import annotations

import bisect
from collections import Counter

from .node import GLOBAL_EDGES, OVERLAY_EDGES, OvStatus, Status

FIXED_BYTES = 1832
PER_OVERLAY_BYTES = 168
REF_BYTES = 68
PROOF_BYTES = 128


def memory_formula(s: int, f: int, p: int, o: int) -> int:
    """``M = 1832 + [168 + 68 s + 68 f + 128 p] * o``."""
    return FIXED_BYTES + (PER_OVERLAY_BYTES + REF_BYTES * s + REF_BYTES * f + PROOF_BYTES * p) * o


def device_memory(dev: dict, s: int) -> int:
    """The formula applied overlay by overlay to one snapshot record."""
    total = FIXED_BYTES
    for ov in dev["overlays"]:
        if ov is not None:
            total += memory_formula(s, len(ov["fingers"]), ov["proofs"], 1) - FIXED_BYTES
    return total


def check_memory(snapshot: dict, s: int) -> list:
    bad = []
    for dev in snapshot["devices"]:
        want = device_memory(dev, s)
        if want != dev["storage_bytes"]:
            bad.append(f"device {dev['addr']}: formula {want} != accounted {dev['storage_bytes']}")
    return bad


def _live(snapshot: dict) -> list:
    return [d for d in snapshot["devices"] if not d["halted"]]


def check_ring(snapshot: dict) -> list:
    """Every live member's successor and predecessor are its true ring neighbours."""
    bad = []
    devs = _live(snapshot)
    if not devs:
        return bad
    o = len(devs[0]["overlays"])
    for ov in range(o):
        mem = [d["overlays"][ov] for d in devs if d["overlays"][ov] is not None
               and d["overlays"][ov]["status"] == OvStatus.MEMBER.value]
        ids = sorted(x["rid"] for x in mem)
        n = len(ids)
        for x in mem:
            i = ids.index(x["rid"])
            want_succ = [ids[(i + k) % n] for k in range(1, min(len(x["successors"]), n - 1) + 1)]
            if n > 1 and x["successors"][:len(want_succ)] != want_succ:
                bad.append(f"overlay {ov} node {x['rid']:x}: successors {x['successors']} != {want_succ}")
            if n > 1 and x["pred"] != ids[i - 1]:
                bad.append(f"overlay {ov} node {x['rid']:x}: predecessor wrong")
    return bad


def check_conservation(snapshot: dict) -> list:
    """Each live device's proof is stored exactly once per overlay, at its responsible node."""
    bad = []
    devs = _live(snapshot)
    uid_keys = {d["uid"]: d["key"] for d in devs}
    o = len(devs[0]["overlays"]) if devs else 0
    live_uids = {d["uid"] for d in devs}
    for ov in range(o):
        mem = [d["overlays"][ov] for d in devs if d["overlays"][ov] is not None
               and d["overlays"][ov]["status"] == OvStatus.MEMBER.value]
        ids = sorted(x["rid"] for x in mem)
        holders = Counter()
        where = {}
        for x in mem:
            for u in x["store"]:
                holders[u] += 1
                where[u] = x["rid"]
        for u in live_uids:
            if holders[u] != 1:
                bad.append(f"overlay {ov}: proof {u} held {holders[u]} times")
                continue
            k = uid_keys[u]
            j = bisect.bisect_left(ids, k)
            if where[u] != ids[j % len(ids)]:
                bad.append(f"overlay {ov}: proof {u} not at its responsible node")
    return bad


def check_fsm(trace: list) -> list:
    """Every status change is an edge of the device state machine; no early attestation."""
    bad = []
    g = {}
    per = {}
    for rec in trace:
        t = rec["type"]
        if t == "fsm":
            old = rec["old"]
            if "overlay" in rec:
                key = (rec["dev"], rec["overlay"])
                edge = (OvStatus(old) if old else None, OvStatus(rec["new"]))
                if edge not in OVERLAY_EDGES or per.get(key) != (edge[0] and edge[0].value):
                    bad.append(f"t={rec['t_us']} dev {rec['dev']} overlay {rec['overlay']}: "
                               f"illegal {old}->{rec['new']}")
                per[key] = rec["new"]
            else:
                edge = (Status(old) if old else None, Status(rec["new"]))
                if edge not in GLOBAL_EDGES or g.get(rec["dev"]) != (edge[0] and edge[0].value):
                    bad.append(f"t={rec['t_us']} dev {rec['dev']}: illegal {old}->{rec['new']}")
                g[rec["dev"]] = rec["new"]
        elif t == "rectify" and rec["status"] != OvStatus.MEMBER.value:
            bad.append(f"t={rec['t_us']} dev {rec['dev']}: rectify while {rec['status']}")
        elif t == "attest-start" and rec["status"] != Status.RUNNING.value:
            bad.append(f"t={rec['t_us']} dev {rec['dev']}: attestation before member-and-running")
    return bad


def check_sessions(trace: list) -> list:
    """No device ever runs two attestation sessions at once."""
    open_ = set()
    bad = []
    for rec in trace:
        if rec["type"] == "attest-start":
            if rec["dev"] in open_:
                bad.append(f"t={rec['t_us']} dev {rec['dev']}: concurrent session")
            open_.add(rec["dev"])
        elif rec["type"] == "verdict":
            open_.discard(rec["verifier"])
    return bad
