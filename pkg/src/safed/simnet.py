"""Deterministic discrete-event network for SAFEd devices.

Time is an integer count of microseconds.  Events are ordered by
``(time, insertion sequence)``.  One-hop delay is::

    base_latency + bytes*8 / link_rate + crypto_delay * 2

(one encryption at the sender, one decryption at the receiver).
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
import json
import random
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from . import wire
from .attest import Outcome, Reaction, measure
from .crypto import CertificateAuthority, TrustedAnchor, get_scheme
from .node import Device, OvStatus, Status, uid_key
from .ring import NodeRef, exact_fingers

REGION_BYTES = 256
EV_DELIVER, EV_TIMER, EV_INJECT, EV_SNAPSHOT = 0, 1, 2, 3
ACTIONS = ("drop-proofs", "tamper-device", "remove-device", "corrupt-host", "drop-message",
           "replay-message", "attest-request")


class ScenarioError(ValueError):
    """A configuration that cannot be run (bad field, unknown device id, ...)."""


@dataclass
class SimConfig:
    seed: int = 1
    n: int = 16
    o: int = 3
    s: int = 2
    m: int = 64
    crypto_delay_ms: float = 10.0
    link_rate_kbps: float = 250.0
    base_latency_ms: float = 2.0
    stabilize_ms: float = 1000.0
    attest_prob: float = 0.2
    attest_trigger: str = "random"
    bootstrap: str = "converged"
    join_interval_ms: float = 500.0
    horizon_s: float = 30.0
    codec: bool = False
    scheme: str = "test"
    fingers: bool = True
    reaction: str = "isolate"
    replay_window: int = 64
    snapshot_every_s: float = 0.0
    attacks: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ScenarioError(f"unknown network field(s): {', '.join(sorted(unknown))}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.blake2b(json.dumps(self.to_dict(), sort_keys=True).encode(), digest_size=8).hexdigest()

    def validate(self) -> None:
        if self.n < 1 or self.o < 1 or self.s < 1:
            raise ScenarioError("n, o and s must be positive")
        if not 8 <= self.m <= 64:
            raise ScenarioError("m must be within [8, 64]")
        if self.bootstrap not in ("converged", "join"):
            raise ScenarioError(f"bootstrap must be 'converged' or 'join', not {self.bootstrap!r}")
        if self.attest_trigger not in ("random", "on-demand"):
            raise ScenarioError("attest_trigger must be 'random' or 'on-demand'")
        if not 0.0 <= self.attest_prob <= 1.0:
            raise ScenarioError("attest_prob must be within [0, 1]")
        if self.link_rate_kbps <= 0 or self.stabilize_ms <= 0 or self.horizon_s < 0:
            raise ScenarioError("link rate, stabilize period and horizon must be positive")
        try:
            Reaction(self.reaction)
        except ValueError:
            raise ScenarioError(f"unknown reaction strategy {self.reaction!r}") from None
        get_scheme(self.scheme)
        for i, a in enumerate(self.attacks):
            if not isinstance(a, dict) or a.get("action") not in ACTIONS:
                raise ScenarioError(f"attacks[{i}]: unknown action {a.get('action') if isinstance(a, dict) else a!r}")
            for dev in a.get("ids", []):
                if not isinstance(dev, int) or not 0 <= dev < self.n:
                    raise ScenarioError(f"attacks[{i}]: unknown device id {dev!r}")
            if "dev" in a and not (isinstance(a["dev"], int) and 0 <= a["dev"] < self.n):
                raise ScenarioError(f"attacks[{i}]: unknown device id {a['dev']!r}")


def hop_delay_us(nbytes: int, cfg: SimConfig, crypto_ops: int = 2) -> int:
    ser = (nbytes * 8 * 1_000_000) / (cfg.link_rate_kbps * 1000)
    return int(round(cfg.base_latency_ms * 1000 + ser + crypto_ops * cfg.crypto_delay_ms * 1000))


@dataclass
class SimResult:
    config: SimConfig
    trace: list
    snapshots: list
    stats: dict
    digest: str
    end_us: int

    @property
    def final(self) -> dict:
        return self.snapshots[-1]


class Network:
    """Virtual clock, transport and attack injector."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.rng = random.Random(cfg.seed)
        self.attack_rng = random.Random(cfg.seed ^ 0x5AFED)
        self.scheme = get_scheme(cfg.scheme)
        self.routine_bytes = wire.routine_size(cfg.s)
        self.period_us = int(cfg.stabilize_ms * 1000)
        one_way = hop_delay_us(self.routine_bytes, cfg)
        self.timeout_us = 3 * one_way
        self.deadline_us = 16 * self.timeout_us
        self.devices: list = []
        self.trace_log: list = []
        self.snapshots: list = []
        self.msg_counts: dict = {}
        self.bytes_sent = 0
        self._hash = hashlib.blake2b(digest_size=16)
        self._drop_rules: list = []
        self._replay_rules: list = []
        self.latencies: list = []
        self.ca: Optional[CertificateAuthority] = None
        self.uid_owner: dict = {}

    # --- clock and events ----------------------------------------------------
    @property
    def now_s(self) -> int:
        return self.now // 1_000_000

    def _push(self, t: int, code: int, data) -> None:
        if t < self.now:
            raise RuntimeError("event scheduled in the past")
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, code, data))

    def after(self, delay_us: int, dev: Device, token) -> None:
        self._push(self.now + delay_us, EV_TIMER, (dev, token))

    def trace(self, kind: str, /, **fields_) -> None:
        rec = {"t_us": self.now, "type": kind, **fields_}
        self.trace_log.append(rec)
        self._hash.update(json.dumps(rec, sort_keys=True).encode())

    # --- transport -----------------------------------------------------------
    def send(self, src: Device, dest: NodeRef, pkt: wire.Packet) -> None:
        kind = pkt.payload.kind
        if self.cfg.codec:
            item = wire.encode(pkt, src.anchor, dest.oid, self.cfg.s, self.rng)
            nbytes = len(item)
        else:
            item = pkt
            nbytes = self.routine_bytes
        self.msg_counts[kind.name] = self.msg_counts.get(kind.name, 0) + 1
        self.bytes_sent += nbytes
        if self._drop_rules and self._match_drop(src.addr, dest.addr, kind.name):
            return
        t = self.now + hop_delay_us(nbytes, self.cfg)
        self._push(t, EV_DELIVER, (dest.addr, src.addr, dest.oid, item))
        if self._replay_rules:
            self._maybe_capture(t, dest.addr, src.addr, dest.oid, item, kind.name)

    def send_raw(self, src: Device, dst_addr: int, item, nbytes: int) -> None:
        self.msg_counts[item[0]] = self.msg_counts.get(item[0], 0) + 1
        self.bytes_sent += nbytes
        self._push(self.now + hop_delay_us(nbytes, self.cfg), EV_DELIVER, (dst_addr, src.addr, None, item))

    def _match(self, rule: dict, src: int, dst: int, kind: str) -> bool:
        if self.now < rule["after_us"]:
            return False
        if rule.get("kind") not in (None, kind):
            return False
        if rule.get("src") not in (None, src) or rule.get("dst") not in (None, dst):
            return False
        return True

    def _match_drop(self, src: int, dst: int, kind: str) -> bool:
        for rule in self._drop_rules:
            if rule["left"] > 0 and self._match(rule, src, dst, kind):
                rule["left"] -= 1
                self.trace("msg-drop", src=src, dst=dst, kind=kind)
                return True
        return False

    def _maybe_capture(self, t, dst, src, oid, item, kind) -> None:
        for rule in self._replay_rules:
            if rule["left"] > 0 and self._match(rule, src, dst, kind):
                rule["left"] -= 1
                self._push(t + rule["delay_us"], EV_DELIVER, (dst, src, oid, item))
                self.trace("replay-injected", src=src, dst=dst, kind=kind)

    # --- device callbacks --------------------------------------------------------
    def alert(self, dev: Device, overlay: int, missing: NodeRef) -> None:
        self.trace("alert", dev=dev.addr, overlay=overlay, missing=missing.addr)

    def verdict(self, dev: Device, verdict, reason: Optional[str] = None) -> None:
        sess = dev.session
        latency = self.now - sess.started
        if verdict is None:
            self.trace("verdict", verifier=dev.addr, prover=None, outcome=Outcome.POSSIBLE_INFECTION.value,
                       reason=reason, flagged=[], latency_us=latency, overlay=sess.overlay)
            return
        prover = sess.prover.addr if sess.prover is not None else None
        hosts = [sess.hosts[j].addr for j in verdict.flagged_overlays if sess.hosts[j] is not None]
        flagged = ([prover] if verdict.prover_corrupted else []) + hosts
        slots = [s.hex()[:8] if isinstance(s, bytes) else s.value for s in sess.proof]
        bad_hosts = sum(1 for h, s in zip(sess.hosts, sess.proof)
                        if h is not None and isinstance(s, bytes) and self.devices[h.addr].corrupt_mode)
        self.trace("verdict", verifier=dev.addr, prover=prover, outcome=verdict.outcome.value,
                   elected_golden=(verdict.elected == self.devices[prover].golden) if prover is not None
                   and verdict.elected is not None else None,
                   flagged=flagged, slots=slots, corrupt_slots=bad_hosts, recovered=verdict.recovered,
                   latency_us=latency,
                   overlay=sess.overlay)
        self.latencies.append(latency)
        if flagged:
            self.react(flagged)

    def react(self, addrs: list) -> None:
        how = Reaction(self.cfg.reaction)
        for a in addrs:
            d = self.devices[a]
            if d.halted:
                continue
            if how is Reaction.ISOLATE:
                d.halted = True
                self.trace("quarantine", dev=a)
            elif how is Reaction.HARD_RESET:
                d.region = d.pristine
                d.corrupt_mode = None
                self.trace("hard-reset", dev=a)
            else:
                self.trace("persist", dev=a)

    # --- construction ----------------------------------------------------------
    def _make_device(self, addr: int) -> Device:
        r = random.Random(self.cfg.seed * 1_000_003 + addr)
        uid = r.randbytes(64)
        region = r.randbytes(REGION_BYTES)
        anchor = TrustedAnchor(self.scheme, uid, measure(region), self.ca, r)
        dev = Device(self, addr, anchor, region, r)
        dev.pristine = region
        self.uid_owner[uid[:8].hex()] = addr
        return dev

    def build(self) -> None:
        cfg = self.cfg
        self.ca = CertificateAuthority(self.scheme, random.Random(cfg.seed ^ 0xCA), validity=10 ** 9)
        self.devices = [self._make_device(i) for i in range(cfg.n)]
        if cfg.bootstrap == "converged":
            self._converge()
        else:
            self.devices[0].become_first()
            step = int(cfg.join_interval_ms * 1000)
            for d in self.devices[1:]:
                d._set_status(Status.UNKNOWN)
                self._push(step * d.addr, EV_TIMER, (d, ("certify",)))
                d.entry_addr = 0
        for d in self.devices:
            self._push(self.rng.randrange(self.period_us), EV_TIMER, (d, ("tick",)))
        for i, a in enumerate(cfg.attacks):
            self._schedule_attack(i, a)
        if cfg.snapshot_every_s > 0:
            every = int(cfg.snapshot_every_s * 1_000_000)
            t = every
            while t <= cfg.horizon_s * 1_000_000:
                self._push(t, EV_SNAPSHOT, None)
                t += every

    def _converge(self) -> None:
        """Place every device directly into a stabilized ring (no join traffic)."""
        cfg = self.cfg
        for d in self.devices:
            d._set_status(Status.UNKNOWN)
            d._set_status(Status.CERTIFIED)
        for ov in range(cfg.o):
            byrid = {}
            for d in self.devices:
                st = d.make_overlay(ov)
                while st.me.rid in byrid:
                    self.trace("oid-collision", dev=d.addr, overlay=ov)
                    d._regenerate(st)
                byrid[st.me.rid] = st.me
                d._set_ov_status(st, OvStatus.JOINING)
            ids = sorted(byrid)
            pos = {rid: i for i, rid in enumerate(ids)}
            n = len(ids)
            for d in self.devices:
                st = d.ov[ov]
                i = pos[st.me.rid]
                r = st.routing
                r.predecessor = byrid[ids[i - 1]] if n > 1 else None
                r.set_successors(byrid[ids[(i + k) % n]] for k in range(1, cfg.s + 1))
                fl = exact_fingers(st.me.rid, ids, cfg.m)
                r.fingers = [byrid[f] if f != st.me.rid else None for f in fl]
                r._distinct = None
            for d in self.devices:
                k = uid_key(d.uid, cfg.m)
                j = bisect.bisect_left(ids, k)
                holder = byrid[ids[j % n]]
                self.devices[holder.addr].ov[ov].store[d.uid] = (k, d.golden)
        for d in self.devices:
            for st in d.ov:
                d._set_ov_status(st, OvStatus.MEMBER)

    # --- attacks -------------------------------------------------------------------
    def _pick(self, a: dict) -> list:
        if "ids" in a:
            return list(a["ids"])
        if "consecutive" in a:
            # a run of ring neighbours on one overlay, starting at a random live member
            ov = a.get("overlay", 0)
            ring = sorted((d.ov[ov].me.rid, d.addr) for d in self.devices
                          if not d.halted and d.ov[ov] is not None and d.ov[ov].status == OvStatus.MEMBER)
            i = self.attack_rng.randrange(len(ring))
            return sorted(ring[(i + k) % len(ring)][1] for k in range(min(a["consecutive"], len(ring))))
        pool = list(range(1 if self.cfg.bootstrap == "join" else 0, self.cfg.n))
        count = a.get("count")
        if count is None:
            count = int(round(a.get("fraction", 0.0) * self.cfg.n))
        return sorted(self.attack_rng.sample(pool, min(count, len(pool))))

    def _schedule_attack(self, i: int, a: dict) -> None:
        act = a["action"]
        at = int(a.get("at_s", 0) * 1_000_000)
        if act == "drop-proofs":
            cycle = int(a.get("cycle_s", 10) * 1_000_000)
            # the last cycle before the horizon stays quiet so every loss has time to be found
            stop = int(a.get("stop_s", self.cfg.horizon_s - a.get("cycle_s", 10)) * 1_000_000)
            t = int(a.get("start_s", a.get("cycle_s", 10)) * 1_000_000)
            while t + cycle <= stop:
                self._push(t, EV_INJECT, ("drop-cycle", a, t, cycle))
                t += cycle
        elif act in ("drop-message", "replay-message"):
            rule = {"after_us": at, "kind": a.get("kind"), "src": a.get("src"), "dst": a.get("dst"),
                    "left": a.get("count", 1), "delay_us": int(a.get("delay_ms", 500) * 1000)}
            (self._drop_rules if act == "drop-message" else self._replay_rules).append(rule)
        elif act == "attest-request":
            self._push(at, EV_INJECT, ("attest", a))
        else:
            self._push(at, EV_INJECT, (act, a))

    def _inject(self, data) -> None:
        act = data[0]
        if act == "drop-cycle":
            _, a, start, cycle = data
            rate = a.get("rate", 0.2)
            for d in self.devices:
                if not d.halted and self.attack_rng.random() < rate:
                    off = self.attack_rng.randrange(cycle) if a.get("spread", True) else 0
                    self._push(start + off, EV_INJECT, ("wipe", d.addr))
        elif act == "wipe":
            d = self.devices[data[1]]
            if d.halted:
                return
            lost = d.wipe_proofs()
            keys = [[uid[:8].hex(), ov] for uid, ov in lost]
            self.trace("drop", dev=d.addr, lost=keys)
        elif act == "attest":
            self.devices[data[1]["dev"]].engage_attestation(data[1].get("overlay", 0))
        else:
            _, a = data
            for i in self._pick(a):
                d = self.devices[i]
                if act == "tamper-device":
                    reg = bytearray(d.region)
                    reg[a.get("offset", 0) % len(reg)] ^= 0xFF
                    d.region = bytes(reg)
                    self.trace("tamper", dev=i)
                elif act == "remove-device":
                    d.halted = True
                    self.trace("remove", dev=i)
                elif act == "corrupt-host":
                    d.corrupt_mode = a.get("mode", "distinct")
                    self.trace("corrupt-host", dev=i, mode=d.corrupt_mode)

    # --- running ----------------------------------------------------------------
    def snapshot(self) -> dict:
        snap = {"t_us": self.now, "devices": [d.snapshot() for d in self.devices]}
        self.snapshots.append(snap)
        return snap

    def run(self, until_s: Optional[float] = None) -> SimResult:
        horizon = int((self.cfg.horizon_s if until_s is None else until_s) * 1_000_000)
        heap = self._heap
        devices = self.devices
        pop = heapq.heappop
        upd = self._hash.update
        pack = struct.Struct("<QIIB").pack
        while heap and heap[0][0] <= horizon:
            t, _, code, data = pop(heap)
            self.now = t
            if code == EV_DELIVER:
                dst, src, oid, item = data
                d = devices[dst]
                if isinstance(item, wire.Packet):
                    upd(pack(t, src, dst, item.payload.kind))
                d.deliver(src, oid, item)
            elif code == EV_TIMER:
                data[0].on_timer(data[1])
            elif code == EV_INJECT:
                self._inject(data)
            else:
                self.snapshot()
        self.now = max(self.now, horizon) if not heap else horizon
        self.snapshot()
        return self.result()

    def result(self) -> SimResult:
        stats = {"messages": dict(sorted(self.msg_counts.items())), "bytes": self.bytes_sent,
                 "timeout_us": self.timeout_us, "deadline_us": self.deadline_us}
        return SimResult(self.cfg, self.trace_log, self.snapshots, stats, self._hash.hexdigest(), self.now)


def run(cfg: SimConfig, until_s: Optional[float] = None) -> SimResult:
    """Build a network from ``cfg`` and run it to the horizon."""
    net = Network(cfg)
    net.build()
    return net.run(until_s)
