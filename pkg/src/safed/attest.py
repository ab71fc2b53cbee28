"""Measurement, challenge binding and first-past-the-post voting.

Stored proofs are nonce-free digests of the monitored region.  A prover's
report binds the verifier's nonce: ``HASH = H(H(region) || nonce)``.  The
verifier recomputes the binding from the elected proof before comparing.
"""

from __future__ import annotations

import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional


class Slot(enum.Enum):
    NULL = "null"
    NO_PROOF = "no-proof"
    TIMEOUT = "timeout"


class Outcome(str, enum.Enum):
    HEALTHY = "healthy"
    PROVER_CORRUPTED = "prover-corrupted"
    HOSTS_CORRUPTED = "overlay-hosts-corrupted"
    NETWORK_CORRUPTED = "network-corrupted"
    POSSIBLE_INFECTION = "possible-infection-warning"


class Reaction(str, enum.Enum):
    ISOLATE = "isolate"
    HARD_RESET = "hard-reset"
    PERSIST = "persist"


def measure(region: bytes) -> bytes:
    """Golden (nonce-free) digest of a monitored region, 64 bytes."""
    return hashlib.sha512(region).digest()


def bind(digest: bytes, nonce: bytes) -> bytes:
    return hashlib.sha512(digest + nonce).digest()


def prover_report(uid: bytes, region: bytes, nonce: bytes) -> tuple:
    """What a prover returns to a challenge: ``(UID, HASH)``."""
    return uid, bind(measure(region), nonce)


def is_blank(slot) -> bool:
    return slot is Slot.NO_PROOF or slot is Slot.TIMEOUT


@dataclass
class Verdict:
    outcome: Outcome
    elected: Optional[bytes] = None
    prover_corrupted: bool = False
    flagged_overlays: list = field(default_factory=list)
    recovered: list = field(default_factory=list)
    votes: int = 0

    def to_json(self) -> dict:
        return {"outcome": self.outcome.value, "prover_corrupted": self.prover_corrupted,
                "flagged_overlays": self.flagged_overlays, "recovered": self.recovered,
                "votes": self.votes}


def voting_and_recovery(slots: list, reported_hash: Optional[bytes], nonce: Optional[bytes] = None) -> Verdict:
    """Elect a proof by strict plurality over the non-blank slots.

    Blank slots are listed for recovery once a proof is elected.  A tie for
    first place means the network is corrupted; no votes at all yields a
    warning.  With ``nonce`` the report is compared against ``bind(elected,
    nonce)``, otherwise against the elected proof directly.
    """
    if any(s is Slot.NULL for s in slots):
        raise ValueError("voting needs every overlay slot filled")
    votes = [s for s in slots if isinstance(s, (bytes, bytearray))]
    if not votes:
        return Verdict(Outcome.POSSIBLE_INFECTION)
    ranked = Counter(votes).most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return Verdict(Outcome.NETWORK_CORRUPTED, votes=len(votes))
    elected = ranked[0][0]
    flagged = [i for i, s in enumerate(slots) if isinstance(s, (bytes, bytearray)) and s != elected]
    recovered = [i for i, s in enumerate(slots) if is_blank(s)]
    expected = bind(elected, nonce) if nonce is not None else elected
    bad = reported_hash is not None and reported_hash != expected
    if bad:
        outcome = Outcome.PROVER_CORRUPTED
    elif flagged:
        outcome = Outcome.HOSTS_CORRUPTED
    else:
        outcome = Outcome.HEALTHY
    return Verdict(outcome, elected, bad, flagged, recovered, len(votes))


@dataclass
class AttestationSession:
    """Per-device attestation state; at most one is live at a time."""

    o: int
    attest_in_progress: bool = False
    overlay: int = -1
    started: int = 0
    nonce: bytes = b""
    uid: Optional[bytes] = None
    hash: Optional[bytes] = None
    prover: object = None
    proof: list = field(default_factory=list)
    hosts: list = field(default_factory=list)

    def begin(self, overlay: int, nonce: bytes, now: int) -> None:
        if self.attest_in_progress:
            raise RuntimeError("an attestation is already in progress")
        self.attest_in_progress = True
        self.overlay = overlay
        self.started = now
        self.nonce = nonce
        self.uid = self.hash = self.prover = None
        self.proof = [Slot.NULL] * self.o
        self.hosts = [None] * self.o

    def report(self, uid: bytes, hash_: bytes, prover) -> None:
        self.uid, self.hash, self.prover = uid, hash_, prover

    def fill(self, overlay: int, value, host=None) -> None:
        if self.proof[overlay] is Slot.NULL:
            self.proof[overlay] = value
            self.hosts[overlay] = host

    def ready(self) -> bool:
        return all(p is not Slot.NULL for p in self.proof)

    def finish(self) -> Verdict:
        verdict = voting_and_recovery(self.proof, self.hash, self.nonce)
        self.attest_in_progress = False
        return verdict

    def abort(self) -> None:
        self.attest_in_progress = False
