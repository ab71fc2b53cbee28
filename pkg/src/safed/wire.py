"""Bit-exact SAFEd frame codec and size accounting.

Routine frame (``384 + 68*s`` bytes, little-endian integers)::

    [0:4]     overlay tag (u32, plaintext, also bound as AEAD associated data)
    [4:160]   header AEAD  = nonce(12) | E_H(recipient OID)[source OID(64) | sender OID(64)] | tag(16)
    [160:]    body AEAD    = nonce(12) | E_K(sender, recipient)[body] | tag(16)

Body plaintext (``196 + 68*s`` bytes)::

    0 kind u8 | 1 flags u8 | 2 hops u8 | 3 presence u8 | 4 n_refs u8 | 5 reserved
    6 seq u16 | 8 total u16 | 10 request_id u32 | 14 origin_addr u32
    18 nonce[16] | 34 key u64 | 42 uid[64] | 106 digest[64]+pad or ref[68]
    174 zero padding[22] | 196 refs[68 * s]

A ref is ``OID(64) | address(u32)``.  Certification frames are ``256*o``
bytes.  See LAYOUT.md for the full table.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

from .crypto import (AEAD_OVERHEAD, NONCE_BYTES, OID_BYTES, UID_BYTES, AuthenticationError,
                     Certificate, CertificateError, MalformedPeerError, ring_position)
from .ring import NodeRef

REF_BYTES = 68
DIGEST_BYTES = 64
ROUTINE_FIXED = 384
CERT_BLOCK = 256
TAG_BYTES = 4
HEADER_PLAIN = 2 * OID_BYTES
HEADER_BYTES = HEADER_PLAIN + AEAD_OVERHEAD
BODY_FIXED = ROUTINE_FIXED - TAG_BYTES - HEADER_BYTES - AEAD_OVERHEAD

_BODY = struct.Struct("<BBBBBBHHII16sQ64s68s22s")
assert _BODY.size == BODY_FIXED == 196

HAS_UID, HAS_DIGEST, HAS_REF = 1, 2, 4

# flags on routed kinds
F_FINAL = 0x01
F_BACKTRACK = 0x02
F_FINGER = 0x04
# flags on direct kinds
F_PING = 0x01
F_SUSPECT = 0x02
F_COLLISION = 0x04
F_NONMEMBER = 0x08
F_HAVE_UPDATE = 0x10
F_INTEGRATED = 0x20
F_GRANT = 0x40
F_NO_PROOF = 0x80


class Kind(enum.IntEnum):
    JOIN_REQUEST = 1
    SUCCESSOR_RESPONSE = 2
    STABILIZE = 3
    NOTIFY = 4
    PROOF_STORE = 5
    PROOF_QUERY = 6
    PROOF_RESPONSE = 7
    PROOFS_UPDATE = 8
    ATTEST_CHALLENGE = 9
    ATTEST_REPORT = 10
    RECOVERY_STORE = 11
    ALERT = 12


ROUTED_KINDS = frozenset({Kind.JOIN_REQUEST, Kind.PROOF_STORE, Kind.PROOF_QUERY,
                          Kind.ATTEST_CHALLENGE, Kind.RECOVERY_STORE})

CERT_REQUEST = "cert-request"
CERT_RESPONSE = "cert-response"
_CERT_TYPES = {CERT_REQUEST: 0xC1, CERT_RESPONSE: 0xC2}


class WireError(Exception):
    pass


class HeaderAuthError(WireError):
    """Header did not authenticate: wrong recipient, reroute or tampering."""


class BodyAuthError(WireError):
    pass


class UnknownKindError(WireError):
    pass


class ShortReadError(WireError):
    pass


class UnknownPeerError(WireError):
    pass


# --- sizes ------------------------------------------------------------------

def routine_size(s: int) -> int:
    return ROUTINE_FIXED + REF_BYTES * s


def cert_size(o: int) -> int:
    return CERT_BLOCK * o


def message_size(kind, s: int, o: int) -> int:
    """Exact wire size of a message of ``kind``."""
    if kind in _CERT_TYPES:
        return cert_size(o)
    Kind(kind)
    return routine_size(s)


# --- payloads ----------------------------------------------------------------

@dataclass(slots=True)
class Payload:
    kind: Kind
    nonce: bytes
    flags: int = 0
    key: int = 0
    request_id: int = 0
    seq: int = 0
    total: int = 0
    hops: int = 0
    uid: Optional[bytes] = None
    digest: Optional[bytes] = None
    ref: Optional[NodeRef] = None
    refs: tuple = ()

    def forwarded(self, flags: Optional[int] = None) -> "Payload":
        return Payload(self.kind, self.nonce, self.flags if flags is None else flags, self.key,
                       self.request_id, self.seq, self.total, self.hops + 1, self.uid,
                       self.digest, self.ref, self.refs)


@dataclass(slots=True)
class Packet:
    """A decoded (or never-encoded, in fast simulation) routine message."""

    overlay: int
    source: NodeRef
    sender: NodeRef
    payload: Payload


@dataclass(frozen=True)
class SecureMessage:
    """The three wire parts: encrypted header, encrypted body, plaintext overlay tag."""

    overlay_tag: int
    header_ct: bytes
    body_ct: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.overlay_tag) + self.header_ct + self.body_ct

    @classmethod
    def parse(cls, frame: bytes) -> "SecureMessage":
        if len(frame) < ROUTINE_FIXED or (len(frame) - ROUTINE_FIXED) % REF_BYTES:
            raise ShortReadError(f"frame of {len(frame)} bytes is not 384 + 68*s")
        (tag,) = struct.unpack_from("<I", frame)
        return cls(tag, frame[TAG_BYTES:TAG_BYTES + HEADER_BYTES], frame[TAG_BYTES + HEADER_BYTES:])

    @property
    def successor_slots(self) -> int:
        return (len(self.body_ct) - AEAD_OVERHEAD - BODY_FIXED) // REF_BYTES


def _ref_bytes(ref: Optional[NodeRef]) -> bytes:
    if ref is None:
        return bytes(REF_BYTES)
    return ref.oid.to_bytes(OID_BYTES, "little") + struct.pack("<I", ref.addr)


def _ref_from(buf: bytes, m: int) -> NodeRef:
    oid = int.from_bytes(buf[:OID_BYTES], "little")
    (addr,) = struct.unpack_from("<I", buf, OID_BYTES)
    return NodeRef(ring_position(oid, m), oid, addr)


def encode_body(payload: Payload, origin_addr: int, s: int) -> bytes:
    if payload.digest is not None and payload.ref is not None:
        raise WireError("digest and ref share one field")
    if len(payload.refs) > s:
        raise WireError(f"{len(payload.refs)} refs do not fit {s} successor slots")
    if len(payload.nonce) != NONCE_BYTES:
        raise WireError("nonce must be 16 bytes")
    presence = 0
    uid = bytes(UID_BYTES)
    union = bytes(REF_BYTES)
    if payload.uid is not None:
        if len(payload.uid) != UID_BYTES:
            raise WireError("uid must be 64 bytes")
        presence |= HAS_UID
        uid = payload.uid
    if payload.digest is not None:
        if len(payload.digest) != DIGEST_BYTES:
            raise WireError("digest must be 64 bytes")
        presence |= HAS_DIGEST
        union = payload.digest + bytes(REF_BYTES - DIGEST_BYTES)
    elif payload.ref is not None:
        presence |= HAS_REF
        union = _ref_bytes(payload.ref)
    head = _BODY.pack(int(payload.kind), payload.flags, payload.hops, presence, len(payload.refs), 0,
                      payload.seq, payload.total, payload.request_id, origin_addr, payload.nonce,
                      payload.key, uid, union, bytes(22))
    refs = b"".join(_ref_bytes(r) for r in payload.refs) + bytes(REF_BYTES * (s - len(payload.refs)))
    return head + refs


def decode_body(body: bytes, m: int) -> tuple:
    """Return ``(payload, origin_addr)``."""
    if len(body) < BODY_FIXED or (len(body) - BODY_FIXED) % REF_BYTES:
        raise ShortReadError("body length is not 196 + 68*s")
    (kind, flags, hops, presence, n_refs, _, seq, total, request_id, origin, nonce, key,
     uid, union, _) = _BODY.unpack_from(body)
    try:
        kind = Kind(kind)
    except ValueError as exc:
        raise UnknownKindError(f"unknown payload kind {kind}") from exc
    s = (len(body) - BODY_FIXED) // REF_BYTES
    if n_refs > s:
        raise ShortReadError("ref count exceeds successor slots")
    refs = tuple(_ref_from(body[BODY_FIXED + i * REF_BYTES:BODY_FIXED + (i + 1) * REF_BYTES], m)
                 for i in range(n_refs))
    payload = Payload(kind=kind, nonce=nonce, flags=flags, key=key, request_id=request_id, seq=seq,
                      total=total, hops=hops,
                      uid=uid if presence & HAS_UID else None,
                      digest=union[:DIGEST_BYTES] if presence & HAS_DIGEST else None,
                      ref=_ref_from(union, m) if presence & HAS_REF else None,
                      refs=refs)
    return payload, origin


# --- framing -----------------------------------------------------------------

def encode(packet: Packet, anchor, recipient_oid: int, s: int, rng) -> bytes:
    """Encrypt ``packet`` for ``recipient_oid`` using the sender's trusted anchor."""
    ov = packet.overlay
    if anchor.oid(ov) != packet.sender.oid:
        raise WireError("sender OID does not belong to this anchor")
    tag = struct.pack("<I", ov)
    head_pt = packet.source.oid.to_bytes(OID_BYTES, "little") + packet.sender.oid.to_bytes(OID_BYTES, "little")
    try:
        header = anchor.seal_header(recipient_oid, head_pt, anchor.scheme.aead_nonce(rng), tag)
        body = anchor.seal_body(ov, recipient_oid, encode_body(packet.payload, packet.source.addr, s),
                                anchor.scheme.aead_nonce(rng), tag)
    except MalformedPeerError as exc:
        raise UnknownPeerError(str(exc)) from exc
    return tag + header + body


def decode(frame: bytes, anchor, sender_addr: int = 0, m: int = 64) -> Packet:
    """Open a frame addressed to ``anchor``; any other recipient fails at the header."""
    msg = SecureMessage.parse(frame)
    tag = frame[:TAG_BYTES]
    try:
        head = anchor.open_header(msg.overlay_tag, msg.header_ct, tag)
    except (AuthenticationError, KeyError) as exc:
        raise HeaderAuthError("header did not authenticate for this device") from exc
    source_oid = int.from_bytes(head[:OID_BYTES], "little")
    sender_oid = int.from_bytes(head[OID_BYTES:], "little")
    try:
        body = anchor.open_body(msg.overlay_tag, sender_oid, msg.body_ct, tag)
    except (AuthenticationError, MalformedPeerError) as exc:
        raise BodyAuthError("body did not authenticate") from exc
    payload, origin = decode_body(body, m)
    source = NodeRef(ring_position(source_oid, m), source_oid, origin)
    sender = NodeRef(ring_position(sender_oid, m), sender_oid, sender_addr)
    return Packet(msg.overlay_tag, source, sender, payload)


def rewrap_for_forward(packet: Packet, anchor, forwarder: NodeRef, next_hop_oid: int, s: int, rng,
                       payload: Optional[Payload] = None) -> bytes:
    """Re-encrypt a decoded packet for the next hop; the source OID is preserved."""
    out = Packet(packet.overlay, packet.source, forwarder, payload or packet.payload)
    return encode(out, anchor, next_hop_oid, s, rng)


# --- certification frames ----------------------------------------------------

def _cert_frame(type_byte: int, content: bytes, o: int) -> bytes:
    size = max(cert_size(o), -(-(len(content) + 1) // CERT_BLOCK) * CERT_BLOCK)
    return bytes([type_byte]) + content + bytes(size - 1 - len(content))


def encode_cert_request(cert: Certificate, nonce: bytes, o: int) -> bytes:
    """``U_CERT || r`` padded to ``256*o`` bytes."""
    cb = cert.to_bytes()
    return _cert_frame(_CERT_TYPES[CERT_REQUEST], struct.pack("<H", len(cb)) + cb + nonce, o)


def decode_cert_request(frame: bytes) -> tuple:
    if not frame or frame[0] != _CERT_TYPES[CERT_REQUEST]:
        raise UnknownKindError("not a certification request")
    try:
        (clen,) = struct.unpack_from("<H", frame, 1)
        cert = Certificate.from_bytes(frame[3:3 + clen])
    except (struct.error, CertificateError) as exc:
        raise ShortReadError("truncated certification request") from exc
    nonce = frame[3 + clen:3 + clen + NONCE_BYTES]
    if len(nonce) != NONCE_BYTES:
        raise ShortReadError("truncated certification request")
    return cert, nonce


def encode_cert_response(sealed: bytes, cert: Certificate, o: int) -> bytes:
    """``E_NPRV[E_UPUB[N_OIDs || r]] || N_CERT`` padded to ``256*o`` bytes."""
    cb = cert.to_bytes()
    return _cert_frame(_CERT_TYPES[CERT_RESPONSE],
                       struct.pack("<H", len(sealed)) + sealed + struct.pack("<H", len(cb)) + cb, o)


def decode_cert_response(frame: bytes) -> tuple:
    if not frame or frame[0] != _CERT_TYPES[CERT_RESPONSE]:
        raise UnknownKindError("not a certification response")
    try:
        (slen,) = struct.unpack_from("<H", frame, 1)
        sealed = frame[3:3 + slen]
        (clen,) = struct.unpack_from("<H", frame, 3 + slen)
        cert = Certificate.from_bytes(frame[5 + slen:5 + slen + clen])
    except (struct.error, CertificateError) as exc:
        raise ShortReadError("truncated certification response") from exc
    if len(sealed) != slen:
        raise ShortReadError("truncated certification response")
    return sealed, cert


def pack_oids(oids: list, nonce: bytes) -> bytes:
    """Plaintext sealed in the certification response: every OID, then ``r``."""
    return struct.pack("<B", len(oids)) + b"".join(o.to_bytes(OID_BYTES, "little") for o in oids) + nonce


def unpack_oids(data: bytes) -> tuple:
    if not data:
        raise ShortReadError("empty OID block")
    n = data[0]
    end = 1 + n * OID_BYTES
    if len(data) != end + NONCE_BYTES:
        raise ShortReadError("malformed OID block")
    oids = [int.from_bytes(data[1 + i * OID_BYTES:1 + (i + 1) * OID_BYTES], "little") for i in range(n)]
    return oids, data[end:]
