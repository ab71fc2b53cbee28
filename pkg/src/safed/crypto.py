"""OID-as-public-key Diffie-Hellman, pluggable cipher schemes and a PKI.

Two schemes share one interface:

* ``TestScheme``: 64-bit groups, a SHA-256 keystream AEAD and Schnorr /
  ElGamal over the same group.  Deterministic under a seeded ``random.Random``
  and cheap enough to run inside the simulator.
* ``RealScheme``: AES-256-GCM, RSA-2048 (PSS / OAEP) and a 512-bit safe-prime
  DH group, backed by the ``cryptography`` package.

Both keep 32-byte symmetric keys and the byte-accounting constants below.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
import struct
from collections import deque
from dataclasses import dataclass
from typing import Optional

# Byte accounting (per device and per overlay); the memory model reads these.
UID_BYTES = 64
PRIVATE_KEY_BYTES = 1218
PUBLIC_KEY_BYTES = 294
CERT_BYTES = 256
SECRET_BYTES = 32
KEY_BYTES = 32
OID_BYTES = 64
NONCE_BYTES = 16
AEAD_NONCE_BYTES = 12
AEAD_TAG_BYTES = 16
AEAD_OVERHEAD = AEAD_NONCE_BYTES + AEAD_TAG_BYTES
DEFAULT_REPLAY_WINDOW = 64


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Ciphertext failed authentication (tamper, wrong key or reroute)."""


class MalformedPeerError(CryptoError):
    """A peer OID outside ``(0, N)``."""


class CertificateError(CryptoError):
    pass


class UnknownCAError(CertificateError):
    pass


class BadSignatureError(CertificateError):
    pass


class CertificateExpiredError(CertificateError):
    pass


def is_probable_prime(n: int, rounds: int = 24) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in small[:rounds]:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class DhParams:
    g: int
    N: int

    def validate(self) -> None:
        if not is_probable_prime(self.N):
            raise ValueError("N is not prime")
        if not 1 < self.g < self.N:
            raise ValueError("generator must satisfy 1 < g < N")

    @property
    def byte_len(self) -> int:
        return (self.N.bit_length() + 7) // 8


# 64-bit safe prime N = 2q + 1; g = 4 generates the order-q subgroup.
TEST_GROUP = DhParams(g=4, N=14034620828711274719)
# 512-bit safe prime so an OID fits the 64-byte OID field of a 68-byte ref.
REAL_GROUP = DhParams(g=2, N=int(
    "8ce8a17e86c8d61287e7fb3fb280ff9201c0d5011a9b713b9a7aa9bbb983b3b5"
    "0dc988c96c6cf77cddb648f6f9121ed233279efebbaedfa5fd36f1ef3469b767", 16))


@dataclass(frozen=True)
class OidKeypair:
    secret_x: int
    oid_public: int

    def __repr__(self) -> str:
        return f"OidKeypair(oid_public={self.oid_public}, secret_x=<hidden>)"


def int_to_bytes(value: int, width: int = OID_BYTES) -> bytes:
    return value.to_bytes(width, "little")


def generate_oid(params: DhParams, rng: random.Random, x: Optional[int] = None) -> OidKeypair:
    """Draw a fresh secret exponent and return it with ``g**X mod N``."""
    if x is None:
        hi = min(params.N - 1, 1 << (8 * SECRET_BYTES))
        x = 0
        while x == 0:
            x = rng.randrange(0, hi)
    elif not 0 < x < params.N:
        raise ValueError("secret exponent out of range")
    return OidKeypair(secret_x=x, oid_public=pow(params.g, x, params.N))


def raw_shared_secret(own: OidKeypair, peer_oid: int, params: DhParams) -> int:
    if not 0 < peer_oid < params.N:
        raise MalformedPeerError(f"peer OID {peer_oid} outside (0, N)")
    return pow(peer_oid, own.secret_x, params.N)


def shared_key(own: OidKeypair, peer_oid: int, params: DhParams) -> bytes:
    """Symmetric key both ends derive from each other's OID (zero messages)."""
    secret = raw_shared_secret(own, peer_oid, params)
    return hashlib.sha256(b"safed-kab" + int_to_bytes(secret)).digest()


def header_key(oid: int) -> bytes:
    """Header key of the device whose OID is ``oid``; anyone knowing the OID can derive it."""
    if oid <= 0:
        raise MalformedPeerError("OID must be positive")
    return hashlib.sha256(b"safed-hdr" + int_to_bytes(oid)).digest()


def ring_position(data, m: int) -> int:
    """Truncated hash placing an OID (int) or UID (bytes) on an ``m``-bit ring."""
    if isinstance(data, int):
        data = int_to_bytes(data)
    h = hashlib.sha256(b"safed-ring" + data).digest()
    return int.from_bytes(h[:8], "big") >> (64 - m)


def new_nonce(rng) -> bytes:
    if isinstance(rng, random.Random):
        return rng.randbytes(NONCE_BYTES)
    return os.urandom(NONCE_BYTES)


# --- symmetric ciphers --------------------------------------------------------

class KeystreamAead:
    """SHA-256 counter keystream with an HMAC-SHA256 tag (test scheme).

    Output layout matches AES-GCM: ``nonce(12) || ciphertext || tag(16)``.
    """

    name = "sha256-ctr-hmac"

    @staticmethod
    def _stream(key: bytes, nonce: bytes, n: int) -> bytes:
        out = bytearray()
        ctr = 0
        while len(out) < n:
            out += hashlib.sha256(key + nonce + ctr.to_bytes(4, "little")).digest()
            ctr += 1
        return bytes(out[:n])

    @staticmethod
    def _tag(key: bytes, nonce: bytes, ct: bytes, aad: bytes) -> bytes:
        mac_key = hashlib.sha256(b"mac" + key).digest()
        return hmac.new(mac_key, aad + nonce + ct, hashlib.sha256).digest()[:AEAD_TAG_BYTES]

    def encrypt(self, key: bytes, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
        ks = self._stream(key, nonce, len(plaintext))
        ct = (int.from_bytes(plaintext, "little") ^ int.from_bytes(ks, "little")).to_bytes(len(plaintext), "little")
        return nonce + ct + self._tag(key, nonce, ct, aad)

    def decrypt(self, key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
        if len(blob) < AEAD_OVERHEAD:
            raise AuthenticationError("ciphertext too short")
        nonce, ct, tag = blob[:AEAD_NONCE_BYTES], blob[AEAD_NONCE_BYTES:-AEAD_TAG_BYTES], blob[-AEAD_TAG_BYTES:]
        if not hmac.compare_digest(tag, self._tag(key, nonce, ct, aad)):
            raise AuthenticationError("tag mismatch")
        ks = self._stream(key, nonce, len(ct))
        return (int.from_bytes(ct, "little") ^ int.from_bytes(ks, "little")).to_bytes(len(ct), "little")


class AesGcmAead:
    name = "aes-256-gcm"

    def encrypt(self, key: bytes, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM
        return nonce + AESGCM(key).encrypt(nonce, plaintext, aad or None)

    def decrypt(self, key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
        from cryptography.exceptions import InvalidTag
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM
        if len(blob) < AEAD_OVERHEAD:
            raise AuthenticationError("ciphertext too short")
        try:
            return AESGCM(key).decrypt(blob[:AEAD_NONCE_BYTES], blob[AEAD_NONCE_BYTES:], aad or None)
        except InvalidTag as exc:
            raise AuthenticationError("tag mismatch") from exc


# --- asymmetric schemes ------------------------------------------------------

class SchnorrElGamal:
    """Signatures and sealing over the order-q subgroup of ``TEST_GROUP``."""

    def __init__(self, group: DhParams = TEST_GROUP, cipher=None):
        self.group = group
        self.q = (group.N - 1) // 2
        self.elen = group.byte_len
        self.cipher = cipher or KeystreamAead()

    def _h(self, *parts: bytes) -> int:
        return int.from_bytes(hashlib.sha256(b"".join(parts)).digest(), "big") % self.q

    def keygen(self, rng) -> tuple:
        a = rng.randrange(1, self.q)
        pub = pow(self.group.g, a, self.group.N)
        return a.to_bytes(self.elen, "little"), pub.to_bytes(self.elen, "little")

    def sign(self, private: bytes, msg: bytes) -> bytes:
        a = int.from_bytes(private, "little")
        p, g = self.group.N, self.group.g
        pub = pow(g, a, p).to_bytes(self.elen, "little")
        k = self._h(b"k", private, msg) or 1
        r = pow(g, k, p).to_bytes(self.elen, "little")
        e = self._h(r, pub, msg)
        s = (k + a * e) % self.q
        return e.to_bytes(self.elen, "little") + s.to_bytes(self.elen, "little")

    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool:
        if len(sig) != 2 * self.elen:
            return False
        p, g = self.group.N, self.group.g
        e = int.from_bytes(sig[:self.elen], "little")
        s = int.from_bytes(sig[self.elen:], "little")
        a_pub = int.from_bytes(public, "little")
        if not 0 < a_pub < p:
            return False
        r = pow(g, s, p) * pow(a_pub, self.q - e % self.q, p) % p
        return e == self._h(r.to_bytes(self.elen, "little"), public, msg)

    def seal(self, public: bytes, msg: bytes, rng) -> bytes:
        p, g = self.group.N, self.group.g
        k = rng.randrange(1, self.q)
        c = pow(g, k, p).to_bytes(self.elen, "little")
        shared = pow(int.from_bytes(public, "little"), k, p)
        key = hashlib.sha256(b"seal" + shared.to_bytes(self.elen, "little")).digest()
        return c + self.cipher.encrypt(key, msg, _aead_nonce(rng))

    def unseal(self, private: bytes, blob: bytes) -> bytes:
        p = self.group.N
        c = int.from_bytes(blob[:self.elen], "little")
        shared = pow(c, int.from_bytes(private, "little"), p)
        key = hashlib.sha256(b"seal" + shared.to_bytes(self.elen, "little")).digest()
        return self.cipher.decrypt(key, blob[self.elen:])


class RsaPki:
    """RSA-2048: PSS signatures and OAEP-wrapped AES-GCM sealing."""

    def __init__(self):
        self.cipher = AesGcmAead()

    def keygen(self, rng=None) -> tuple:
        from cryptography.hazmat.primitives import serialization
        from cryptography.hazmat.primitives.asymmetric import rsa
        key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        priv = key.private_bytes(serialization.Encoding.DER, serialization.PrivateFormat.PKCS8,
                                 serialization.NoEncryption())
        pub = key.public_key().public_bytes(serialization.Encoding.DER,
                                            serialization.PublicFormat.SubjectPublicKeyInfo)
        return priv, pub

    @staticmethod
    def _pss():
        from cryptography.hazmat.primitives import hashes
        from cryptography.hazmat.primitives.asymmetric import padding
        return padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32), hashes.SHA256()

    @staticmethod
    def _oaep():
        from cryptography.hazmat.primitives import hashes
        from cryptography.hazmat.primitives.asymmetric import padding
        return padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)

    def sign(self, private: bytes, msg: bytes) -> bytes:
        from cryptography.hazmat.primitives.serialization import load_der_private_key
        pad, algo = self._pss()
        return load_der_private_key(private, None).sign(msg, pad, algo)

    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.serialization import load_der_public_key
        pad, algo = self._pss()
        try:
            load_der_public_key(public).verify(sig, msg, pad, algo)
        except (InvalidSignature, ValueError):
            return False
        return True

    def seal(self, public: bytes, msg: bytes, rng=None) -> bytes:
        from cryptography.hazmat.primitives.serialization import load_der_public_key
        session = os.urandom(KEY_BYTES)
        wrapped = load_der_public_key(public).encrypt(session, self._oaep())
        return wrapped + self.cipher.encrypt(session, msg, os.urandom(AEAD_NONCE_BYTES))

    def unseal(self, private: bytes, blob: bytes) -> bytes:
        from cryptography.hazmat.primitives.serialization import load_der_private_key
        key = load_der_private_key(private, None)
        n = key.key_size // 8
        try:
            session = key.decrypt(blob[:n], self._oaep())
        except ValueError as exc:
            raise AuthenticationError("cannot unwrap session key") from exc
        return self.cipher.decrypt(session, blob[n:])


def _aead_nonce(rng) -> bytes:
    if isinstance(rng, random.Random):
        return rng.randbytes(AEAD_NONCE_BYTES)
    return os.urandom(AEAD_NONCE_BYTES)


@dataclass(frozen=True)
class Scheme:
    name: str
    group: DhParams
    cipher: object
    pki: object

    def aead_nonce(self, rng) -> bytes:
        return _aead_nonce(rng)

    def sym_encrypt(self, key: bytes, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
        return self.cipher.encrypt(key, plaintext, nonce, aad)

    def sym_decrypt(self, key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
        return self.cipher.decrypt(key, blob, aad)


def test_scheme() -> Scheme:
    cipher = KeystreamAead()
    return Scheme("test", TEST_GROUP, cipher, SchnorrElGamal(TEST_GROUP, cipher))


def real_scheme() -> Scheme:
    return Scheme("real", REAL_GROUP, AesGcmAead(), RsaPki())


def get_scheme(name: str) -> Scheme:
    if name == "test":
        return test_scheme()
    if name == "real":
        return real_scheme()
    raise ValueError(f"unknown crypto scheme {name!r}")


# --- certificates -------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    subject_public: bytes
    not_before: int
    not_after: int
    issuer_id: bytes
    signature: bytes

    def tbs(self) -> bytes:
        return _cert_tbs(self.subject_public, self.not_before, self.not_after, self.issuer_id)

    def to_bytes(self) -> bytes:
        return (struct.pack("<HqqH", len(self.subject_public), self.not_before, self.not_after,
                            len(self.signature))
                + self.issuer_id + self.subject_public + self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        try:
            plen, nb, na, slen = struct.unpack_from("<HqqH", data)
        except struct.error as exc:
            raise CertificateError("truncated certificate") from exc
        off = struct.calcsize("<HqqH")
        issuer = data[off:off + 8]
        pub = data[off + 8:off + 8 + plen]
        sig = data[off + 8 + plen:off + 8 + plen + slen]
        if len(issuer) != 8 or len(pub) != plen or len(sig) != slen:
            raise CertificateError("truncated certificate")
        return cls(pub, nb, na, issuer, sig)

    @property
    def encoded_len(self) -> int:
        return struct.calcsize("<HqqH") + 8 + len(self.subject_public) + len(self.signature)


def _cert_tbs(pub: bytes, nb: int, na: int, issuer: bytes) -> bytes:
    return b"safed-cert" + issuer + struct.pack("<qq", nb, na) + pub


def key_id(public: bytes) -> bytes:
    return hashlib.sha256(public).digest()[:8]


class CertificateAuthority:
    """Offline CA that signs device public keys."""

    def __init__(self, scheme: Scheme, rng=None, validity: int = 10 ** 12):
        self.scheme = scheme
        self.validity = validity
        self.__private, self.public = scheme.pki.keygen(rng)
        self.id = key_id(self.public)
        self.certificate = self.issue(self.public, 0)

    def issue(self, subject_public: bytes, now: int = 0, validity: Optional[int] = None) -> Certificate:
        na = now + (self.validity if validity is None else validity)
        sig = self.scheme.pki.sign(self.__private, _cert_tbs(subject_public, now, na, self.id))
        return Certificate(subject_public, now, na, self.id, sig)


def check_certificate(cert: Certificate, ca_cert: Certificate, pki, now: int = 0) -> None:
    """Raise the specific certificate error, or return if valid at ``now``."""
    if cert.issuer_id != key_id(ca_cert.subject_public):
        raise UnknownCAError("certificate not issued by the configured CA")
    if not pki.verify(ca_cert.subject_public, cert.tbs(), cert.signature):
        raise BadSignatureError("certificate signature invalid")
    if not cert.not_before <= now <= cert.not_after:
        raise CertificateExpiredError("certificate outside its validity window")


def verify_certificate(cert: Certificate, ca_cert: Certificate, pki, now: int = 0) -> bool:
    try:
        check_certificate(cert, ca_cert, pki, now)
    except CertificateError:
        return False
    return True


# --- replay protection --------------------------------------------------------

class ReplayWindow:
    """Remembers the last ``size`` nonces seen from each peer."""

    def __init__(self, size: int = DEFAULT_REPLAY_WINDOW):
        self.size = size
        self._seen = {}

    def accept(self, peer, nonce: bytes) -> bool:
        """Record ``nonce``; False if it was already seen from ``peer``."""
        window = self._seen.get(peer)
        if window is None:
            window = self._seen[peer] = deque(maxlen=self.size)
        elif nonce in window:
            return False
        window.append(nonce)
        return True


# --- the trusted boundary -------------------------------------------------------

class TrustedAnchor:
    """Secure-world state of one device.

    Secret exponents and the private key stay inside; callers get OIDs,
    ciphertexts, plaintexts of messages addressed to this device, and verdicts.
    """

    def __init__(self, scheme: Scheme, uid: bytes, proof: bytes, ca: Optional[CertificateAuthority],
                 rng=None, keypair: Optional[tuple] = None, certificate: Optional[Certificate] = None):
        if len(uid) != UID_BYTES:
            raise ValueError("UID must be 64 bytes")
        self.scheme = scheme
        self.uid = uid
        self.proof = proof
        private, self.public_key = keypair or scheme.pki.keygen(rng)
        self.__private = private
        if certificate is None and ca is not None:
            certificate = ca.issue(self.public_key)
        self.certificate = certificate
        self.ca_certificate = ca.certificate if ca is not None else None
        self.__oids = {}
        self.__kcache = {}

    def __repr__(self) -> str:
        return f"TrustedAnchor(uid={self.uid[:8].hex()}..., overlays={sorted(self.__oids)})"

    def __getstate__(self):
        raise TypeError("trusted anchor state cannot be serialized")

    # OIDs
    def new_oid(self, overlay: int, rng, x: Optional[int] = None) -> int:
        kp = generate_oid(self.scheme.group, rng, x)
        self.__oids[overlay] = kp
        self.__kcache.pop(overlay, None)
        return kp.oid_public

    def oid(self, overlay: int) -> int:
        return self.__oids[overlay].oid_public

    def overlays(self) -> list:
        return sorted(self.__oids)

    # symmetric channel
    def _pair_key(self, overlay: int, peer_oid: int) -> bytes:
        cache = self.__kcache.setdefault(overlay, {})
        key = cache.get(peer_oid)
        if key is None:
            key = cache[peer_oid] = shared_key(self.__oids[overlay], peer_oid, self.scheme.group)
        return key

    def seal_header(self, recipient_oid: int, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
        return self.scheme.sym_encrypt(header_key(recipient_oid), plaintext, nonce, aad)

    def open_header(self, overlay: int, blob: bytes, aad: bytes = b"") -> bytes:
        return self.scheme.sym_decrypt(header_key(self.oid(overlay)), blob, aad)

    def seal_body(self, overlay: int, peer_oid: int, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
        return self.scheme.sym_encrypt(self._pair_key(overlay, peer_oid), plaintext, nonce, aad)

    def open_body(self, overlay: int, peer_oid: int, blob: bytes, aad: bytes = b"") -> bytes:
        return self.scheme.sym_decrypt(self._pair_key(overlay, peer_oid), blob, aad)

    # asymmetric (certification)
    def sign_encrypt(self, recipient_public: bytes, msg: bytes, rng=None) -> bytes:
        """``E_PRV[E_PUB[msg]]``: seal to the recipient, then sign the sealed blob."""
        sealed = self.scheme.pki.seal(recipient_public, msg, rng)
        sig = self.scheme.pki.sign(self.__private, sealed)
        return struct.pack("<H", len(sig)) + sig + sealed

    def verify_decrypt(self, sender_public: bytes, blob: bytes) -> bytes:
        """Invert :meth:`sign_encrypt`; fails unless signed by the sender and sealed to us."""
        if len(blob) < 2:
            raise AuthenticationError("truncated sealed message")
        (slen,) = struct.unpack_from("<H", blob)
        sig, sealed = blob[2:2 + slen], blob[2 + slen:]
        if not self.scheme.pki.verify(sender_public, sealed, sig):
            raise AuthenticationError("sender signature invalid")
        return self.scheme.pki.unseal(self.__private, sealed)

    def fixed_storage_bytes(self) -> int:
        """UID, key pair and certificate, each in its accounting slot."""
        return UID_BYTES + PRIVATE_KEY_BYTES + PUBLIC_KEY_BYTES + CERT_BYTES
