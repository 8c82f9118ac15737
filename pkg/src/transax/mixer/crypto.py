"""Pluggable public-key backends for the mixer.

``HybridBackend`` is real crypto: X25519 + HKDF + ChaCha20-Poly1305 for
encryption and Ed25519 for signatures. ``EnvelopeBackend`` wraps payloads in
labelled, plaintext envelopes so protocol tests can inspect layer structure.
Both take their randomness from a caller-supplied ``random.Random`` so a
seeded run is reproducible.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass
from typing import Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF


class DecryptError(Exception):
    pass


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: object


class CryptoBackend(Protocol):
    name: str

    def keygen(self, rng: random.Random) -> KeyPair: ...
    def encrypt(self, public: bytes, data: bytes, rng: random.Random) -> bytes: ...
    def decrypt(self, keypair: KeyPair, blob: bytes) -> bytes: ...
    def sign_keygen(self, rng: random.Random) -> KeyPair: ...
    def sign(self, keypair: KeyPair, data: bytes) -> bytes: ...
    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool: ...


_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class HybridBackend:
    name = "x25519-chacha20poly1305"
    _info = b"transax-mix-layer"

    def keygen(self, rng: random.Random) -> KeyPair:
        sk = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        return KeyPair(sk.public_key().public_bytes(_RAW, _RAW_PUB), sk)

    def _key(self, shared: bytes, eph: bytes, public: bytes) -> bytes:
        return HKDF(hashes.SHA256(), 32, None, self._info + eph + public).derive(shared)

    def encrypt(self, public: bytes, data: bytes, rng: random.Random) -> bytes:
        eph_sk = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        eph = eph_sk.public_key().public_bytes(_RAW, _RAW_PUB)
        key = self._key(eph_sk.exchange(X25519PublicKey.from_public_bytes(public)), eph, public)
        nonce = rng.randbytes(12)
        return eph + nonce + ChaCha20Poly1305(key).encrypt(nonce, data, eph)

    def decrypt(self, keypair: KeyPair, blob: bytes) -> bytes:
        if len(blob) < 32 + 12 + 16:
            raise DecryptError("ciphertext too short")
        eph, nonce, ct = blob[:32], blob[32:44], blob[44:]
        try:
            shared = keypair.private.exchange(X25519PublicKey.from_public_bytes(eph))
            return ChaCha20Poly1305(self._key(shared, eph, keypair.public)).decrypt(nonce, ct, eph)
        except (InvalidTag, ValueError) as exc:
            raise DecryptError(str(exc) or "authentication failed") from None

    def sign_keygen(self, rng: random.Random) -> KeyPair:
        sk = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        return KeyPair(sk.public_key().public_bytes(_RAW, _RAW_PUB), sk)

    def sign(self, keypair: KeyPair, data: bytes) -> bytes:
        return keypair.private.sign(data)

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, data)
            return True
        except (InvalidSignature, ValueError):
            return False


class EnvelopeBackend:
    """Transparent stand-in: ``ENV|label|nonce|payload``. Not secret, only structured."""

    name = "envelope"
    _magic = b"ENV1"

    def keygen(self, rng: random.Random) -> KeyPair:
        label = rng.randbytes(8).hex().encode()
        return KeyPair(b"pk:" + label, label)

    def encrypt(self, public: bytes, data: bytes, rng: random.Random) -> bytes:
        label = public[3:]
        return self._magic + struct.pack(">H", len(label)) + label + rng.randbytes(8) + data

    def decrypt(self, keypair: KeyPair, blob: bytes) -> bytes:
        if not blob.startswith(self._magic) or len(blob) < 6:
            raise DecryptError("not an envelope")
        (n,) = struct.unpack(">H", blob[4:6])
        label = blob[6:6 + n]
        if label != keypair.private:
            raise DecryptError("envelope addressed to another key")
        return blob[6 + n + 8:]

    def layers(self, blob: bytes) -> int:
        """Number of nested envelopes around the innermost payload."""
        count = 0
        while blob.startswith(self._magic) and len(blob) >= 6:
            (n,) = struct.unpack(">H", blob[4:6])
            blob = blob[6 + n + 8:]
            count += 1
        return count

    def sign_keygen(self, rng: random.Random) -> KeyPair:
        secret = rng.randbytes(16)
        return KeyPair(hashlib.sha256(secret).digest(), secret)

    def sign(self, keypair: KeyPair, data: bytes) -> bytes:
        return hashlib.sha256(keypair.public + data).digest()

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        return signature == hashlib.sha256(public + data).digest()
