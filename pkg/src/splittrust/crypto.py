"""Crypto routines exposed to TEE programs.

Pinned algorithms:

* hash: SHA-256
* mac: HMAC-SHA256
* authenticated encryption: encrypt-then-MAC.  ChaCha20 (16-byte nonce as
  taken by the ``cryptography`` package) keyed with HMAC(key, "enc"), then
  HMAC-SHA256 keyed with HMAC(key, "mac") over nonce || ciphertext.  The
  32-byte tag is appended to the ciphertext.

Model-level security only: nothing here tries to be constant time.
"""

from __future__ import annotations

import hashlib
import hmac

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

KEY_SIZE = 32
NONCE_SIZE = 16
TAG_SIZE = 32
DIGEST_SIZE = 32


class AuthFailure(Exception):
    code = "auth-failure"


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def mac(key: bytes, data: bytes) -> bytes:
    _check_key(key)
    return hmac.new(key, data, hashlib.sha256).digest()


def mac_verify(key: bytes, data: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac(key, data), tag)


def _check_key(key: bytes) -> None:
    if len(key) != KEY_SIZE:
        raise ValueError(f"keys are {KEY_SIZE} bytes, got {len(key)}")


def _subkeys(key: bytes) -> tuple[bytes, bytes]:
    _check_key(key)
    return (hmac.new(key, b"enc", hashlib.sha256).digest(),
            hmac.new(key, b"mac", hashlib.sha256).digest())


def _stream(key: bytes, nonce: bytes, data: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    cipher = Cipher(algorithms.ChaCha20(key, nonce), mode=None)
    return cipher.encryptor().update(data)


def ae_seal(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    k_enc, k_mac = _subkeys(key)
    ct = _stream(k_enc, nonce, plaintext)
    return ct + hmac.new(k_mac, nonce + ct, hashlib.sha256).digest()


def ae_open(key: bytes, nonce: bytes, sealed: bytes) -> bytes:
    k_enc, k_mac = _subkeys(key)
    if len(sealed) < TAG_SIZE:
        raise AuthFailure("ciphertext shorter than tag")
    ct, tag = sealed[:-TAG_SIZE], sealed[-TAG_SIZE:]
    expected = hmac.new(k_mac, nonce + ct, hashlib.sha256).digest()
    if not hmac.compare_digest(expected, tag):
        raise AuthFailure("tag mismatch")
    return _stream(k_enc, nonce, ct)
