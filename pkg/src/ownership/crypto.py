"""
Ed25519 key handling, addresses and signature verification.

Addresses are the SHA-256 of the raw 32-byte public key, hex encoded. The
all-zero address is reserved as the null address.
"""

import hashlib
from functools import lru_cache
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

NULL_ADDRESS = "0" * 64
ADDRESS_HEX_LENGTH = 64
ID_HEX_LENGTH = 64


def address_from_public_key(public_key: bytes) -> str:
    """Derive an address from a raw Ed25519 public key."""
    if len(public_key) != 32:
        raise ValueError("Ed25519 public keys are 32 bytes")
    return hashlib.sha256(public_key).hexdigest()


def is_hex_id(value: Optional[str], length: int = ID_HEX_LENGTH) -> bool:
    if not isinstance(value, str) or len(value) != length:
        return False
    try:
        bytes.fromhex(value)
    except ValueError:
        return False
    return True


def is_null_address(value: Optional[str]) -> bool:
    return value is None or value == NULL_ADDRESS


class KeyPair:
    """A signing identity: custodian node key, vault key or third-party key."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._private_key = private_key
        self._public_key_bytes = private_key.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )
        self._address = address_from_public_key(self._public_key_bytes)

    @classmethod
    def from_seed(cls, seed: str | int | bytes) -> "KeyPair":
        """Deterministic key pair: the private key is SHA-256 of the seed."""
        if isinstance(seed, int):
            seed = str(seed)
        if isinstance(seed, str):
            seed = seed.encode("utf-8")
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest()))

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(Ed25519PrivateKey.generate())

    @property
    def address(self) -> str:
        return self._address

    @property
    def public_key(self) -> bytes:
        return self._public_key_bytes

    @property
    def public_key_hex(self) -> str:
        return self._public_key_bytes.hex()

    def sign(self, data: bytes) -> bytes:
        return self._private_key.sign(data)

    def sign_hex(self, data: bytes) -> str:
        return self.sign(data).hex()

    def __repr__(self) -> str:
        return f"KeyPair(address={self._address[:12]}...)"


@lru_cache(maxsize=131072)
def _verify_cached(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_signature(public_key: bytes | str, signature: bytes | str, data: bytes) -> bool:
    """Verify an Ed25519 signature; malformed inputs verify as False."""
    try:
        if isinstance(public_key, str):
            public_key = bytes.fromhex(public_key)
        if isinstance(signature, str):
            signature = bytes.fromhex(signature)
    except ValueError:
        return False
    if len(public_key) != 32 or len(signature) != 64:
        return False
    return _verify_cached(bytes(public_key), bytes(signature), bytes(data))
