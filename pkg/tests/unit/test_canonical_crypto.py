"""
Tests for canonical encoding, hashing, seeds and Ed25519 keys.
"""

import pytest

from ownership.canonical import canonical_json, derive_seed, digest, from_ndjson, to_ndjson
from ownership.clock import SimulatedClock
from ownership.crypto import NULL_ADDRESS, KeyPair, address_from_public_key, is_hex_id, verify_signature


def test_canonical_json_sorts_keys_without_whitespace():
    assert canonical_json({"b": 1, "a": [2, {"d": 4, "c": 3}]}) == b'{"a":[2,{"c":3,"d":4}],"b":1}'


def test_canonical_json_hex_encodes_bytes():
    assert canonical_json({"nonce": b"\x00\xff"}) == b'{"nonce":"00ff"}'


def test_canonical_json_rejects_unknown_types():
    with pytest.raises(TypeError):
        canonical_json({"x": object()})


def test_digest_ignores_key_order():
    assert digest({"a": 1, "b": 2}) == digest({"b": 2, "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})


def test_ndjson_lines():
    data = to_ndjson([{"b": 1, "a": 2}, {"c": 3}])
    assert data == b'{"a":2,"b":1}\n{"c":3}\n'
    assert from_ndjson(data) == [{"a": 2, "b": 1}, {"c": 3}]
    assert to_ndjson([]) == b""


def test_derive_seed_is_stable_and_label_dependent():
    assert derive_seed(42, "network") == derive_seed(42, "network")
    assert derive_seed(42, "network") != derive_seed(42, "chaff")
    assert derive_seed(42, "network") != derive_seed(43, "network")
    assert 0 <= derive_seed(1, "x") < 2**64


def test_keypair_from_seed_is_deterministic():
    a, b = KeyPair.from_seed("alice"), KeyPair.from_seed("alice")
    assert a.address == b.address
    assert a.address != KeyPair.from_seed("bob").address
    assert len(a.address) == 64
    assert a.address == address_from_public_key(a.public_key)


def test_int_and_string_seeds_agree():
    assert KeyPair.from_seed(5).address == KeyPair.from_seed("5").address


def test_signature_verification():
    key = KeyPair.from_seed("signer")
    signature = key.sign(b"payload")
    assert verify_signature(key.public_key, signature, b"payload")
    assert verify_signature(key.public_key_hex, signature.hex(), b"payload")
    assert not verify_signature(key.public_key, signature, b"tampered")
    assert not verify_signature(KeyPair.from_seed("other").public_key, signature, b"payload")


def test_malformed_signature_inputs_verify_false():
    key = KeyPair.from_seed("signer")
    assert not verify_signature("not-hex", "00" * 64, b"x")
    assert not verify_signature(key.public_key_hex, "abcd", b"x")
    assert not verify_signature(key.public_key_hex, "zz" * 64, b"x")


def test_hex_id_checks():
    assert is_hex_id("ab" * 32)
    assert not is_hex_id("ab" * 31)
    assert not is_hex_id("zz" * 32)
    assert not is_hex_id(None)
    assert is_hex_id(NULL_ADDRESS)


def test_address_requires_32_byte_key():
    with pytest.raises(ValueError):
        address_from_public_key(b"\x01" * 31)


def test_simulated_clock():
    clock = SimulatedClock()
    assert clock.now() == 0
    assert clock.advance(10) == 10
    assert clock.tick() == 11
    assert clock.advance_to(5) == 11
    assert clock.advance_to(20) == 20
    with pytest.raises(ValueError):
        clock.advance(-1)
    with pytest.raises(ValueError):
        SimulatedClock(-5)
