"""
Tests for the identifying store, tumbling and chaff generation.
"""

import numpy as np
import pytest

from ownership.chaff import ConstantChaffGenerator, DistributionalChaffGenerator, make_chaff_generator
from ownership.clock import SimulatedClock
from ownership.crypto import KeyPair
from ownership.errors import ForbiddenError, NotFoundError, RejectedError, ValidationFailure
from ownership.identity_store import IdentityStore, compute_entry_id
from ownership.ledger import Ledger

FIELDS = ["name", "email", "insurance_number"]
CUSTODIAN = KeyPair.from_seed("custodian-a")
OWNER = KeyPair.from_seed("owner-vault")
STRANGER = KeyPair.from_seed("stranger")


def payload(i: int):
    return {"name": f"Person {i:04d}", "email": f"person{i}@example.org", "insurance_number": f"INS-{i:06d}"}


@pytest.fixture
def ledger():
    return Ledger([CUSTODIAN.address])


@pytest.fixture
def store(ledger):
    return IdentityStore(
        CUSTODIAN.address,
        "ids://custodian-a",
        ledger,
        fields=FIELDS,
        clock=SimulatedClock(),
        chaff_ratio=0.9,
        seed=11,
    )


@pytest.fixture
def filled(store):
    """Twenty real entries; returns their ids."""
    return [store.create_entry(CUSTODIAN.address, payload(i))[0] for i in range(20)]


def test_entry_id_is_hash_of_payload_time_and_nonce():
    nonce = bytes(16)
    first = compute_entry_id({"name": "a"}, 5, nonce)
    assert first == compute_entry_id({"name": "a"}, 5, nonce)
    assert first != compute_entry_id({"name": "a"}, 6, nonce)
    assert first != compute_entry_id({"name": "a"}, 5, b"\x01" * 16)
    assert len(first) == 64


def test_entry_id_input_validation():
    with pytest.raises(ValidationFailure):
        compute_entry_id({}, 0, bytes(16))
    with pytest.raises(ValidationFailure):
        compute_entry_id({"name": "a"}, 0, bytes(8))


def test_create_entry_stores_real_and_chaff(store):
    entry_id, chaff = store.create_entry(CUSTODIAN.address, payload(1))
    assert store.read_entry(entry_id) == payload(1)
    assert entry_id in store
    assert len(store) == 1 + len(chaff)
    assert store.chaff_count == len(chaff)
    for chaff_id in chaff:
        assert set(store.read_entry(chaff_id)) == set(FIELDS)


def test_created_batch_hides_which_entry_is_real(store):
    entry_id, chaff = store.create_entry(CUSTODIAN.address, payload(1))
    feed = store.mutation_feed()
    assert {e.added_id for e in feed} == {entry_id, *chaff}
    assert all(e.removed_id is None for e in feed)
    assert len({e.batch_id for e in feed}) == 1
    public = store.trace.select("identity", "created")[0]
    assert public.private is False
    assert store.trace.select("identity", "create_receipt")[0].private is True


def test_zero_chaff_ratio_creates_no_chaff(store):
    _, chaff = store.create_entry(CUSTODIAN.address, payload(1), chaff_ratio=0.0)
    assert chaff == []


def test_chaff_count_follows_ratio(ledger):
    store = IdentityStore(CUSTODIAN.address, "ids://x", ledger, fields=FIELDS, chaff_ratio=0.5, seed=3)
    counts = [len(store.create_entry(CUSTODIAN.address, payload(i))[1]) for i in range(400)]
    # Poisson(r / (1 - r)) has mean 1 at r = 0.5
    assert 0.8 < np.mean(counts) < 1.2


def test_create_entry_schema_checks(store):
    with pytest.raises(ValidationFailure, match="identifying schema"):
        store.create_entry(CUSTODIAN.address, {"name": "x", "mark": "A"})
    with pytest.raises(ValidationFailure):
        store.create_entry(CUSTODIAN.address, {"name": 7})
    with pytest.raises(ValidationFailure):
        store.create_entry(CUSTODIAN.address, {})
    with pytest.raises(ValidationFailure):
        store.create_entry(CUSTODIAN.address, payload(1), chaff_ratio=1.0)


def test_only_custodian_creates(store):
    with pytest.raises(ForbiddenError):
        store.create_entry(STRANGER.address, payload(1))


def test_unknown_entry(store):
    with pytest.raises(NotFoundError):
        store.read_entry("ab" * 32)


def test_tumble_rekeys_entry_with_k_decoys(store, filled):
    entry_id = filled[0]
    receipt = store.tumble(CUSTODIAN.address, entry_id, 3)
    assert receipt.old_id == entry_id
    assert receipt.k == 3
    assert entry_id not in store
    assert store.read_entry(receipt.new_id) == payload(0)
    for old, new in receipt.decoy_updates:
        assert old not in store
        assert new in store
    batch = [e for e in store.mutation_feed() if e.batch_id == receipt.batch_id]
    assert len(batch) == 4
    assert [e.added_id for e in batch] == receipt.batch_order
    assert store.chaff_count == len(store) - 20


def test_tumble_with_k_zero(store, filled):
    receipt = store.tumble(CUSTODIAN.address, filled[0], 0)
    assert receipt.decoy_updates == []
    assert len(store.mutation_feed(since_batch=receipt.batch_id - 1)) == 1


def test_tumble_needs_enough_chaff(store, filled):
    with pytest.raises(RejectedError) as excinfo:
        store.tumble(CUSTODIAN.address, filled[0], store.chaff_count + 2)
    assert excinfo.value.details["shortfall"] == 2
    assert filled[0] in store


def test_tumble_rejects_negative_k(store, filled):
    with pytest.raises(ValidationFailure):
        store.tumble(CUSTODIAN.address, filled[0], -1)


def test_unshuffled_batch_applies_real_update_first(ledger):
    store = IdentityStore(
        CUSTODIAN.address, "ids://x", ledger, fields=FIELDS, chaff_ratio=0.9, seed=5, shuffle_batches=False
    )
    ids = [store.create_entry(CUSTODIAN.address, payload(i))[0] for i in range(10)]
    receipt = store.tumble(CUSTODIAN.address, ids[0], 2)
    assert receipt.batch_order[0] == receipt.new_id


def test_tumble_authorization_follows_contract_ownership(store, ledger, filled):
    entry_id = filled[0]
    contract = ledger.deploy_link_contract(CUSTODIAN, store.endpoint_url, entry_id)
    with pytest.raises(ForbiddenError):
        store.tumble(STRANGER.address, entry_id, 1)

    ledger.transfer_ownership(contract, CUSTODIAN, OWNER.address)
    with pytest.raises(ForbiddenError, match="claimed"):
        store.tumble(CUSTODIAN.address, entry_id, 1)
    receipt = store.tumble(OWNER.address, entry_id, 1)

    # the owner stays verified while the contract still names the old id
    second = store.tumble(OWNER.address, receipt.new_id, 1)
    assert second.old_id == receipt.new_id


def test_tumble_chaff_batch(store, filled):
    before = set(store.entry_ids())
    batch_id = store.tumble_chaff(CUSTODIAN.address, 2)
    changed = [e for e in store.mutation_feed() if e.batch_id == batch_id]
    assert len(changed) == 2
    assert set(filled) <= set(store.entry_ids())
    assert len(set(store.entry_ids()) - before) == 2
    with pytest.raises(ValidationFailure):
        store.tumble_chaff(CUSTODIAN.address, 0)
    with pytest.raises(ForbiddenError):
        store.tumble_chaff(STRANGER.address, 1)


def test_update_payload_rekeys_unclaimed_entry(store, filled):
    new_id = store.update_payload(CUSTODIAN.address, filled[0], {"name": "Renamed", "email": "r@example.org"})
    assert filled[0] not in store
    assert store.read_entry(new_id) == {"name": "Renamed", "email": "r@example.org"}


def test_update_payload_of_claimed_entry_rejected(store, ledger, filled):
    contract = ledger.deploy_link_contract(CUSTODIAN, store.endpoint_url, filled[0])
    ledger.transfer_ownership(contract, CUSTODIAN, OWNER.address)
    with pytest.raises(RejectedError, match="consent"):
        store.update_payload(CUSTODIAN.address, filled[0], {"name": "x"})


def test_delete_entry_requires_verified_owner(store, ledger, filled):
    contract = ledger.deploy_link_contract(CUSTODIAN, store.endpoint_url, filled[0])
    with pytest.raises(ForbiddenError):
        store.delete_entry(CUSTODIAN.address, filled[0])
    ledger.transfer_ownership(contract, CUSTODIAN, OWNER.address)
    assert store.delete_entry(OWNER.address, filled[0]) == payload(0)
    assert filled[0] not in store
    assert store.mutation_feed()[-1].added_id is None


def test_search_payload_matches_real_entries(store, filled):
    hits = store.search_payload(STRANGER.address, {"insurance_number": "INS-000004"})
    assert filled[4] in hits
    with pytest.raises(ValidationFailure):
        store.search_payload(STRANGER.address, {"mark": "A"})


def test_checkpoint_and_restore(store, filled):
    checkpoint = store.checkpoint()
    snapshot = store.export_snapshot()
    store.tumble(CUSTODIAN.address, filled[0], 2)
    store.restore(checkpoint)
    assert store.export_snapshot() == snapshot
    assert len(store.mutation_feed()) == checkpoint.feed_length


def test_restore_rolls_back_chaff_statistics(store, filled):
    checkpoint = store.checkpoint()
    before = store.chaff_generator.generate(np.random.default_rng(3))
    rolled_back = {"name": "Zebulon Quill", "email": "zq@example.org", "insurance_number": "INS-999999"}
    store.create_entry(CUSTODIAN.address, rolled_back)
    store.restore(checkpoint)
    assert store.chaff_generator.generate(np.random.default_rng(3)) == before


def test_same_seed_same_store():
    def build():
        store = IdentityStore(CUSTODIAN.address, "ids://x", Ledger([CUSTODIAN.address]), fields=FIELDS, seed=21)
        for i in range(5):
            store.create_entry(CUSTODIAN.address, payload(i))
        return store.export_snapshot()

    assert build() == build()


def test_get_entry_hides_private_fields(store, filled):
    view = store.get_entry(filled[0])
    assert set(view) == {"entry_id", "payload", "created_at"}


def test_distributional_chaff_resembles_real_data():
    generator = DistributionalChaffGenerator()
    for i in range(50):
        generator.observe(payload(i))
    rng = np.random.default_rng(1)
    real = {payload(i)["insurance_number"] for i in range(50)}
    for _ in range(20):
        fake = generator.generate(rng)
        assert set(fake) == set(FIELDS)
        assert fake["insurance_number"].startswith("INS-")
        assert len(fake["insurance_number"]) == len("INS-000000")
        assert fake["name"].startswith("Person ")
    assert any(generator.generate(rng)["insurance_number"] not in real for _ in range(5))


def test_generators_need_observations():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        DistributionalChaffGenerator().generate(rng)
    with pytest.raises(ValueError):
        ConstantChaffGenerator().generate(rng)


def test_constant_generator_emits_placeholders():
    generator = make_chaff_generator("constant")
    generator.observe({"name": "Ann", "email": "a@b"})
    assert generator.generate(np.random.default_rng(0)) == {"email": "email-placeholder", "name": "name-placeholder"}
    with pytest.raises(ValueError):
        make_chaff_generator("gaussian")
