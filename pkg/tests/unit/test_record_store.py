"""
Tests for the replicated record store and its merge rules.
"""

import numpy as np
import pytest

from ownership.canonical import sha256_hex
from ownership.crypto import KeyPair
from ownership.errors import ForbiddenError, NotFoundError, RejectedError, ValidationFailure
from ownership.ledger import Ledger
from ownership.models import Role
from ownership.record_store import (
    Consortium,
    CustodianNode,
    RecordHeader,
    RecordOp,
    compute_record_id,
    denylisted_fields,
)

NODE_A = KeyPair.from_seed("custodian-a")
NODE_B = KeyPair.from_seed("custodian-b")
OUTSIDER = KeyPair.from_seed("outsider")
DENYLIST = ["name", "email", "insurance_number"]
TAGS = ["mark", "diagnosis"]


class DelayedDelivery:
    """Every op takes 10 ms; the most recently queued due op goes first."""

    def delay(self) -> int:
        return 10

    def pick(self, ready: int) -> int:
        return ready - 1

    def duplicate(self) -> bool:
        return False


@pytest.fixture
def ledger():
    return Ledger([NODE_A.address, NODE_B.address])


@pytest.fixture
def contract(ledger):
    return ledger.deploy_link_contract(NODE_A, "ids://a", sha256_hex(b"alice"))


@pytest.fixture
def consortium(ledger):
    consortium = Consortium(ledger, denylist=DENYLIST, schema_tags=TAGS)
    consortium.add_node("custodian-a", NODE_A)
    consortium.add_node("custodian-b", NODE_B)
    return consortium


def signed(key, **fields):
    op = RecordOp(creator=key.address, **fields)
    return op.model_copy(update={"signature": key.sign_hex(op.signing_bytes())})


def create_op(key, contract, payload, logical_ts=1, links=()):
    header = RecordHeader(contract_address=contract, links=list(links), schema_tag="mark")
    return signed(
        key,
        op_kind="create",
        record_id=compute_record_id(header, payload, key.address),
        payload=payload,
        logical_ts=logical_ts,
        header=header,
    )


def append_op(key, record_id, payload, logical_ts):
    return signed(key, op_kind="append", record_id=record_id, payload=payload, logical_ts=logical_ts)


def registry():
    return {NODE_A.address: NODE_A.public_key_hex, NODE_B.address: NODE_B.public_key_hex}


def test_create_and_replicate(consortium, contract):
    record_id = consortium.create_record(NODE_A, contract, [], "mark", {"course": "CS101", "mark": 91})
    assert consortium.pending() == 1
    assert not consortium.is_converged()
    consortium.converge()
    assert consortium.is_converged()
    record = consortium.get_record(record_id, node_id="custodian-b")
    assert record.contract_address == contract
    assert record.latest == {"course": "CS101", "mark": 91}
    assert record.creator == NODE_A.address


def test_record_id_is_content_address(consortium, contract):
    payload = {"course": "CS101", "mark": 91}
    record_id = consortium.create_record(NODE_A, contract, [], "mark", payload)
    header = RecordHeader(contract_address=contract, links=[], schema_tag="mark")
    assert record_id == compute_record_id(header, payload, NODE_A.address)
    # identical creation bytes are idempotent
    assert consortium.create_record(NODE_A, contract, [], "mark", payload) == record_id
    assert consortium.pending() == 1


def test_identifying_fields_never_enter_the_store(consortium, contract):
    with pytest.raises(RejectedError, match="identifying field"):
        consortium.create_record(NODE_A, contract, [], "mark", {"course": "CS101", "Name": "Alice"})
    with pytest.raises(RejectedError):
        consortium.create_record(NODE_A, contract, [], "mark", {"notes": [{"email": "a@b"}]})


def test_denylisted_fields_walks_nested_payloads():
    payload = {"a": 1, "nested": {"EMAIL": "x", "list": [{"name": "y"}]}}
    assert denylisted_fields(payload, {"email", "name"}) == ["EMAIL", "name"]
    assert denylisted_fields({"mark": 1}, {"email"}) == []


def test_create_record_preconditions(consortium, contract):
    with pytest.raises(ValidationFailure, match="schema tag"):
        consortium.create_record(NODE_A, contract, [], "salary", {"amount": 1})
    with pytest.raises(RejectedError, match="contract"):
        consortium.create_record(NODE_A, "ab" * 32, [], "mark", {"mark": 1})
    with pytest.raises(RejectedError, match="dangling"):
        consortium.create_record(NODE_A, contract, ["cd" * 32], "mark", {"mark": 1})
    with pytest.raises(ForbiddenError):
        consortium.create_record(OUTSIDER, contract, [], "mark", {"mark": 1})
    with pytest.raises(ValidationFailure):
        consortium.create_record(NODE_A, contract, [], "mark", {})


def test_links_to_existing_records(consortium, contract):
    first = consortium.create_record(NODE_A, contract, [], "mark", {"mark": 70})
    second = consortium.create_record(NODE_A, contract, [first], "mark", {"mark": 80})
    assert consortium.get_record(second).links == [first]


def test_append_versions_in_order(consortium, contract):
    record_id = consortium.create_record(NODE_A, contract, [], "mark", {"mark": 60})
    consortium.converge()
    assert consortium.append_version(NODE_B, record_id, {"mark": 65}) == 1
    assert consortium.append_version(NODE_A, record_id, {"mark": 70}) == 1
    consortium.converge()
    record = consortium.get_record(record_id, node_id="custodian-a")
    assert len(record.versions) == 3
    assert consortium.is_converged()
    with pytest.raises(NotFoundError):
        consortium.append_version(NODE_A, "ef" * 32, {"mark": 1})


def test_concurrent_appends_merge_by_timestamp_then_creator(consortium, contract):
    record_id = consortium.create_record(NODE_A, contract, [], "mark", {"mark": 60})
    consortium.converge()
    consortium.append_version(NODE_A, record_id, {"mark": 61})
    consortium.append_version(NODE_B, record_id, {"mark": 62})
    consortium.converge()
    versions = consortium.get_record(record_id).versions
    expected = sorted([NODE_A.address, NODE_B.address])
    assert [v.creator for v in versions[1:]] == expected
    assert consortium.snapshots()["custodian-a"] == consortium.snapshots()["custodian-b"]


def test_invalid_ops_are_dropped(contract):
    node = CustodianNode("n", registry(), DENYLIST)
    good = create_op(NODE_A, contract, {"mark": 1})
    forged = good.model_copy(update={"payload": {"mark": 100}})
    outsider = create_op(OUTSIDER, contract, {"mark": 1})
    leaking = create_op(NODE_A, contract, {"name": "Alice"})
    assert not node.receive(forged)
    assert not node.receive(outsider)
    assert not node.receive(leaking)
    assert node.dropped == 3
    assert node.records() == []
    assert node.receive(good)
    assert not node.receive(good)


def test_append_before_create_is_buffered(contract):
    node = CustodianNode("n", registry())
    create = create_op(NODE_A, contract, {"mark": 1})
    append = append_op(NODE_B, create.record_id, {"mark": 2}, logical_ts=2)
    node.receive(append)
    assert node.buffered == 1
    assert node.records() == []
    node.receive(create)
    assert node.buffered == 0
    assert [v.payload for v in node.get_record(create.record_id).versions] == [{"mark": 1}, {"mark": 2}]


def test_every_delivery_order_folds_to_same_state(contract):
    ops = [create_op(NODE_A, contract, {"mark": 1}), create_op(NODE_B, contract, {"mark": 2}, logical_ts=3)]
    record_id = ops[0].record_id
    for ts, key in [(2, NODE_A), (2, NODE_B), (5, NODE_A), (4, NODE_B)]:
        ops.append(append_op(key, record_id, {"mark": ts * 10}, logical_ts=ts))

    reference = CustodianNode("ref", registry())
    for op in ops:
        reference.receive(op)
    rng = np.random.default_rng(3)
    for _ in range(20):
        node = CustodianNode("n", registry())
        for i in rng.permutation(len(ops)):
            node.receive(ops[int(i)])
        assert node.export_snapshot() == reference.export_snapshot()


def test_log_replay_rebuilds_node(consortium, contract):
    record_id = consortium.create_record(NODE_A, contract, [], "mark", {"mark": 60})
    consortium.append_version(NODE_A, record_id, {"mark": 61})
    node = consortium.node_for(NODE_A.address)
    rebuilt = CustodianNode.replay_log("copy", node.export_log().splitlines(), registry(), DENYLIST)
    assert rebuilt.export_snapshot() == node.export_snapshot()


def test_delayed_reordered_delivery_still_converges(ledger, contract):
    consortium = Consortium(ledger, denylist=DENYLIST, schema_tags=TAGS, delivery=DelayedDelivery())
    consortium.add_node("custodian-a", NODE_A)
    consortium.add_node("custodian-b", NODE_B)
    record_id = consortium.create_record(NODE_A, contract, [], "mark", {"mark": 1})
    consortium.append_version(NODE_A, record_id, {"mark": 2})
    assert consortium.deliver(now=5) == 0
    assert consortium.deliver(now=10) == 2
    assert consortium.node_for(NODE_B.address).buffered == 0
    assert consortium.is_converged()


def test_inject_routes_raw_ops(consortium, contract):
    op = create_op(NODE_A, contract, {"mark": 3})
    consortium.inject("custodian-b", op.model_copy(update={"signature": "00" * 64}))
    consortium.converge()
    assert consortium.node_for(NODE_B.address).dropped == 1


def test_node_registration(consortium):
    with pytest.raises(ValidationFailure):
        consortium.add_node("custodian-a", NODE_A)
    with pytest.raises(ForbiddenError):
        consortium.node_for(OUTSIDER.address)


def test_reverse_lookup_and_query(consortium, contract, ledger):
    other = ledger.deploy_link_contract(NODE_A, "ids://a", sha256_hex(b"bob"))
    consortium.create_record(NODE_A, contract, [], "mark", {"course": "CS101", "mark": 91})
    consortium.create_record(NODE_A, other, [], "mark", {"course": "CS101", "mark": 55})
    consortium.converge()
    assert [r.contract_address for r in consortium.reverse_lookup("x", contract)] == [contract]

    consortium.whitelist.manage(
        NODE_A.address,
        "add",
        {
            "name": "passed",
            "schema_tag": "mark",
            "predicate": {"ge": ["mark", {"param": "threshold"}]},
            "projection": ["course", "mark"],
            "params": {"threshold": "number"},
        },
    )
    result = consortium.query("x", "passed", {"threshold": 60}, role=Role.THIRD_PARTY)
    assert result.contract_addresses == [contract]
    assert result.rows[0].projection == {"course": "CS101", "mark": 91}
    with pytest.raises(ForbiddenError):
        consortium.query("x", "passed", {"threshold": 60}, role=Role.DATA_OWNER)
    with pytest.raises(RejectedError, match="not approved"):
        consortium.query("x", "unknown", {})
