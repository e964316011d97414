"""Integration tests for the HTTP surface of the gateway."""
import pytest
from fastapi.routing import APIRoute
from fastapi.testclient import TestClient

from ownership.config import load_settings
from ownership.crypto import KeyPair
from ownership.gateway.app import INFRASTRUCTURE_ROUTES, create_app
from ownership.gateway.authorization import ROLE_MATRIX
from ownership.gateway.envelopes import EnvelopeSigner
from ownership.gateway.service import OPERATIONS
from ownership.models import Role

PAYLOAD = {"name": "Tomas Ruiz", "email": "tomas@example.org", "insurance_number": "INS-4040"}
DOC_ROUTES = {"/docs", "/docs/oauth2-redirect", "/openapi.json"}


def post(client, signer, operation, params=None):
    envelope = signer.sign(operation, params)
    module, op = operation.split(".", 1)
    return client.post(f"/{module}/{op}", json=envelope.model_dump())


@pytest.fixture
def university(custodian_a):
    return EnvelopeSigner(custodian_a)


@pytest.fixture
def signers(client, admin, custodian_a, system):
    """One registered signer per role."""
    owner = system.create_vault("owner", policy="always-approve").keypair
    third = KeyPair.from_seed("third")
    for key, role in ((owner, "data_owner"), (third, "third_party")):
        params = {"public_key": key.public_key_hex, "role": role}
        assert post(client, admin, "gateway.register_principal", params).status_code == 200
    return {
        Role.ADMIN: admin,
        Role.CUSTODIAN: EnvelopeSigner(custodian_a),
        Role.DATA_OWNER: EnvelopeSigner(owner),
        Role.THIRD_PARTY: EnvelopeSigner(third),
    }


def test_every_route_is_mediated(app):
    paths = {route.path for route in app.routes if isinstance(route, APIRoute)}
    operation_paths = {f"/{name.replace('.', '/', 1)}" for name in OPERATIONS}
    assert paths - DOC_ROUTES - INFRASTRUCTURE_ROUTES == operation_paths
    for route in app.routes:
        if isinstance(route, APIRoute) and route.path in operation_paths:
            assert route.methods == {"POST"}


def test_health(client, system):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"
    assert body["ledger_height"] == 0
    assert body["nodes"] == ["custodian-a", "custodian-b"]


def test_metrics_endpoint():
    app = create_app(load_settings(seed=1, enable_metrics=True))
    client = TestClient(app)
    client.get("/health")
    response = client.get("/metrics")
    assert response.status_code == 200
    assert "ownership_requests_total" in response.text
    assert "ownership_request_duration_seconds" in response.text


def test_metrics_disabled(client):
    assert client.get("/metrics").status_code == 404


def test_production_hides_docs():
    app = create_app(load_settings(seed=1, env="production", enable_metrics=False))
    assert TestClient(app).get("/docs").status_code == 404


def test_signed_request_succeeds(client, university):
    response = post(client, university, "protocol.register_user", {"payload": PAYLOAD})
    assert response.status_code == 200
    body = response.json()
    assert body["operation"] == "protocol.register_user"
    assert set(body["result"]) == {"entry_id", "contract_address"}
    assert client.get("/health").json()["ledger_height"] == 1


def test_replay_over_http(client, university):
    envelope = university.sign("record_store.whitelist_history")
    first = client.post("/record_store/whitelist_history", json=envelope.model_dump())
    second = client.post("/record_store/whitelist_history", json=envelope.model_dump())
    assert first.status_code == 200
    assert second.status_code == 401
    assert second.json()["error"] == "replay_detected"


def test_unsigned_request_rejected(client, university):
    envelope = university.sign("record_store.whitelist_history").model_copy(update={"signature": ""})
    response = client.post("/record_store/whitelist_history", json=envelope.model_dump())
    assert response.status_code == 401
    assert response.json() == {
        "error": "unauthorized",
        "detail": "invalid request signature",
        "context": {"principal": university.address},
    }


def test_operation_must_match_route(client, university):
    envelope = university.sign("record_store.whitelist_history")
    response = client.post("/ledger/export_log", json=envelope.model_dump())
    assert response.status_code == 422
    assert response.json()["error"] == "invalid"


def test_malformed_body(client):
    response = client.post("/ledger/export_log", json={"principal": "x"})
    assert response.status_code == 422
    assert response.json()["error"] == "validation_error"


def test_domain_error_status(client, university):
    response = post(client, university, "ledger.read_contract", {"contract_address": "ab" * 32})
    assert response.status_code == 404
    assert response.json()["error"] == "not_found"


def test_role_matrix_over_http(client, signers, system):
    for role, signer in signers.items():
        for name in sorted(set(OPERATIONS) - ROLE_MATRIX[role]):
            response = post(client, signer, name, {})
            assert response.status_code == 403, (role, name)
            assert response.json()["error"] == "forbidden"
    denied = [e for e in system.trace.select("gateway", "request") if e.data["decision"] == "deny"]
    assert len(denied) == sum(len(set(OPERATIONS) - ROLE_MATRIX[role]) for role in signers)


def test_third_party_search_flow(client, signers, university):
    contract = post(client, university, "protocol.register_user", {"payload": PAYLOAD}).json()["result"][
        "contract_address"
    ]
    document = {
        "name": "passing",
        "schema_tag": "mark",
        "predicate": {"ge": ["mark", {"param": "min"}]},
        "projection": ["mark"],
        "params": {"min": "number"},
    }
    assert post(client, university, "record_store.manage_whitelist", {"action": "add", "document": document}).json()[
        "result"
    ] == {"version": 1}
    created = post(
        client,
        university,
        "record_store.create_record",
        {"contract_address": contract, "schema_tag": "mark", "payload": {"course": "BIO1", "mark": 77}},
    )
    assert created.status_code == 200

    third = signers[Role.THIRD_PARTY]
    result = post(client, third, "record_store.query", {"query_name": "passing", "params": {"min": 50}}).json()
    assert [row["contract_address"] for row in result["result"]["rows"]] == [contract]
    refused = post(client, third, "record_store.query", {"query_name": "everything"})
    assert refused.status_code == 409
    found = post(client, third, "protocol.search_candidates", {"query_name": "passing", "params": {"min": 50}})
    [candidate] = found.json()["result"]
    assert candidate["contract_address"] == contract
    assert candidate["outcome"]["outcome"] == "identified"
    assert candidate["outcome"]["payload"] == PAYLOAD
