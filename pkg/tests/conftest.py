"""Shared test fixtures and configuration."""

import os
from typing import Callable, Dict, Tuple

import pytest

# Keep a developer's environment out of the settings under test
for _key in [k for k in os.environ if k.startswith("OWNERSHIP_")]:
    del os.environ[_key]

from ownership.config import Settings, load_settings
from ownership.crypto import KeyPair
from ownership.gateway.envelopes import EnvelopeSigner
from ownership.gateway.service import Gateway
from ownership.system import System
from ownership.vault import Vault


def pytest_configure(config):
    """Register custom markers to avoid warnings."""
    config.addinivalue_line("markers", "slow: long seeded experiments")


@pytest.fixture
def settings() -> Settings:
    """Two custodians, metrics off, fixed seed."""
    return load_settings(seed=7, enable_metrics=False, chaff_ratio=0.9, k_default=3)


@pytest.fixture
def system(settings) -> System:
    return System(settings)


@pytest.fixture
def custodian_a(system) -> KeyPair:
    return system.custodian("custodian-a")


@pytest.fixture
def custodian_b(system) -> KeyPair:
    return system.custodian("custodian-b")


@pytest.fixture
def person() -> Callable[[int], Dict[str, str]]:
    """Factory for distinct identifying payloads."""

    def make(index: int) -> Dict[str, str]:
        return {
            "name": f"Person {index:04d}",
            "email": f"person{index}@example.org",
            "insurance_number": f"INS-{index:06d}",
        }

    return make


@pytest.fixture
def populated(system, custodian_a, person) -> Dict[str, Tuple[str, str]]:
    """Five users registered at custodian-a, keyed by name; values are (entry_id, contract)."""
    users = {}
    for i, name in enumerate(["alice", "bob", "carol", "dmitri", "eun"]):
        users[name] = system.protocol.register_user(custodian_a.address, person(i))
    return users


@pytest.fixture
def alice_vault(system) -> Vault:
    return system.create_vault("alice", policy="always-approve")


@pytest.fixture
def claimed(system, custodian_a, populated, alice_vault) -> str:
    """Alice's contract after a weak claim into ``alice_vault``."""
    _, contract = populated["alice"]
    token = system.protocol.issue_claim_token(custodian_a.address, contract, alice_vault.address)
    system.protocol.claim_weak(alice_vault.address, contract, token)
    return contract


@pytest.fixture
def gateway(system) -> Gateway:
    return Gateway(system)


@pytest.fixture
def admin(settings) -> EnvelopeSigner:
    return EnvelopeSigner(KeyPair.from_seed(settings.admin_seed))


@pytest.fixture
def app(settings, system):
    """Create a FastAPI app instance around the shared system."""
    from ownership.gateway.app import create_app

    return create_app(settings, system=system)


@pytest.fixture
def client(app):
    """Create a test client for the FastAPI app."""
    from fastapi.testclient import TestClient

    return TestClient(app)
