"""
In-process deployment: one ledger, one record-store consortium, an identifying
store per custodian, owner vaults and the protocol tying them together.
"""

from typing import Any, Dict, List, Optional

import structlog

from .chaff import make_chaff_generator
from .clock import SimulatedClock
from .config import Settings
from .crypto import KeyPair
from .errors import ConfigurationError, ForbiddenError
from .identity_store import IdentityStore
from .ledger import Ledger
from .protocol import Protocol
from .record_store import Consortium, DeliveryPolicy
from .trace import EventTrace
from .vault import ConsentPolicy, Vault, make_policy

logger = structlog.get_logger(__name__)


class System:
    """Every plane wired together from ``Settings``."""

    def __init__(
        self,
        settings: Settings,
        clock: Optional[SimulatedClock] = None,
        delivery: Optional[DeliveryPolicy] = None,
    ):
        self.settings = settings
        self.clock = clock or SimulatedClock()
        self.trace = EventTrace(self.clock)
        self.custodian_keys: Dict[str, KeyPair] = {
            c.name: KeyPair.from_seed(c.seed) for c in settings.custodians
        }
        self._keys_by_address = {k.address: k for k in self.custodian_keys.values()}
        self.ledger = Ledger(
            custodians=[k.address for k in self.custodian_keys.values()],
            trace=self.trace,
        )
        self.consortium = Consortium(
            self.ledger,
            denylist=settings.identifying_fields,
            schema_tags=settings.schema_tags,
            clock=self.clock,
            delivery=delivery,
            trace=self.trace,
        )
        self.protocol = Protocol(
            self.ledger,
            self.consortium,
            identifying_fields=settings.identifying_fields,
            dedup_key=settings.dedup_key,
            k_default=settings.k_default,
            consent_delay_ms=settings.consent_delay_ms,
            seed=settings.seed,
            clock=self.clock,
            trace=self.trace,
        )
        self.stores: Dict[str, IdentityStore] = {}
        for custodian in settings.custodians:
            key = self.custodian_keys[custodian.name]
            self.consortium.add_node(custodian.name, key)
            store = IdentityStore(
                key.address,
                custodian.endpoint_url,
                self.ledger,
                fields=settings.identifying_fields,
                clock=self.clock,
                chaff_ratio=settings.chaff_ratio,
                chaff_generator=make_chaff_generator(settings.chaff_generator),
                seed=settings.seed,
                shuffle_batches=settings.shuffle_tumble_batches,
                trace=self.trace,
            )
            self.stores[custodian.name] = store
            self.protocol.add_custodian(key, store)
        self.vaults: Dict[str, Vault] = {}
        logger.debug("system.ready", custodians=len(self.stores), seed=settings.seed)

    def custodian(self, name: str) -> KeyPair:
        if name not in self.custodian_keys:
            raise ConfigurationError(f"unknown custodian '{name}'")
        return self.custodian_keys[name]

    def key_for(self, address: str) -> KeyPair:
        """Signing key of a custodian hosted by this deployment."""
        key = self._keys_by_address.get(address)
        if key is None:
            raise ForbiddenError("custodian key is not hosted on this node")
        return key

    def store(self, name: str) -> IdentityStore:
        if name not in self.stores:
            raise ConfigurationError(f"unknown custodian '{name}'")
        return self.stores[name]

    def create_vault(
        self,
        seed: str | int | bytes,
        policy: str | Dict[str, Any] | ConsentPolicy | None = None,
    ) -> Vault:
        vault = Vault.create_identity(seed, policy=make_policy(policy), clock=self.clock, trace=self.trace)
        self.vaults[vault.address] = vault
        return self.protocol.register_vault(vault)

    def advance(self, delta_ms: int) -> int:
        """Move simulated time forward, delivering due ops and consent answers."""
        now = self.clock.advance(delta_ms)
        self.consortium.deliver(now)
        self.protocol.process_consents(now)
        return now

    def advance_to(self, t_ms: int) -> int:
        now = self.clock.advance_to(t_ms)
        self.consortium.deliver(now)
        self.protocol.process_consents(now)
        return now

    def settle(self) -> None:
        """Deliver every in-flight op and answer every queued consent request."""
        self.consortium.converge()
        self.protocol.process_consents(None)

    def chaff_tumble_all(self, k: int) -> List[int]:
        """Background chaff re-keying on every store that has enough chaff."""
        batches = []
        for name in sorted(self.stores):
            store = self.stores[name]
            if store.chaff_count >= k > 0:
                batches.append(store.tumble_chaff(self.custodian_keys[name].address, k))
        return batches
