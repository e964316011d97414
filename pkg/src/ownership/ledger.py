"""
Deterministic in-process ledger.

A single serialization point assigns sequence numbers to signed
transactions that mutate link contracts and the directory contract. The
applied transaction log is append-only; replaying it from genesis rebuilds
the exact same state.
"""

import threading
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Set

import structlog
from pydantic import BaseModel, ConfigDict, Field

from .canonical import canonical_json, canonical_loads, digest, sha256_hex, to_ndjson
from .crypto import (
    KeyPair,
    address_from_public_key,
    is_hex_id,
    is_null_address,
    verify_signature,
)
from .errors import ForbiddenError, NotFoundError, OwnershipError, RejectedError
from .metrics import LEDGER_REJECTIONS, LEDGER_TRANSACTIONS
from .trace import EventTrace

logger = structlog.get_logger(__name__)


class TxKind(str, Enum):
    DEPLOY = "deploy"
    TRANSFER = "transfer"
    SET_ENTRY_ID = "set_entry_id"
    SET_ACCESS_FLAG = "set_access_flag"
    SET_VAULT = "set_vault"
    DIRECTORY_PUT = "directory_put"
    DIRECTORY_CLEAR = "directory_clear"


class LinkContract(BaseModel):
    """Per-user contract binding an address to an identity location."""

    address: str
    owner: str
    endpoint_url: Optional[str] = None
    entry_id: Optional[str] = None
    access_flag: bool = True
    vault_address: Optional[str] = None
    deployed_at: int = Field(0, description="sequence number of the deploy transaction")


class Transaction(BaseModel):
    model_config = ConfigDict(frozen=True)

    sequence_number: int
    signer: str
    public_key: str
    kind: TxKind
    body: Dict[str, Any]
    signature: str = ""

    def signing_bytes(self) -> bytes:
        return canonical_json(
            {
                "sequence_number": self.sequence_number,
                "signer": self.signer,
                "public_key": self.public_key,
                "kind": self.kind.value,
                "body": self.body,
            }
        )

    def to_wire(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


class Rejection(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str
    signer: str
    reason: str
    body: Dict[str, Any] = Field(default_factory=dict)


class Ledger:
    """Simulated chain holding link contracts and the single directory contract."""

    def __init__(self, custodians: Iterable[str] = (), trace: Optional[EventTrace] = None):
        self._custodians: Set[str] = set(custodians)
        self._contracts: Dict[str, LinkContract] = {}
        self._directory: Dict[str, Optional[str]] = {}
        self._log: List[Transaction] = []
        self._rejections: List[Rejection] = []
        self._lock = threading.RLock()
        self.trace = trace if trace is not None else EventTrace()

    # -- genesis -----------------------------------------------------------

    @property
    def custodians(self) -> Set[str]:
        return set(self._custodians)

    def is_custodian(self, address: Optional[str]) -> bool:
        return address is not None and address in self._custodians

    # -- write path --------------------------------------------------------

    def submit(self, kind: TxKind, body: Dict[str, Any], signer: KeyPair) -> Transaction:
        """Build, sign and apply a transaction at the next sequence number."""
        with self._lock:
            unsigned = Transaction(
                sequence_number=len(self._log) + 1,
                signer=signer.address,
                public_key=signer.public_key_hex,
                kind=kind,
                body=body,
            )
            tx = unsigned.model_copy(update={"signature": signer.sign_hex(unsigned.signing_bytes())})
            return self.apply(tx)

    def apply(self, tx: Transaction) -> Transaction:
        """Verify and apply a signed transaction; rejected ones are not logged as applied."""
        with self._lock:
            try:
                self._verify(tx)
                handler = getattr(self, f"_apply_{tx.kind.value}")
                handler(tx)
            except OwnershipError as exc:
                self._reject(tx, exc)
                raise
            self._log.append(tx)
        LEDGER_TRANSACTIONS.labels(kind=tx.kind.value).inc()
        self.trace.record(
            "ledger",
            "tx",
            {"tx": tx.to_wire()},
            actor=tx.signer,
        )
        logger.debug("ledger.applied", kind=tx.kind.value, seq=tx.sequence_number)
        return tx

    def _verify(self, tx: Transaction) -> None:
        expected = len(self._log) + 1
        if tx.sequence_number != expected:
            raise RejectedError(
                f"sequence number {tx.sequence_number} out of order, expected {expected}"
            )
        if is_null_address(tx.signer):
            raise ForbiddenError("the null address never signs")
        try:
            derived = address_from_public_key(bytes.fromhex(tx.public_key))
        except ValueError:
            raise RejectedError("malformed public key")
        if derived != tx.signer:
            raise ForbiddenError("signer does not match public key")
        if not verify_signature(tx.public_key, tx.signature, tx.signing_bytes()):
            raise ForbiddenError("invalid transaction signature")

    def _reject(self, tx: Transaction, exc: OwnershipError) -> None:
        rejection = Rejection(kind=tx.kind.value, signer=tx.signer, reason=exc.message, body=tx.body)
        self._rejections.append(rejection)
        LEDGER_REJECTIONS.labels(kind=tx.kind.value).inc()
        self.trace.record("ledger", "rejected", rejection.model_dump(mode="json"), actor=tx.signer)
        logger.info("ledger.rejected", kind=tx.kind.value, reason=exc.message)

    def _contract_for_owner(self, tx: Transaction) -> LinkContract:
        address = tx.body.get("contract")
        contract = self._contracts.get(address) if isinstance(address, str) else None
        if contract is None:
            raise NotFoundError(f"unknown contract {address}")
        if contract.owner != tx.signer:
            raise ForbiddenError("signer is not the contract owner", contract=address)
        return contract

    def _apply_deploy(self, tx: Transaction) -> None:
        if not self.is_custodian(tx.signer):
            raise ForbiddenError("only custodians deploy link contracts")
        entry_id = tx.body.get("entry_id")
        if not is_hex_id(entry_id):
            raise RejectedError("deploy requires a 32-byte entry id")
        if entry_id in self._directory:
            raise RejectedError("entry id already registered in the directory", entry_id=entry_id)
        address = digest({"deployer": tx.signer, "sequence_number": tx.sequence_number})
        self._contracts[address] = LinkContract(
            address=address,
            owner=tx.signer,
            endpoint_url=tx.body.get("endpoint_url"),
            entry_id=entry_id,
            access_flag=True,
            vault_address=None,
            deployed_at=tx.sequence_number,
        )

    def _apply_transfer(self, tx: Transaction) -> None:
        contract = self._contract_for_owner(tx)
        new_owner = tx.body.get("new_owner")
        if is_null_address(new_owner) or not is_hex_id(new_owner):
            raise RejectedError("new owner must be a non-null address")
        contract.owner = new_owner

    def _apply_set_entry_id(self, tx: Transaction) -> None:
        contract = self._contract_for_owner(tx)
        new_id = tx.body.get("entry_id")
        if new_id is not None and not is_hex_id(new_id):
            raise RejectedError("entry id must be 32 bytes or null")
        contract.entry_id = new_id
        if new_id is not None:
            contract.vault_address = None
        if "endpoint_url" in tx.body and tx.body["endpoint_url"] is not None:
            contract.endpoint_url = tx.body["endpoint_url"]

    def _apply_set_access_flag(self, tx: Transaction) -> None:
        contract = self._contract_for_owner(tx)
        flag = tx.body.get("flag")
        if not isinstance(flag, bool):
            raise RejectedError("access flag must be boolean")
        contract.access_flag = flag

    def _apply_set_vault(self, tx: Transaction) -> None:
        contract = self._contract_for_owner(tx)
        vault_address = tx.body.get("vault_address")
        if is_null_address(vault_address) or not is_hex_id(vault_address):
            raise RejectedError("vault address must be non-null")
        contract.vault_address = vault_address
        contract.entry_id = None
        contract.endpoint_url = None

    def _apply_directory_put(self, tx: Transaction) -> None:
        contract = self._contract_for_owner(tx)
        entry_id = tx.body.get("entry_id")
        if not is_hex_id(entry_id):
            raise RejectedError("directory keys are 32-byte entry ids")
        current = self._directory.get(entry_id)
        if current is not None and current != contract.address:
            raise RejectedError("entry id is mapped to a different contract", entry_id=entry_id)
        self._directory[entry_id] = contract.address

    def _apply_directory_clear(self, tx: Transaction) -> None:
        contract = self._contract_for_owner(tx)
        entry_ids = tx.body.get("entry_ids") or []
        for entry_id in entry_ids:
            if self._directory.get(entry_id) != contract.address:
                raise RejectedError("entry id is not mapped to this contract", entry_id=entry_id)
        for entry_id in entry_ids:
            self._directory[entry_id] = None

    # -- operations ----------------------------------------------------------

    def deploy_link_contract(self, custodian: KeyPair, endpoint_url: str, entry_id: str) -> str:
        """Deploy a link contract and publish its entry id in the directory."""
        with self._lock:
            tx = self.submit(TxKind.DEPLOY, {"endpoint_url": endpoint_url, "entry_id": entry_id}, custodian)
            address = digest({"deployer": tx.signer, "sequence_number": tx.sequence_number})
            self.submit(TxKind.DIRECTORY_PUT, {"entry_id": entry_id, "contract": address}, custodian)
            logger.info("ledger.contract_deployed", contract=address[:16], custodian=custodian.address[:16])
            return address

    def transfer_ownership(self, contract: str, current_owner: KeyPair, new_owner: str) -> None:
        """Transfer a contract; a transfer to a non-custodian is a claim and clears the directory."""
        with self._lock:
            existing = self._contracts.get(contract)
            claim = not self.is_custodian(new_owner)
            valid_target = is_hex_id(new_owner) and not is_null_address(new_owner)
            if claim and valid_target and existing is not None and existing.owner == current_owner.address:
                published = self.published_ids(contract)
                if published:
                    self.submit(
                        TxKind.DIRECTORY_CLEAR,
                        {"contract": contract, "entry_ids": published},
                        current_owner,
                    )
            self.submit(TxKind.TRANSFER, {"contract": contract, "new_owner": new_owner}, current_owner)

    def update_entry_id(
        self,
        contract: str,
        owner: KeyPair,
        new_id: Optional[str],
        endpoint_url: Optional[str] = None,
    ) -> None:
        body: Dict[str, Any] = {"contract": contract, "entry_id": new_id}
        if endpoint_url is not None:
            body["endpoint_url"] = endpoint_url
        self.submit(TxKind.SET_ENTRY_ID, body, owner)

    def set_access_flag(self, contract: str, owner: KeyPair, flag: bool) -> None:
        self.submit(TxKind.SET_ACCESS_FLAG, {"contract": contract, "flag": flag}, owner)

    def set_vault(self, contract: str, owner: KeyPair, vault_address: str) -> None:
        self.submit(TxKind.SET_VAULT, {"contract": contract, "vault_address": vault_address}, owner)

    def directory_put(self, entry_id: str, contract: str, signer: KeyPair) -> None:
        self.submit(TxKind.DIRECTORY_PUT, {"entry_id": entry_id, "contract": contract}, signer)

    def directory_clear(
        self, contract: str, signer: KeyPair, entry_ids: Optional[List[str]] = None
    ) -> List[str]:
        """Clear directory ids mapped to ``contract`` (all of them by default)."""
        with self._lock:
            ids = self.published_ids(contract) if entry_ids is None else list(entry_ids)
            if ids:
                self.submit(TxKind.DIRECTORY_CLEAR, {"contract": contract, "entry_ids": ids}, signer)
            return ids

    # -- reads -------------------------------------------------------------

    def directory_lookup(self, entry_id: str) -> Optional[str]:
        return self._directory.get(entry_id)

    def read_contract(self, address: str) -> LinkContract:
        contract = self._contracts.get(address)
        if contract is None:
            raise NotFoundError(f"unknown contract {address}")
        return contract.model_copy()

    def has_contract(self, address: str) -> bool:
        return address in self._contracts

    def published_ids(self, contract: str) -> List[str]:
        """Directory ids currently mapped to ``contract``, sorted."""
        return sorted(k for k, v in self._directory.items() if v == contract)

    def contracts_referencing(self, entry_id: str) -> List[LinkContract]:
        return [c.model_copy() for c in self._contracts.values() if c.entry_id == entry_id]

    def contracts(self) -> List[LinkContract]:
        return [self._contracts[a].model_copy() for a in sorted(self._contracts)]

    def directory_snapshot(self) -> Dict[str, Optional[str]]:
        return dict(sorted(self._directory.items()))

    @property
    def transactions(self) -> List[Transaction]:
        with self._lock:
            return list(self._log)

    @property
    def rejections(self) -> List[Rejection]:
        return list(self._rejections)

    def __len__(self) -> int:
        return len(self._log)

    # -- export / replay -----------------------------------------------------

    def state_bytes(self) -> bytes:
        with self._lock:
            return canonical_json(
                {
                    "contracts": {a: self._contracts[a].model_dump(mode="json") for a in sorted(self._contracts)},
                    "directory": dict(sorted(self._directory.items())),
                }
            )

    def state_digest(self) -> str:
        return sha256_hex(self.state_bytes())

    def export_log(self) -> bytes:
        """Newline-delimited canonical JSON transactions in sequence order."""
        return to_ndjson(tx.to_wire() for tx in self.transactions)

    @classmethod
    def replay(
        cls,
        transactions: Iterable[Transaction | Dict[str, Any] | bytes | str],
        custodians: Iterable[str],
        trace: Optional[EventTrace] = None,
    ) -> "Ledger":
        """Rebuild a ledger from genesis by re-verifying and re-applying every transaction."""
        ledger = cls(custodians=custodians, trace=trace)
        for raw in transactions:
            if isinstance(raw, (bytes, str)):
                raw = canonical_loads(raw)
            tx = raw if isinstance(raw, Transaction) else Transaction.model_validate(raw)
            ledger.apply(tx)
        return ledger
