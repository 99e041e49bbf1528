"""
state.py

Per-virtual-server state: committed key states, in-flight transaction records and the completion log,
plus the snapshot shape a recruit copies from a surviving replica.
"""

from dataclasses import dataclass, field
from enum import StrEnum

from src.core import MediatorToken, ReadRecord, SchemaKey, TransactionPayload, TxnId, WriteRecord
from src.mapping import Chain, VirtualServerId
from src.messages import AbortReason, Endpoint, Outcome
from src.values import Value


class Phase(StrEnum):
    prepared = "prepared"
    commit_pending = "commit_pending"
    committed = "committed"
    aborted = "aborted"


@dataclass
class KeyState:
    value: Value = None
    version: int = 0
    max_seen: MediatorToken | None = None

    def observe(self, token: MediatorToken) -> None:
        if self.max_seen is None or token > self.max_seen:
            self.max_seen = token


@dataclass
class ServerTxnRecord:
    """One virtual server's view of an in-flight transaction. `reads`/`writes` are the local share."""

    txn_id: TxnId
    payload: TransactionPayload
    reads: tuple[ReadRecord, ...]
    writes: tuple[WriteRecord, ...]
    token: MediatorToken
    chain: Chain
    client: Endpoint
    phase: Phase = Phase.prepared
    retries: int = 0

    @property
    def keys(self) -> frozenset[SchemaKey]:
        return frozenset(r.key for r in self.reads) | frozenset(w.key for w in self.writes)

    @property
    def write_keys(self) -> frozenset[SchemaKey]:
        return frozenset(w.key for w in self.writes)

    @property
    def read_keys(self) -> frozenset[SchemaKey]:
        return frozenset(r.key for r in self.reads)


@dataclass(eq=True, frozen=True)
class CompletionEntry:
    outcome: Outcome
    token: MediatorToken | None = None
    reason: AbortReason | None = None
    retries: int = 0


@dataclass(eq=True, frozen=True)
class AppliedWrite:
    """One record of the append-only apply log. `token` is None for writes applied by the baseline."""

    txn_id: TxnId
    key: SchemaKey
    value: Value
    version: int
    token: MediatorToken | None


@dataclass
class VirtualServerSnapshot:
    vs: VirtualServerId
    keys: dict[SchemaKey, KeyState] = field(default_factory=dict[SchemaKey, KeyState])
    records: dict[TxnId, ServerTxnRecord] = field(default_factory=dict[TxnId, ServerTxnRecord])
    completions: dict[TxnId, CompletionEntry] = field(default_factory=dict[TxnId, CompletionEntry])
    retired: dict[TxnId, MediatorToken] = field(default_factory=dict[TxnId, MediatorToken])
