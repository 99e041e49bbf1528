"""
messages.py

Everything that travels between clients, servers and the coordinator. Protocol messages carry the
chain (and so the configuration version it was built under) so that any hop can answer a replay
without consulting anyone.
"""

from dataclasses import dataclass
from enum import StrEnum

from src.core import MediatorToken, SchemaKey, TransactionPayload, TxnId
from src.mapping import Chain, Configuration, ServerId, VirtualServerId
from src.values import AtomicOp, Value

type Endpoint = str


class Outcome(StrEnum):
    committed = "committed"
    aborted = "aborted"


class AbortReason(StrEnum):
    validation_failed = "validation_failed"
    type_mismatch = "type_mismatch"
    retry_budget = "retry_budget"
    lock_busy = "lock_busy"
    stale_read = "stale_read"
    nested = "nested"


class TxnStatus(StrEnum):
    committed = "committed"
    aborted = "aborted"
    pending = "pending"
    unknown = "unknown"


# Chain protocol


@dataclass(eq=True, frozen=True)
class Forward:
    vs: VirtualServerId
    payload: TransactionPayload
    chain: Chain
    token: MediatorToken | None
    client: Endpoint
    retries: int = 0


@dataclass(eq=True, frozen=True)
class CommitBackward:
    vs: VirtualServerId
    txn_id: TxnId
    chain: Chain
    token: MediatorToken
    client: Endpoint
    retries: int = 0


@dataclass(eq=True, frozen=True)
class AbortBackward:
    vs: VirtualServerId
    txn_id: TxnId
    chain: Chain
    token: MediatorToken | None
    client: Endpoint
    reason: AbortReason


@dataclass(eq=True, frozen=True)
class RetryBackward:
    vs: VirtualServerId
    txn_id: TxnId
    chain: Chain
    token: MediatorToken
    client: Endpoint
    floor: MediatorToken


@dataclass(eq=True, frozen=True)
class ClientReply:
    txn_id: TxnId
    outcome: Outcome
    reason: AbortReason | None = None
    retries: int = 0
    token: MediatorToken | None = None


@dataclass(eq=True, frozen=True)
class WrongServer:
    config_version: int
    txn_id: TxnId | None = None


# Reads and status


@dataclass(eq=True, frozen=True)
class Read:
    vs: VirtualServerId
    key: SchemaKey


@dataclass(eq=True, frozen=True)
class ReadReply:
    key: SchemaKey
    value: Value
    version: int


@dataclass(eq=True, frozen=True)
class StatusQuery:
    txn_id: TxnId


@dataclass(eq=True, frozen=True)
class StatusReply:
    txn_id: TxnId
    status: TxnStatus


# Coordinator


@dataclass(eq=True, frozen=True)
class GetConfig:
    min_version: int = 0


@dataclass(eq=True, frozen=True)
class ConfigResponse:
    config: Configuration


@dataclass(eq=True, frozen=True)
class ReportFail:
    server: ServerId


@dataclass(eq=True, frozen=True)
class Register:
    """A server announcing itself (and its address) to the coordinator."""

    server: ServerId
    address: str


# Replica recovery


@dataclass(eq=True, frozen=True)
class SnapshotRequest:
    partition: int
    requester: ServerId


@dataclass(eq=True, frozen=True)
class SnapshotReply:
    partition: int
    snapshot: bytes


# Mini-transaction baseline


@dataclass(eq=True, frozen=True)
class MiniPrepare:
    partition: int
    txn_id: TxnId
    reads: tuple[tuple[SchemaKey, int], ...]
    writes: tuple[tuple[SchemaKey, AtomicOp], ...]
    client: Endpoint


@dataclass(eq=True, frozen=True)
class MiniVote:
    partition: int
    txn_id: TxnId
    server: ServerId
    reason: AbortReason | None


@dataclass(eq=True, frozen=True)
class MiniDecide:
    partition: int
    txn_id: TxnId
    outcome: Outcome
    client: Endpoint


@dataclass(eq=True, frozen=True)
class MiniAck:
    partition: int
    txn_id: TxnId
    server: ServerId


type ChainMessage = Forward | CommitBackward | AbortBackward | RetryBackward
type MiniMessage = MiniPrepare | MiniVote | MiniDecide | MiniAck
type Message = (
    ChainMessage
    | ClientReply
    | WrongServer
    | Read
    | ReadReply
    | StatusQuery
    | StatusReply
    | GetConfig
    | ConfigResponse
    | ReportFail
    | Register
    | SnapshotRequest
    | SnapshotReply
    | MiniMessage
)


@dataclass(eq=True, frozen=True)
class Envelope:
    src: Endpoint
    dst: Endpoint
    seq: int
    body: Message


def txn_of(msg: Message) -> TxnId | None:
    """The transaction a message belongs to, for hop accounting and tracing."""

    if isinstance(msg, Forward):
        return msg.payload.txn_id
    txn_id: TxnId | None = getattr(msg, "txn_id", None)
    return txn_id
