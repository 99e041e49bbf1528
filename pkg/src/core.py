"""
core.py

Domain types shared by every other module: schema-qualified keys, the read and write records a
transaction carries to commit, the payload itself, and mediator tokens.

Mediator tokens are what makes the commit protocol acyclic. Every transaction gets one at the head of
its chain, and every server refuses to let a transaction pass a key whose largest-seen token is
bigger. Tokens are (counter, head server, txn id) triples so two transactions never tie.
"""

import random
from dataclasses import dataclass, field
from enum import IntEnum, StrEnum
from functools import total_ordering
from typing import NewType, Self

from src.values import AtomicOp

TxnId = NewType("TxnId", int)
TOKEN_COUNTER_MAX = 2**64 - 1
TXN_ID_MAX = 2**128 - 1


class EmptyTransactionError(Exception):
    """Raised when a transaction with no reads and no writes reaches a commit path."""

    ...


class TokenCounterOverflowError(Exception):
    """Raised when a token counter would leave the unsigned 64-bit range; the process must restart."""

    ...


def make_txn_id(client: int, seq: int) -> TxnId:
    """Client-unique 128-bit ids: the client number in the high half, a per-client sequence in the low."""

    return TxnId((client << 64) | seq)


@total_ordering
@dataclass(eq=True, frozen=True)
class SchemaKey:
    """A key within a named schema. Ordered first by schema, then by key bytes."""

    schema: str
    key: bytes
    _sort: tuple[bytes, bytes] = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        if not self.schema or "\x00" in self.schema:
            raise ValueError(f"Invalid schema name {self.schema!r}")
        if not self.key:
            raise ValueError("Keys must be non-empty")
        object.__setattr__(self, "_sort", (self.schema.encode(), self.key))

    @property
    def sort_key(self) -> tuple[bytes, bytes]:
        return self._sort

    def __lt__(self, other: Self) -> bool:
        return self._sort < other._sort

    def __repr__(self) -> str:
        return f"{self.schema}/{self.key.decode(errors='backslashreplace')}"


@dataclass(eq=True, frozen=True)
class ReadRecord:
    key: SchemaKey
    observed_version: int


@dataclass(eq=True, frozen=True)
class WriteRecord:
    key: SchemaKey
    op: AtomicOp


@dataclass(eq=True, frozen=True)
class TransactionPayload:
    """Everything a server needs to validate and apply a transaction."""

    txn_id: TxnId
    reads: tuple[ReadRecord, ...] = ()
    writes: tuple[WriteRecord, ...] = ()

    def footprint(self) -> tuple[SchemaKey, ...]:
        return footprint(self)

    @property
    def read_keys(self) -> frozenset[SchemaKey]:
        return frozenset(r.key for r in self.reads)

    @property
    def write_keys(self) -> frozenset[SchemaKey]:
        return frozenset(w.key for w in self.writes)

    def restricted_to(self, keys: frozenset[SchemaKey]) -> tuple[tuple[ReadRecord, ...], tuple[WriteRecord, ...]]:
        """The reads and writes that fall on `keys` (one virtual server's share of the payload)."""

        return (
            tuple(r for r in self.reads if r.key in keys),
            tuple(w for w in self.writes if w.key in keys),
        )


def footprint(payload: TransactionPayload) -> tuple[SchemaKey, ...]:
    """Sorted, de-duplicated union of the keys a transaction reads or writes."""

    keys = {r.key for r in payload.reads} | {w.key for w in payload.writes}
    if not keys:
        raise EmptyTransactionError(f"Transaction {payload.txn_id:#x} has an empty footprint")
    return tuple(sorted(keys))


@dataclass(eq=True, frozen=True, order=True)
class MediatorToken:
    """Field order is the comparison order: counter, then head server, then transaction id."""

    counter: int
    head: str
    txn_id: TxnId

    def __repr__(self) -> str:
        return f"<{self.counter}@{self.head}:{self.txn_id:x}>"


class Ordering(IntEnum):
    less = -1
    equal = 0
    greater = 1


def compare_tokens(a: MediatorToken, b: MediatorToken) -> Ordering:
    if a < b:
        return Ordering.less
    if a > b:
        return Ordering.greater
    return Ordering.equal


class TokenStrategy(StrEnum):
    """
    How a head server picks the counter for a new token. All of them stay above the floor; only
    `counter` is monotone, the others exist for experiments.
    """

    counter = "counter"
    zero = "zero"
    random = "random"


@dataclass
class TokenCounter:
    """Per-server token source. `next` never decreases during the lifetime of the server process."""

    server: str
    next: int = 0
    strategy: TokenStrategy = TokenStrategy.counter
    rng: random.Random = field(default_factory=lambda: random.Random(0), repr=False)

    def generate(self, txn_id: TxnId, floor: MediatorToken | None = None) -> MediatorToken:
        """
        A token for `txn_id` above `floor`. Only the `counter` strategy also sorts after every token this
        server generated before; `zero` and `random` are for ordering experiments and give up that
        guarantee, so a later transaction can draw a smaller counter and be sent back for a retry.
        """

        lower = 0 if floor is None else floor.counter + 1

        match self.strategy:
            case TokenStrategy.counter:
                value = max(self.next, lower)
            case TokenStrategy.zero:
                value = lower
            case TokenStrategy.random:
                value = lower + self.rng.randrange(1 << 16)

        if value > TOKEN_COUNTER_MAX:
            raise TokenCounterOverflowError(f"Token counter on {self.server} exhausted")

        self.next = max(self.next, value + 1)
        return MediatorToken(value, self.server, txn_id)

    def observe(self, token: MediatorToken) -> None:
        """Advance past a token seen from another head, so our next token sorts after it."""

        self.next = max(self.next, token.counter + 1)


def generate_token(counter: TokenCounter, txn_id: TxnId, floor: MediatorToken | None = None) -> MediatorToken:
    return counter.generate(txn_id, floor)
