"""
minitxn.py

The mini-transaction baseline: a modified two-phase commit where every replica of every touched
partition is a participant. Phase one locks the footprint keys and compares versions; any busy lock
or stale version is a "no" vote. Phase two commits or aborts and releases the locks.

Locks never queue: a participant that finds a key locked votes no immediately. That is the behavior
the chain protocol is compared against, since it cannot let two transactions prepare on one key.

The baseline runs without failures; there is no recovery path for a participant or client crash.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

from src.applylog import ApplyLog
from src.core import SchemaKey, TransactionPayload, TxnId
from src.mapping import Configuration, ServerId, partition_of
from src.messages import AbortReason, Endpoint, Message, MiniAck, MiniDecide, MiniPrepare, MiniVote, Outcome
from src.state import AppliedWrite, KeyState
from src.values import TypeMismatchError

logger = logging.getLogger(__name__)

type KeyStore = Callable[[int], dict[SchemaKey, KeyState] | None]
type Send = Callable[[Endpoint, Message], None]


class MiniParticipant:
    """Server-side half. `keys(partition)` returns the live key table of a partition this server owns."""

    def __init__(self, server: ServerId, keys: KeyStore, log: ApplyLog) -> None:
        self.server = server
        self.keys = keys
        self.log = log
        self.locks: dict[SchemaKey, TxnId] = {}
        self.prepared: dict[tuple[TxnId, int], MiniPrepare] = {}

    def handle(self, msg: MiniPrepare | MiniDecide) -> list[tuple[Endpoint, Message]]:
        match msg:
            case MiniPrepare():
                return [(msg.client, MiniVote(msg.partition, msg.txn_id, self.server, self.prepare(msg)))]
            case MiniDecide():
                self.decide(msg)
                return [(msg.client, MiniAck(msg.partition, msg.txn_id, self.server))]

    def prepare(self, msg: MiniPrepare) -> AbortReason | None:
        table = self.keys(msg.partition)
        if table is None:
            logger.warning(f"{self.server} asked to prepare {msg.txn_id:#x} on unowned partition {msg.partition}")
            return AbortReason.lock_busy

        keys = {k for k, _ in msg.reads} | {k for k, _ in msg.writes}
        if any(self.locks.get(k, msg.txn_id) != msg.txn_id for k in keys):
            return AbortReason.lock_busy
        for key, version in msg.reads:
            current = table.get(key)
            if (current.version if current else 0) != version:
                return AbortReason.stale_read

        for k in keys:
            self.locks[k] = msg.txn_id
        self.prepared[(msg.txn_id, msg.partition)] = msg
        return None

    def decide(self, msg: MiniDecide) -> None:
        prep = self.prepared.pop((msg.txn_id, msg.partition), None)
        if prep is None:
            return

        table = self.keys(msg.partition)
        if msg.outcome is Outcome.committed and table is not None:
            for key, op in prep.writes:
                ks = table.setdefault(key, KeyState())
                try:
                    ks.value = op.apply(ks.value)
                except TypeMismatchError as e:
                    logger.warning(f"{self.server}: {e}; {key!r} left unchanged")
                ks.version += 1
                self.log.append(AppliedWrite(prep.txn_id, key, ks.value, ks.version, None))

        for key in {k for k, _ in prep.reads} | {k for k, _ in prep.writes}:
            if self.locks.get(key) == prep.txn_id:
                del self.locks[key]


@dataclass
class MiniRound:
    payload: TransactionPayload
    participants: list[tuple[int, ServerId]]
    on_outcome: Callable[[Outcome, AbortReason | None], None]
    votes: dict[tuple[int, ServerId], AbortReason | None] = field(
        default_factory=dict[tuple[int, ServerId], AbortReason | None]
    )
    acks: set[tuple[int, ServerId]] = field(default_factory=set[tuple[int, ServerId]])
    outcome: Outcome | None = None
    reason: AbortReason | None = None


class MiniCoordinator:
    """Client-side half: fan out prepares, collect votes, fan out the decision, wait for every ack."""

    def __init__(self, endpoint: Endpoint, send: Send) -> None:
        self.endpoint = endpoint
        self.send = send
        self.rounds: dict[TxnId, MiniRound] = {}

    def start(
        self,
        payload: TransactionPayload,
        config: Configuration,
        on_outcome: Callable[[Outcome, AbortReason | None], None],
    ) -> None:
        by_partition: dict[int, list[SchemaKey]] = {}
        for key in payload.footprint():
            by_partition.setdefault(partition_of(key, config), []).append(key)

        participants = [(p, r) for p in by_partition for r in config.replicas(p)]
        self.rounds[payload.txn_id] = MiniRound(payload, participants, on_outcome)

        for p, keys in by_partition.items():
            owned = set(keys)
            prepare = MiniPrepare(
                p,
                payload.txn_id,
                tuple((r.key, r.observed_version) for r in payload.reads if r.key in owned),
                tuple((w.key, w.op) for w in payload.writes if w.key in owned),
                self.endpoint,
            )
            for replica in config.replicas(p):
                self.send(replica, prepare)

    def on_vote(self, vote: MiniVote) -> None:
        rnd = self.rounds.get(vote.txn_id)
        if rnd is None or rnd.outcome is not None:
            return

        rnd.votes[(vote.partition, vote.server)] = vote.reason
        if vote.reason is not None:
            self._decide(rnd, Outcome.aborted, vote.reason)
        elif len(rnd.votes) == len(rnd.participants):
            self._decide(rnd, Outcome.committed, None)

    def _decide(self, rnd: MiniRound, outcome: Outcome, reason: AbortReason | None) -> None:
        rnd.outcome, rnd.reason = outcome, reason
        for p, server in rnd.participants:
            self.send(server, MiniDecide(p, rnd.payload.txn_id, outcome, self.endpoint))

    def on_ack(self, ack: MiniAck) -> None:
        rnd = self.rounds.get(ack.txn_id)
        if rnd is None or rnd.outcome is None:
            return

        rnd.acks.add((ack.partition, ack.server))
        if len(rnd.acks) == len(rnd.participants):
            del self.rounds[ack.txn_id]
            rnd.on_outcome(rnd.outcome, rnd.reason)
