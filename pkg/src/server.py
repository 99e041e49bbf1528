"""
server.py

Storage servers. A physical StorageServer hosts one VirtualServer per partition it replicates, and
each VirtualServer runs the chain commit pipeline for its partition independently:

    Forward   validate against committed state and prepared transactions, check the mediator
              token against every local key's largest-seen token, then prepare and pass the
              transaction on (or, at the tail, turn it around as a commit)
    Commit    mark the record commit-pending, pass the commit backward, and apply writes in token
              order once no smaller-token transaction is still pending on those keys
    Abort     drop the prepared record and pass the abort backward
    Retry     drop the prepared record and pass the retry backward; the head re-issues the
              transaction with a token above the floor

Handlers never touch the network. They return Outbound messages and the StorageServer sends them,
so the same VirtualServer runs under the simulator, the interleaving search and the TCP transport.

A VirtualServer is keyed by partition rather than by replica slot: slots shift when a replica fails,
and a survivor must keep its state when it moves from slot 1 to slot 0.
"""

import logging
import random
from collections.abc import Mapping
from dataclasses import dataclass, replace
from enum import StrEnum
from functools import partial

from src import codec
from src.applylog import ApplyLog
from src.core import MediatorToken, SchemaKey, TokenCounter, TokenStrategy, TransactionPayload, TxnId
from src.mapping import Chain, Configuration, Hop, ServerId, VirtualServerId, build_chain, partition_of
from src.messages import (
    AbortBackward,
    AbortReason,
    ChainMessage,
    ClientReply,
    CommitBackward,
    ConfigResponse,
    Endpoint,
    Envelope,
    Forward,
    Message,
    MiniDecide,
    MiniPrepare,
    Outcome,
    Read,
    ReadReply,
    RetryBackward,
    SnapshotReply,
    SnapshotRequest,
    StatusQuery,
    StatusReply,
    TxnStatus,
    WrongServer,
)
from src.minitxn import MiniParticipant
from src.state import (
    AppliedWrite,
    CompletionEntry,
    KeyState,
    Phase,
    ServerTxnRecord,
    VirtualServerSnapshot,
)
from src.transport import Transport
from src.values import TypeMismatchError, Value

logger = logging.getLogger(__name__)

DEFAULT_RETRY_BUDGET = 50
DEFAULT_RETRANSMIT_US = 2_000_000


class WrongServerError(Exception):
    """Raised when a read reaches a server that does not (or not yet) serve the key's partition."""

    def __init__(self, config_version: int) -> None:
        super().__init__(f"Not served here under configuration {config_version}")
        self.config_version = config_version


class UnknownTxnError(Exception):
    """Raised when a commit arrives for a transaction this virtual server has no record of."""

    ...


class SourceUnavailableError(Exception):
    """Raised when a new replica has no surviving replica to copy its state from."""

    ...


@dataclass(eq=True, frozen=True)
class Outbound:
    dst: Endpoint
    message: Message


class InvalidReason(StrEnum):
    stale_read = "stale_read"
    reads_prepared_write = "reads_prepared_write"
    writes_prepared_read = "writes_prepared_read"
    type_mismatch = "type_mismatch"


@dataclass(eq=True, frozen=True)
class Valid:
    pass


@dataclass(eq=True, frozen=True)
class Invalid:
    reason: InvalidReason


@dataclass(eq=True, frozen=True)
class Pass:
    pass


@dataclass(eq=True, frozen=True)
class NeedsRetry:
    floor: MediatorToken


def _same_hop(a: Hop | None, b: Hop | None) -> bool:
    if a is None or b is None:
        return a is b
    return a.server == b.server and a.vs.partition_index == b.vs.partition_index


class VirtualServer:
    def __init__(
        self,
        server: ServerId,
        partition: int,
        config: Configuration,
        counter: TokenCounter,
        log: ApplyLog,
        retry_budget: int = DEFAULT_RETRY_BUDGET,
        order_check: bool = True,
        ready: bool = True,
    ) -> None:
        self.server = server
        self.partition = partition
        self.config = config
        self.counter = counter
        self.log = log
        self.retry_budget = retry_budget
        self.order_check_enabled = order_check
        self.ready = ready

        self.keys: dict[SchemaKey, KeyState] = {}
        self.records: dict[TxnId, ServerTxnRecord] = {}
        self.completions: dict[TxnId, CompletionEntry] = {}
        self.retired: dict[TxnId, MediatorToken] = {}
        self.armed: list[tuple[TxnId, MediatorToken]] = []
        self._touching: dict[SchemaKey, set[TxnId]] = {}

    @property
    def vs(self) -> VirtualServerId | None:
        return self.config.vs_of(self.partition, self.server)

    def __repr__(self) -> str:
        return f"{self.server}[p{self.partition}]"

    # Reads

    def local_read(self, key: SchemaKey) -> tuple[Value, int]:
        """Committed state only; prepared writes are never visible."""

        if not self.ready or self.vs is None or partition_of(key, self.config) != self.partition:
            raise WrongServerError(self.config.version)
        ks = self.keys.get(key)
        return (ks.value, ks.version) if ks else (None, 0)

    # Validation and ordering

    def validate(self, rec: ServerTxnRecord) -> Valid | Invalid:
        for r in rec.reads:
            ks = self.keys.get(r.key)
            if r.observed_version != (ks.version if ks else 0):
                return Invalid(InvalidReason.stale_read)

        reads, writes = rec.read_keys, rec.write_keys
        for other in self._active_touching(rec.keys):
            if other.txn_id == rec.txn_id:
                continue
            if other.write_keys & reads:
                return Invalid(InvalidReason.reads_prepared_write)
            if other.read_keys & writes:
                return Invalid(InvalidReason.writes_prepared_read)

        for w in rec.writes:
            ks = self.keys.get(w.key)
            try:
                w.op.apply(ks.value if ks else None)
            except TypeMismatchError:
                return Invalid(InvalidReason.type_mismatch)
        return Valid()

    def order_check(self, rec: ServerTxnRecord) -> Pass | NeedsRetry:
        if not self.order_check_enabled:
            return Pass()

        offending = [
            ks.max_seen
            for k in rec.keys
            if (ks := self.keys.get(k)) is not None and ks.max_seen is not None and ks.max_seen >= rec.token
        ]
        return NeedsRetry(max(offending)) if offending else Pass()

    # Message handlers

    def handle_forward(self, msg: Forward, src: Endpoint) -> list[Outbound]:
        payload, txn = msg.payload, msg.payload.txn_id
        if not self.ready:
            logger.debug(f"{self} not ready, dropping Forward for {txn:#x}")
            return []
        if self._stale(msg):
            if src == msg.client:
                return [Outbound(msg.client, WrongServer(self.config.version, txn))]
            return []

        chain = build_chain(payload, self.config)
        pos = self._position(chain)
        if pos is None or (msg.token is None and pos != 0):
            if src == msg.client:
                return [Outbound(msg.client, WrongServer(self.config.version, txn))]
            logger.warning(f"{self} is not on the chain of {txn:#x} under configuration {self.config.version}")
            return []

        if (entry := self.completions.get(txn)) is not None:
            return self._reply(txn, chain, pos, msg.client, entry)

        if (rec := self.records.get(txn)) is not None:
            if msg.token is None or msg.token == rec.token:
                rec.chain = chain
                return self._advance(rec)
            if msg.token < rec.token or rec.phase is not Phase.prepared:
                logger.debug(f"{self} ignoring stale pass {msg.token!r} of {txn:#x}")
                return []
            self._discard(rec)

        retired = self.retired.get(txn)
        if msg.token is None:
            token = self.counter.generate(txn, retired)
        elif retired is not None and retired >= msg.token:
            # a pass this hop already gave up on: answer it again instead of re-running it
            if pos > 0:
                floor = self._floor(self._local_keys(payload), msg.token)
                return self._retry_backward(txn, chain, pos, msg.client, msg.token, floor)
            token = self.counter.generate(txn, retired)
        else:
            token = msg.token
            self.counter.observe(token)

        return self._process(payload, chain, pos, token, msg.client, msg.retries)

    def handle_commit(self, msg: CommitBackward) -> list[Outbound]:
        txn = msg.txn_id
        if not self.ready or self._stale(msg):
            return []

        if (entry := self.completions.get(txn)) is not None:
            pos = self._position(msg.chain)
            if pos is None or entry.outcome is not Outcome.committed:
                return []
            return self._reply(txn, msg.chain, pos, msg.client, entry)

        rec = self.records.get(txn)
        if rec is None:
            raise UnknownTxnError(f"{self} has no record of {txn:#x}")
        if rec.token != msg.token:
            logger.debug(f"{self} ignoring commit of pass {msg.token!r}, holding {rec.token!r}")
            return []

        rec.phase = Phase.commit_pending
        rec.chain = build_chain(rec.payload, self.config)
        pos = self._position(rec.chain)
        out = [] if pos is None else self._reply_pending(rec, pos)
        self._try_apply()
        return out

    def handle_abort(self, msg: AbortBackward) -> list[Outbound]:
        txn = msg.txn_id
        if not self.ready or self._stale(msg):
            return []

        chain, client, retries = msg.chain, msg.client, 0
        if (rec := self.records.get(txn)) is not None:
            if msg.token is not None and rec.token > msg.token:
                return []
            self._discard(rec)
            chain, client, retries = build_chain(rec.payload, self.config), rec.client, rec.retries

        existing = self.completions.get(txn)
        if existing is not None and existing.outcome is Outcome.committed:
            logger.error(f"{self} received an abort for committed {txn:#x}")
            return []

        entry = existing or CompletionEntry(Outcome.aborted, msg.token, msg.reason, retries)
        self.completions[txn] = entry
        pos = self._position(chain)
        out = [] if pos is None else self._reply(txn, chain, pos, client, entry)
        self._try_apply()
        return out

    def handle_retry(self, msg: RetryBackward) -> list[Outbound]:
        txn = msg.txn_id
        if not self.ready or self._stale(msg) or txn in self.completions:
            return []

        if (rec := self.records.get(txn)) is not None:
            if rec.token != msg.token or rec.phase is not Phase.prepared:
                return []
            chain = build_chain(rec.payload, self.config)
            pos = self._position(chain)
            self._discard(rec)
            if pos is None:
                return []
            if pos > 0:
                return self._retry_backward(txn, chain, pos, rec.client, msg.token, msg.floor)

            retries = rec.retries + 1
            if retries > self.retry_budget:
                rec.retries = retries
                return self._abort(rec, 0, AbortReason.retry_budget)
            token = self.counter.generate(txn, max(msg.floor, rec.token))
            logger.debug(f"{self} retrying {txn:#x} with {token!r} (attempt {retries})")
            return self._process(rec.payload, chain, 0, token, rec.client, retries)

        retired = self.retired.get(txn)
        if retired is not None and retired >= msg.token:
            return []
        pos = self._position(msg.chain)
        if pos is None or pos == 0:
            return []
        self.retired[txn] = msg.token
        return self._retry_backward(txn, msg.chain, pos, msg.client, msg.token, msg.floor)

    def handle_retransmit(self) -> list[Outbound]:
        """
        Rebuild every open transaction's chain under the current configuration and resend what moved.
        Anything last sent under an older configuration is resent too, since receivers drop it.
        """

        out: list[Outbound] = []
        for rec in sorted(self.records.values(), key=lambda r: r.token):
            old = rec.chain
            resend = old.config_version != self.config.version
            old_pos = self._position(old)
            old_prev = old.hops[old_pos - 1] if old_pos else None
            old_next = old.hops[old_pos + 1] if old_pos is not None and old_pos + 1 < len(old) else None

            chain = build_chain(rec.payload, self.config)
            pos = self._position(chain)
            if pos is None:
                continue
            rec.chain = chain
            prev = chain.hops[pos - 1] if pos > 0 else None
            nxt = chain.hops[pos + 1] if pos + 1 < len(chain) else None

            if rec.phase is Phase.prepared and (resend or nxt is None or not _same_hop(nxt, old_next)):
                out += self._advance(rec)
            elif rec.phase is Phase.commit_pending and (resend or old_pos is None or not _same_hop(prev, old_prev)):
                out += self._advance(rec)
        self._try_apply()
        return out

    def on_timer(self, txn: TxnId, token: MediatorToken) -> list[Outbound]:
        rec = self.records.get(txn)
        if rec is None or rec.token != token or rec.phase is not Phase.prepared:
            return []
        chain = build_chain(rec.payload, self.config)
        if self._position(chain) is None:
            return []
        rec.chain = chain
        logger.debug(f"{self} retransmitting {txn:#x}")
        return self._advance(rec)

    # Recovery

    def snapshot(self) -> VirtualServerSnapshot:
        return VirtualServerSnapshot(
            vs=self.vs or VirtualServerId(self.partition, 0),
            keys={k: replace(ks) for k, ks in self.keys.items()},
            records={t: replace(r) for t, r in self.records.items()},
            completions=dict(self.completions),
            retired=dict(self.retired),
        )

    def recover_replica(self, source: VirtualServerSnapshot | None) -> None:
        """Take over committed state and open transactions from a surviving replica before serving."""

        if source is None:
            raise SourceUnavailableError(f"No surviving replica of partition {self.partition} for {self.server}")

        self.keys = {k: replace(ks) for k, ks in source.keys.items()}
        self.records = {t: replace(r) for t, r in source.records.items()}
        self.completions = {**source.completions, **self.completions}
        for txn, token in source.retired.items():
            self.retired[txn] = max(token, self.retired.get(txn, token))

        self._touching.clear()
        for rec in self.records.values():
            self._touch(rec)
            self.counter.observe(rec.token)
        for ks in self.keys.values():
            if ks.max_seen is not None:
                self.counter.observe(ks.max_seen)

        self.ready = True
        logger.info(f"{self} recovered {len(self.keys)} keys and {len(self.records)} open transactions")

    # Internals

    def _position(self, chain: Chain) -> int | None:
        return chain.index_of(self.partition, self.server)

    def _stale(self, msg: ChainMessage) -> bool:
        """Whether `msg` was routed under another configuration. The sender resends under its new one."""

        if msg.chain.config_version == self.config.version:
            return False
        logger.debug(
            f"{self} dropping {type(msg).__name__} from configuration {msg.chain.config_version} "
            f"(serving {self.config.version})"
        )
        return True

    def _local_keys(self, payload: TransactionPayload) -> frozenset[SchemaKey]:
        return frozenset(k for k in payload.footprint() if partition_of(k, self.config) == self.partition)

    def _floor(self, keys: frozenset[SchemaKey], token: MediatorToken) -> MediatorToken:
        seen = [ks.max_seen for k in keys if (ks := self.keys.get(k)) is not None and ks.max_seen is not None]
        return max([token, *seen])

    def _active_touching(self, keys: frozenset[SchemaKey]) -> list[ServerTxnRecord]:
        txns = sorted({t for k in keys for t in self._touching.get(k, ())})
        return [self.records[t] for t in txns]

    def _touch(self, rec: ServerTxnRecord) -> None:
        for k in rec.keys:
            self._touching.setdefault(k, set()).add(rec.txn_id)

    def _forget(self, rec: ServerTxnRecord) -> None:
        self.records.pop(rec.txn_id, None)
        for k in rec.keys:
            txns = self._touching.get(k)
            if txns is not None:
                txns.discard(rec.txn_id)
                if not txns:
                    del self._touching[k]

    def _discard(self, rec: ServerTxnRecord) -> None:
        """Drop a prepared pass. Whatever was waiting behind its token may now apply."""

        self._forget(rec)
        self.retired[rec.txn_id] = max(rec.token, self.retired.get(rec.txn_id, rec.token))
        self._try_apply()

    def _process(
        self,
        payload: TransactionPayload,
        chain: Chain,
        pos: int,
        token: MediatorToken,
        client: Endpoint,
        retries: int,
    ) -> list[Outbound]:
        txn = payload.txn_id
        reads, writes = payload.restricted_to(self._local_keys(payload))

        while True:
            rec = ServerTxnRecord(txn, payload, reads, writes, token, chain, client, Phase.prepared, retries)

            match self.validate(rec):
                case Invalid(reason=InvalidReason.type_mismatch):
                    return self._abort(rec, pos, AbortReason.type_mismatch)
                case Invalid(reason=reason):
                    logger.debug(f"{self} rejects {txn:#x}: {reason}")
                    return self._abort(rec, pos, AbortReason.validation_failed)
                case Valid():
                    pass

            match self.order_check(rec):
                case Pass():
                    return self._prepare(rec)
                case NeedsRetry(floor=floor):
                    self.retired[txn] = max(token, self.retired.get(txn, token))
                    if pos > 0:
                        return self._retry_backward(txn, chain, pos, client, token, floor)
                    retries += 1
                    if retries > self.retry_budget:
                        rec.retries = retries
                        return self._abort(rec, pos, AbortReason.retry_budget)
                    token = self.counter.generate(txn, max(floor, token))

    def _prepare(self, rec: ServerTxnRecord) -> list[Outbound]:
        self.records[rec.txn_id] = rec
        self._touch(rec)
        for k in rec.keys:
            self.keys.setdefault(k, KeyState()).observe(rec.token)
        return self._advance(rec)

    def _advance(self, rec: ServerTxnRecord) -> list[Outbound]:
        """Send whatever this hop owes the chain for `rec` in its current phase."""

        pos = self._position(rec.chain)
        if pos is None:
            return []

        if rec.phase is Phase.prepared:
            if pos == len(rec.chain) - 1:
                rec.phase = Phase.commit_pending
                out = self._reply_pending(rec, pos)
                self._try_apply()
                return out
            nxt = rec.chain.hops[pos + 1]
            self.armed.append((rec.txn_id, rec.token))
            return [
                Outbound(nxt.server, Forward(nxt.vs, rec.payload, rec.chain, rec.token, rec.client, rec.retries))
            ]
        return self._reply_pending(rec, pos)

    def _abort(self, rec: ServerTxnRecord, pos: int, reason: AbortReason) -> list[Outbound]:
        entry = CompletionEntry(Outcome.aborted, rec.token, reason, rec.retries)
        self.completions[rec.txn_id] = entry
        return self._reply(rec.txn_id, rec.chain, pos, rec.client, entry)

    def _reply_pending(self, rec: ServerTxnRecord, pos: int) -> list[Outbound]:
        entry = CompletionEntry(Outcome.committed, rec.token, None, rec.retries)
        return self._reply(rec.txn_id, rec.chain, pos, rec.client, entry)

    def _reply(self, txn: TxnId, chain: Chain, pos: int, client: Endpoint, entry: CompletionEntry) -> list[Outbound]:
        """Pass an outcome one hop backward, or to the client from the head."""

        if pos == 0:
            return [Outbound(client, ClientReply(txn, entry.outcome, entry.reason, entry.retries, entry.token))]

        prev = chain.hops[pos - 1]
        if entry.outcome is Outcome.aborted:
            reason = entry.reason or AbortReason.validation_failed
            return [Outbound(prev.server, AbortBackward(prev.vs, txn, chain, entry.token, client, reason))]
        if entry.token is None:
            return []
        return [Outbound(prev.server, CommitBackward(prev.vs, txn, chain, entry.token, client, entry.retries))]

    def _retry_backward(
        self,
        txn: TxnId,
        chain: Chain,
        pos: int,
        client: Endpoint,
        token: MediatorToken,
        floor: MediatorToken,
    ) -> list[Outbound]:
        prev = chain.hops[pos - 1]
        return [Outbound(prev.server, RetryBackward(prev.vs, txn, chain, token, client, floor))]

    def _try_apply(self) -> None:
        """
        Apply commit-pending transactions whose token is the smallest among the open transactions on
        each key they write. Applying one can unblock the next, so loop until nothing moves.
        """

        progress = True
        while progress:
            progress = False
            pending = sorted((r for r in self.records.values() if r.phase is Phase.commit_pending), key=lambda r: r.token)
            for rec in pending:
                if all(self._smallest(k) == rec.txn_id for k in rec.write_keys):
                    self._apply(rec)
                    progress = True

    def _smallest(self, key: SchemaKey) -> TxnId:
        return min((self.records[t] for t in self._touching[key]), key=lambda r: r.token).txn_id

    def _apply(self, rec: ServerTxnRecord) -> None:
        for w in rec.writes:
            ks = self.keys.setdefault(w.key, KeyState())
            try:
                ks.value = w.op.apply(ks.value)
            except TypeMismatchError as e:
                logger.warning(f"{self}: {e}; {w.key!r} left unchanged")
            ks.version += 1
            self.log.append(AppliedWrite(rec.txn_id, w.key, ks.value, ks.version, rec.token))

        self._forget(rec)
        self.completions[rec.txn_id] = CompletionEntry(Outcome.committed, rec.token, None, rec.retries)


def snapshot_source(old: Configuration, new: Configuration, partition: int, recruit: ServerId) -> ServerId | None:
    """The surviving replica a recruit copies from: the last member of the old set still alive and serving."""

    survivors = [r for r in old.replicas(partition) if r != recruit and new.is_alive(r)]
    return survivors[-1] if survivors else None


class StorageServer:
    """One physical server: routes messages to its virtual servers and owns their shared resources."""

    def __init__(
        self,
        name: ServerId,
        transport: Transport,
        config: Configuration,
        log: ApplyLog | None = None,
        retry_budget: int = DEFAULT_RETRY_BUDGET,
        order_check: bool = True,
        token_strategy: TokenStrategy = TokenStrategy.counter,
        seed: int = 0,
        retransmit_us: int = DEFAULT_RETRANSMIT_US,
    ) -> None:
        self.name = name
        self.transport = transport
        self.config = config
        self.log = log or ApplyLog()
        self.retry_budget = retry_budget
        self.order_check = order_check
        self.retransmit_us = retransmit_us
        self.counter = TokenCounter(name, strategy=token_strategy, rng=random.Random(f"{seed}/{name}"))
        for entry in self.log.entries:
            if entry.token is not None:
                self.counter.observe(entry.token)

        self.vservers: dict[int, VirtualServer] = {p: self._new_vs(p) for p in config.partitions_of(name)}
        if len(self.log):
            self._restore()
        self.retiring: dict[int, VirtualServer] = {}
        self.participant = MiniParticipant(name, self._key_table, self.log)
        self._timers: set[tuple[int, TxnId, MediatorToken]] = set()

    def __repr__(self) -> str:
        return f"StorageServer({self.name}, {len(self.vservers)} partitions)"

    def _new_vs(self, partition: int, ready: bool = True) -> VirtualServer:
        return VirtualServer(
            self.name, partition, self.config, self.counter, self.log, self.retry_budget, self.order_check, ready
        )

    def _restore(self) -> None:
        """Rebuild committed state of the partitions served here from the apply log, before serving anything."""

        replayed = self.log.replay()
        for p, vs in self.vservers.items():
            vs.keys = {k: ks for k, ks in replayed.items() if partition_of(k, self.config) == p}
            for entry in self.log.entries:
                if entry.key in vs.keys and entry.token is not None:
                    vs.completions[entry.txn_id] = CompletionEntry(Outcome.committed, entry.token)
        restored = sum(len(vs.keys) for vs in self.vservers.values())
        logger.info(f"{self.name} restored {restored} keys from {len(self.log)} applied writes")

    def _key_table(self, partition: int) -> dict[SchemaKey, KeyState] | None:
        vs = self.vservers.get(partition)
        return vs.keys if vs is not None else None

    # Transport entry points

    def handle(self, env: Envelope) -> None:
        body = env.body
        match body:
            case Forward() | CommitBackward() | AbortBackward() | RetryBackward():
                self._handle_chain(env.src, body)
            case ConfigResponse(config=config):
                if config.version > self.config.version:
                    previous = self.config
                    self.install(config)
                    self._request_snapshots(previous)
                    self.retransmit()
            case SnapshotRequest():
                self._send(body.requester, self._snapshot_reply(body.partition))
            case SnapshotReply(partition=p, snapshot=data):
                vs = self.vservers.get(p)
                if vs is not None and not vs.ready:
                    vs.recover_replica(codec.decode_snapshot(data))
                    self._emit(vs, vs.handle_retransmit())
            case MiniPrepare() | MiniDecide():
                for dst, msg in self.participant.handle(body):
                    self._send(dst, msg)
            case _:
                logger.warning(f"{self.name} cannot handle {type(body).__name__} from {env.src}")

    def serve(self, msg: Message) -> Message:
        match msg:
            case Read(key=key):
                vs = self.vservers.get(partition_of(key, self.config))
                try:
                    if vs is None:
                        raise WrongServerError(self.config.version)
                    value, version = vs.local_read(key)
                except WrongServerError as e:
                    return WrongServer(e.config_version)
                return ReadReply(key, value, version)
            case StatusQuery(txn_id=txn):
                return StatusReply(txn, self.status(txn))
            case SnapshotRequest(partition=p):
                return self._snapshot_reply(p)
            case _:
                raise ValueError(f"{self.name} does not serve {type(msg).__name__}")

    def _handle_chain(self, src: Endpoint, body: ChainMessage) -> None:
        vs = self.vservers.get(body.vs.partition_index)
        if vs is None:
            if isinstance(body, Forward) and src == body.client:
                self._send(body.client, WrongServer(self.config.version, body.payload.txn_id))
            else:
                logger.warning(f"{self.name} does not host partition {body.vs.partition_index}")
            return

        try:
            match body:
                case Forward():
                    out = vs.handle_forward(body, src)
                case CommitBackward():
                    out = vs.handle_commit(body)
                case AbortBackward():
                    out = vs.handle_abort(body)
                case RetryBackward():
                    out = vs.handle_retry(body)
        except UnknownTxnError as e:
            logger.warning(str(e))
            return
        self._emit(vs, out)

    def _send(self, dst: Endpoint, msg: Message) -> None:
        self.transport.send(self.name, dst, msg)

    def _emit(self, vs: VirtualServer, out: list[Outbound]) -> None:
        for o in out:
            self._send(o.dst, o.message)
        for txn, token in vs.armed:
            timer = (vs.partition, txn, token)
            if timer not in self._timers:
                self._timers.add(timer)
                self.transport.call_later(self.name, self.retransmit_us, partial(self._on_timer, timer))
        vs.armed.clear()

    def _on_timer(self, timer: tuple[int, TxnId, MediatorToken]) -> None:
        self._timers.discard(timer)
        partition, txn, token = timer
        if (vs := self.vservers.get(partition)) is not None:
            self._emit(vs, vs.on_timer(txn, token))

    # Configuration changes

    def install(self, config: Configuration, snapshots: Mapping[int, VirtualServerSnapshot | None] | None = None) -> None:
        """
        Adopt a new configuration: drop partitions this server lost, create virtual servers for the
        ones it gained (not ready until they recover from a surviving replica), and point every
        virtual server at the new configuration. Does not retransmit; call `retransmit` afterwards.
        """

        self.config = config
        assigned = set(config.partitions_of(self.name))

        for p in [p for p in self.vservers if p not in assigned]:
            self.retiring[p] = self.vservers.pop(p)
            logger.info(f"{self.name} hands off partition {p}")

        for p in sorted(assigned - set(self.vservers)):
            vs = self._new_vs(p, ready=False)
            self.vservers[p] = vs
            self.retiring.pop(p, None)
            if snapshots is None:
                continue
            try:
                vs.recover_replica(snapshots.get(p))
            except SourceUnavailableError as e:
                logger.error(f"Partition {p} unavailable: {e}")

        for vs in self.vservers.values():
            vs.config = config

    def retransmit(self) -> None:
        for vs in self.vservers.values():
            if vs.ready:
                self._emit(vs, vs.handle_retransmit())

    def _request_snapshots(self, previous: Configuration) -> None:
        for p, vs in self.vservers.items():
            if vs.ready:
                continue
            source = snapshot_source(previous, self.config, p, self.name)
            if source is None:
                logger.error(f"Partition {p} unavailable: no surviving replica to copy from")
            else:
                self._send(source, SnapshotRequest(p, self.name))

    def _snapshot_reply(self, partition: int) -> SnapshotReply:
        vs = self.vservers.get(partition) or self.retiring.get(partition)
        snap = vs.snapshot() if vs is not None else VirtualServerSnapshot(VirtualServerId(partition, 0))
        return SnapshotReply(partition, codec.encode_snapshot(snap))

    def snapshot(self, partition: int) -> VirtualServerSnapshot | None:
        vs = self.vservers.get(partition) or self.retiring.get(partition)
        return vs.snapshot() if vs is not None and vs.ready else None

    def durable_snapshot(self, partition: int) -> VirtualServerSnapshot:
        """What the apply log alone says about a partition: committed state and committed transactions."""

        snap = VirtualServerSnapshot(VirtualServerId(partition, 0))
        snap.keys = {k: ks for k, ks in self.log.replay().items() if partition_of(k, self.config) == partition}
        for entry in self.log.entries:
            if entry.key in snap.keys:
                snap.completions[entry.txn_id] = CompletionEntry(Outcome.committed, entry.token)
        return snap

    def status(self, txn: TxnId) -> TxnStatus:
        for vs in self.vservers.values():
            if (entry := vs.completions.get(txn)) is not None:
                return TxnStatus(entry.outcome.value)
            if txn in vs.records:
                return TxnStatus.pending
        return TxnStatus.unknown
