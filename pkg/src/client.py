"""
client.py

The client library. A transaction runs entirely against a local TransactionContext: reads are fetched
from storage once and cached with the version they saw, writes are folded into a buffer, and nothing
reaches the servers until the root context commits. Commit builds the payload, computes the chain and
hands it to the chain's head; the head answers with the final outcome. Token retries happen between
the servers and are invisible here.

Nested contexts keep their own cache and buffer with a pointer to the parent. Reads fall through to
the parent chain before going to storage; committing a child merges it into its parent, or aborts
the child if the two touched each other's keys while the child was open.
"""

import logging
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum

from src.core import ReadRecord, SchemaKey, TransactionPayload, TxnId, WriteRecord, make_txn_id
from src.mapping import Chain, Configuration, VirtualServerId, build_chain, partition_of
from src.messages import (
    AbortReason,
    ClientReply,
    ConfigResponse,
    Endpoint,
    Envelope,
    Forward,
    GetConfig,
    Message,
    MiniAck,
    MiniVote,
    Outcome,
    Read,
    ReadReply,
    StatusQuery,
    StatusReply,
    TxnStatus,
    WrongServer,
)
from src.minitxn import MiniCoordinator
from src.transport import DestinationCrashedError, Transport
from src.values import AtomicOp, Value, delete, fold_ops, overwrite, sequence

logger = logging.getLogger(__name__)

DEFAULT_CLIENT_TIMEOUT_US = 4_000_000


class TxnNotOpenError(Exception):
    """Raised when a transaction context is used after it committed or aborted."""

    ...


class ParentBusyError(Exception):
    """Raised when a context with an open child is read, written, nested again, committed or aborted."""

    ...


class ServerUnreachableError(Exception):
    """Raised when no server answers a read for a key."""

    ...


class CommitTimeoutError(Exception):
    """Raised when a blocking commit gets no outcome in time and the head cannot say either."""

    ...


class TxnState(StrEnum):
    open = "open"
    committing = "committing"
    committed = "committed"
    aborted = "aborted"


class NestedOutcome(StrEnum):
    merged = "merged"
    nested_abort = "nested_abort"


@dataclass(eq=False)
class TransactionContext:
    txn_id: TxnId
    parent: "TransactionContext | None" = None
    read_cache: dict[SchemaKey, tuple[Value, int]] = field(default_factory=dict[SchemaKey, tuple[Value, int]])
    write_buffer: dict[SchemaKey, AtomicOp] = field(default_factory=dict[SchemaKey, AtomicOp])
    state: TxnState = TxnState.open
    child: "TransactionContext | None" = None

    # Logical stamps (shared clock of the root) used to spot parent/child conflicts.
    began: int = 0
    read_keys: set[SchemaKey] = field(default_factory=set[SchemaKey])
    read_stamps: dict[SchemaKey, int] = field(default_factory=dict[SchemaKey, int])
    write_stamps: dict[SchemaKey, int] = field(default_factory=dict[SchemaKey, int])
    clock: list[int] = field(default_factory=lambda: [0])

    def tick(self) -> int:
        self.clock[0] += 1
        return self.clock[0]

    def lineage(self) -> list["TransactionContext"]:
        """Root first, self last."""

        chain: list[TransactionContext] = []
        ctx: TransactionContext | None = self
        while ctx is not None:
            chain.append(ctx)
            ctx = ctx.parent
        return chain[::-1]

    def payload(self) -> TransactionPayload:
        return TransactionPayload(
            self.txn_id,
            tuple(ReadRecord(k, version) for k, (_, version) in sorted(self.read_cache.items())),
            tuple(WriteRecord(k, op) for k, op in sorted(self.write_buffer.items())),
        )

    def require_open(self) -> None:
        if self.state is not TxnState.open:
            raise TxnNotOpenError(f"Transaction {self.txn_id:#x} is {self.state}")

    def require_idle(self) -> None:
        self.require_open()
        if self.child is not None:
            raise ParentBusyError(f"Transaction {self.txn_id:#x} has an open nested transaction")


def _absorbing(op: AtomicOp | None) -> bool:
    """Whether `op` determines the key's value without looking at what was there."""

    match op:
        case overwrite() | delete():
            return True
        case sequence(ops=ops):
            return _absorbing(ops[0])
        case _:
            return False


type Fetch = Callable[[SchemaKey], tuple[Value, int]]


def txn_get(ctx: TransactionContext, key: SchemaKey, fetch: Fetch) -> Value:
    """
    Resolve `key` inside a context: fold the buffered ops of the whole lineage (root to self) and apply
    them to the nearest cached base value, fetching from storage only if nothing up the chain has one.
    """

    ctx.require_idle()
    lineage = ctx.lineage()

    op: AtomicOp | None = None
    for c in lineage:
        if key in c.write_buffer:
            op = fold_ops(op, c.write_buffer[key])

    if _absorbing(op):
        return op.apply(None)  # pyright: ignore[reportOptionalMemberAccess]

    ctx.read_keys.add(key)
    for c in reversed(lineage):
        if key in c.read_cache:
            base = c.read_cache[key][0]
            break
    else:
        base, version = fetch(key)
        ctx.read_cache[key] = (base, version)
        ctx.read_stamps[key] = ctx.tick()

    return base if op is None else op.apply(base)


def txn_put(ctx: TransactionContext, key: SchemaKey, op: AtomicOp) -> None:
    ctx.require_idle()
    ctx.write_buffer[key] = fold_ops(ctx.write_buffer.get(key), op)
    ctx.write_stamps[key] = ctx.tick()


def begin_nested(parent: TransactionContext) -> TransactionContext:
    parent.require_idle()
    child = TransactionContext(parent.txn_id, parent=parent, clock=parent.clock)
    child.began = child.tick()
    parent.child = child
    return child


def commit_nested(child: TransactionContext) -> NestedOutcome:
    """
    Merge a child into its parent, or abort it when the two conflict:
     - the child read a key the parent wrote after the child began
     - the child fetched a key at a different version than the parent has cached
     - the child wrote a key the parent read after the child began

    The parent is busy while the child is open, so these only fire when a parent read or write on
    another thread passed its busy check just before the child began.
    """

    child.require_idle()
    parent = child.parent
    if parent is None:
        raise TxnNotOpenError(f"Transaction {child.txn_id:#x} is not nested")

    conflict = (
        any(parent.write_stamps.get(k, 0) > child.began for k in child.read_keys)
        or any(k in parent.read_cache and parent.read_cache[k][1] != v for k, (_, v) in child.read_cache.items())
        or any(parent.read_stamps.get(k, 0) > child.began for k in child.write_buffer)
    )
    parent.child = None
    if conflict:
        child.state = TxnState.aborted
        return NestedOutcome.nested_abort

    for k, entry in child.read_cache.items():
        if k not in parent.read_cache:
            parent.read_cache[k] = entry
            parent.read_stamps[k] = child.read_stamps[k]
    parent.read_keys |= child.read_keys
    for k, op in child.write_buffer.items():
        parent.write_buffer[k] = fold_ops(parent.write_buffer.get(k), op)
        parent.write_stamps[k] = child.write_stamps[k]

    child.state = TxnState.committed
    return NestedOutcome.merged


@dataclass(eq=True, frozen=True)
class CommitResult:
    txn_id: TxnId
    outcome: Outcome
    reason: AbortReason | None = None
    retries: int = 0


type OnOutcome = Callable[[CommitResult], None]


@dataclass
class PendingCommit:
    ctx: TransactionContext
    payload: TransactionPayload
    chain: Chain
    on_outcome: OnOutcome
    started_us: int


class Client:
    """
    A client handle. `index` makes transaction ids unique across clients; `coordinator`, when given,
    is asked for a fresh configuration whenever a server says this client's one is stale.
    """

    def __init__(
        self,
        name: Endpoint,
        transport: Transport,
        config: Configuration,
        index: int,
        coordinator: Endpoint | None = None,
        timeout_us: int = DEFAULT_CLIENT_TIMEOUT_US,
        baseline: bool = False,
    ) -> None:
        self.name = name
        self.transport = transport
        self.config = config
        self.index = index
        self.coordinator = coordinator
        self.timeout_us = timeout_us
        self.baseline = baseline

        self.pending: dict[TxnId, PendingCommit] = {}
        self.mini = MiniCoordinator(name, lambda dst, msg: self.transport.send(self.name, dst, msg))
        self._seq = 0
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"Client({self.name})"

    # Transaction API

    def begin(self) -> TransactionContext:
        with self._lock:
            self._seq += 1
            return TransactionContext(make_txn_id(self.index, self._seq))

    def get(self, ctx: TransactionContext, key: SchemaKey) -> Value:
        return txn_get(ctx, key, self._fetch)

    def put(self, ctx: TransactionContext, key: SchemaKey, op: AtomicOp) -> None:
        txn_put(ctx, key, op)

    def begin_nested(self, parent: TransactionContext) -> TransactionContext:
        return begin_nested(parent)

    def commit_nested(self, child: TransactionContext) -> NestedOutcome:
        return commit_nested(child)

    def abort(self, ctx: TransactionContext) -> None:
        """Abort locally. Nothing was sent to the servers, so nothing needs cleaning up."""

        ctx.require_idle()
        ctx.state = TxnState.aborted
        if ctx.parent is not None:
            ctx.parent.child = None

    def submit(self, ctx: TransactionContext, on_outcome: OnOutcome) -> None:
        """Start committing a root context; `on_outcome` runs when the outcome is known."""

        ctx.require_idle()
        if ctx.parent is not None:
            raise TxnNotOpenError("Only a root transaction can commit; use commit_nested for children")

        payload = ctx.payload()
        if not payload.reads and not payload.writes:
            ctx.state = TxnState.committed
            on_outcome(CommitResult(ctx.txn_id, Outcome.committed))
            return

        ctx.state = TxnState.committing
        if self.baseline:
            self.mini.start(payload, self.config, lambda outcome, reason: self._resolve(ctx, outcome, reason, 0, on_outcome))
            return

        chain = build_chain(payload, self.config)
        self.pending[ctx.txn_id] = PendingCommit(ctx, payload, chain, on_outcome, self.transport.now_us())
        self._send_to_head(self.pending[ctx.txn_id])
        self._arm(ctx.txn_id)

    def commit(self, ctx: TransactionContext, timeout: float = 10.0) -> CommitResult:
        """
        Blocking commit for transports that run on their own threads (the TCP transport). After a
        timeout the client stops resending and asks the head for the transaction's status before
        giving up; a reply that arrives later is ignored.
        """

        done = threading.Event()
        results: list[CommitResult] = []

        def on_outcome(result: CommitResult) -> None:
            results.append(result)
            done.set()

        self.submit(ctx, on_outcome)
        if done.wait(timeout):
            return results[0]

        pending = self.pending.pop(ctx.txn_id, None)
        if results:
            return results[0]
        if pending is not None:
            try:
                reply = self._request(pending.chain.head.server, StatusQuery(ctx.txn_id))
            except ServerUnreachableError as e:
                logger.warning(f"{self.name}: no status for {ctx.txn_id:#x}: {e}")
            else:
                if isinstance(reply, StatusReply) and reply.status in (TxnStatus.committed, TxnStatus.aborted):
                    outcome = Outcome(reply.status.value)
                    ctx.state = TxnState.committed if outcome is Outcome.committed else TxnState.aborted
                    return CommitResult(ctx.txn_id, outcome)
        raise CommitTimeoutError(f"No outcome for {ctx.txn_id:#x} after {timeout}s")

    # Non-transactional passthroughs

    def read(self, key: SchemaKey) -> Value:
        return self._fetch(key)[0]

    def write(self, key: SchemaKey, op: AtomicOp, on_outcome: OnOutcome | None = None) -> TransactionContext:
        ctx = self.begin()
        self.put(ctx, key, op)
        self.submit(ctx, on_outcome or (lambda _: None))
        return ctx

    # Transport entry points

    def handle(self, env: Envelope) -> None:
        match env.body:
            case ClientReply(txn_id=txn, outcome=outcome, reason=reason, retries=retries):
                pending = self.pending.pop(txn, None)
                if pending is None:
                    return
                self._resolve(pending.ctx, outcome, reason, retries, pending.on_outcome)
            case WrongServer(config_version=version):
                logger.debug(f"{self.name}: stale configuration ({self.config.version} < {version})")
                self._refresh(version)
            case ConfigResponse(config=config):
                self.install(config)
            case MiniVote() as vote:
                self.mini.on_vote(vote)
            case MiniAck() as ack:
                self.mini.on_ack(ack)
            case other:
                logger.warning(f"{self.name} ignoring {type(other).__name__}")

    def serve(self, msg: Message) -> Message:
        return WrongServer(self.config.version)

    def install(self, config: Configuration) -> None:
        """Adopt a newer configuration and resend every pending commit under it; servers drop the old routing."""

        if config.version <= self.config.version:
            return
        self.config = config
        for pending in list(self.pending.values()):
            pending.chain = build_chain(pending.payload, config)
            self._send_to_head(pending)

    # Internals

    def _resolve(
        self,
        ctx: TransactionContext,
        outcome: Outcome,
        reason: AbortReason | None,
        retries: int,
        on_outcome: OnOutcome,
    ) -> None:
        ctx.state = TxnState.committed if outcome is Outcome.committed else TxnState.aborted
        on_outcome(CommitResult(ctx.txn_id, outcome, reason, retries))

    def _send_to_head(self, pending: PendingCommit) -> None:
        head = pending.chain.head
        self.transport.send(self.name, head.server, Forward(head.vs, pending.payload, pending.chain, None, self.name))

    def _arm(self, txn: TxnId) -> None:
        self.transport.call_later(self.name, self.timeout_us, lambda: self._on_timeout(txn))

    def _on_timeout(self, txn: TxnId) -> None:
        pending = self.pending.get(txn)
        if pending is None:
            return
        logger.debug(f"{self.name}: resending {txn:#x}")
        self._send_to_head(pending)
        self._arm(txn)

    def _refresh(self, min_version: int) -> None:
        if self.coordinator is None:
            return
        try:
            reply = self.transport.request(self.name, self.coordinator, GetConfig(min_version))
        except DestinationCrashedError:
            logger.warning(f"{self.name}: coordinator unreachable")
            return
        if isinstance(reply, ConfigResponse):
            self.install(reply.config)

    def _request(self, server: str, msg: Message) -> Message:
        try:
            return self.transport.request(self.name, server, msg)
        except DestinationCrashedError as e:
            raise ServerUnreachableError(str(e)) from None

    def _fetch(self, key: SchemaKey) -> tuple[Value, int]:
        """Read committed state from replica slot 0 of the key's partition, refreshing the config once."""

        for _ in range(2):
            p = partition_of(key, self.config)
            reply = self._request(self.config.replicas(p)[0], Read(VirtualServerId(p, 0), key))
            match reply:
                case ReadReply(value=value, version=version):
                    return value, version
                case WrongServer(config_version=version):
                    self._refresh(version)
                case _:
                    break
        raise ServerUnreachableError(f"No replica of {key!r} would serve the read")
