"""
harness.py

Runs the store inside the simulator: builds clusters, drives workloads through client handles, injects
faults, checks safety, and measures. `run_bench` drives the same workloads against a live cluster.

Safety is checked two ways after (or during) every run:
 - the recorded history goes through the serializability oracle
 - server-side invariants are asserted directly: applied writes per key follow token order, replicas
   of a partition agree, nothing of an aborted transaction is ever applied, and every Forward leaves
   a hop whose predecessors all hold the transaction prepared

Configuration changes in the simulator are installed atomically: when the coordinator issues a new
configuration every recruit first copies its state from a surviving replica, then every server and
client switches, then servers retransmit whatever moved.
"""

import logging
import random
import threading
from collections import Counter, defaultdict
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

from src.applylog import ApplyLog, FsyncPolicy
from src.client import Client, CommitResult, CommitTimeoutError, ServerUnreachableError, TransactionContext
from src.coordinator import Coordinator, CoordinatorEndpoint
from src.core import (
    MediatorToken,
    ReadRecord,
    SchemaKey,
    TokenStrategy,
    TransactionPayload,
    TxnId,
    WriteRecord,
    make_txn_id,
)
from src.history import Cycle, History, HistoryRecord, Ok, check_serializable
from src.mapping import (
    DEFAULT_PARTITIONS,
    DEFAULT_SCHEMA,
    Configuration,
    NoReplacementAvailableError,
    ServerId,
    build_chain,
    default_configuration,
    from_ranges,
)
from src.messages import AbortReason, Envelope, Forward, Outcome
from src.server import DEFAULT_RETRANSMIT_US, DEFAULT_RETRY_BUDGET, StorageServer
from src.state import AppliedWrite, VirtualServerSnapshot
from src.transport import Crash, ControlledNetwork, Fault, Link, Recover, Simulation, Transport
from src.values import TypeMismatchError, Value, overwrite
from src.workload import ReadModifyWriteStep, ReadStep, TxnPlan, UpdateStep, WorkloadSpec, WriteStep

logger = logging.getLogger(__name__)

COORDINATOR = "coordinator"
DEFAULT_DEADLINE_US = 3_600_000_000


@dataclass(eq=True, frozen=True)
class ClusterParams:
    servers: int = 6
    f: int = 1
    partitions: int = DEFAULT_PARTITIONS
    clients: int = 8
    latency_us: tuple[int, int] = (1000, 5000)
    service_us: int = 0
    retransmit_us: int = DEFAULT_RETRANSMIT_US
    client_timeout_us: int = 4_000_000
    detect_us: int = 10_000
    retry_budget: int = DEFAULT_RETRY_BUDGET
    reexecute_budget: int = 10
    order_check: bool = True
    token_strategy: TokenStrategy = TokenStrategy.counter
    baseline: bool = False
    seed: int = 0
    data_dir: Path | None = None
    fsync: FsyncPolicy = FsyncPolicy.batched

    def __post_init__(self) -> None:
        if self.f < 0:
            raise ValueError("f must be non-negative")
        if self.servers < self.f + 1:
            raise ValueError(f"{self.servers} servers cannot hold {self.f + 1} replicas per partition")


@dataclass(eq=True, frozen=True)
class Attempt:
    payload: TransactionPayload
    outcome: Outcome
    reason: AbortReason | None
    retries: int
    finished_us: int


def context_for(payload: TransactionPayload) -> TransactionContext:
    """A ready-to-commit context holding exactly `payload`, for driving scripted scenarios."""

    ctx = TransactionContext(payload.txn_id)
    ctx.read_cache = {r.key: (None, r.observed_version) for r in payload.reads}
    ctx.write_buffer = {w.key: w.op for w in payload.writes}
    return ctx


class Cluster:
    """Servers and clients on one transport, plus everything the invariant checks need to see."""

    def __init__(self, transport: Transport, config: Configuration, params: ClusterParams) -> None:
        self.transport = transport
        self.params = params
        self.coordinator = Coordinator(config)
        self.servers: dict[ServerId, StorageServer] = {}
        self.clients: list[Client] = []
        self.attempts: dict[TxnId, Attempt] = {}
        self.violations: list[str] = []

        self._segments: dict[ServerId, list[int]] = defaultdict(lambda: [0])
        self._max_seen: dict[tuple[ServerId, int, SchemaKey], MediatorToken | None] = {}

        transport.register(COORDINATOR, CoordinatorEndpoint(self.coordinator, transport, COORDINATOR))
        for name in config.servers:
            self.servers[name] = self._new_server(name, config, self._log_for(name))
        for i in range(params.clients):
            self.add_client(i)

        self.coordinator.subscribe(self._install)
        transport.send_observers.append(self._observe_send)

    # Construction

    def _log_for(self, name: ServerId) -> ApplyLog:
        if self.params.data_dir is None:
            return ApplyLog()
        return ApplyLog(self.params.data_dir / f"{name}.log", self.params.fsync)

    def _new_server(self, name: ServerId, config: Configuration, log: ApplyLog) -> StorageServer:
        server = StorageServer(
            name,
            self.transport,
            config,
            log,
            retry_budget=self.params.retry_budget,
            order_check=self.params.order_check,
            token_strategy=self.params.token_strategy,
            seed=self.params.seed,
            retransmit_us=self.params.retransmit_us,
        )
        self._register(name, server)
        return server

    def _register(self, name: str, endpoint: StorageServer | Client) -> None:
        self.transport.register(name, endpoint)

    def add_client(self, index: int) -> Client:
        client = Client(
            f"c{index}",
            self.transport,
            self.coordinator.current,
            index + 1,
            COORDINATOR,
            self.params.client_timeout_us,
            self.params.baseline,
        )
        self.clients.append(client)
        self.transport.register(client.name, client)
        return client

    # Configuration changes

    def _install(self, config: Configuration) -> None:
        previous = {name: server.config for name, server in self.servers.items()}
        snapshots: dict[ServerId, dict[int, VirtualServerSnapshot | None]] = {}

        for name in config.live_servers:
            server = self.servers.get(name)
            if server is None:
                continue
            gained = [p for p in config.partitions_of(name) if p not in server.vservers]
            if gained:
                self._segments[name].append(len(server.log))
            snapshots[name] = {p: self._snapshot_for(previous[name], config, p, name) for p in gained}

        for name, server in self.servers.items():
            if self.transport.is_alive(name):
                server.install(config, snapshots.get(name, {}))
        for client in self.clients:
            client.install(config)
        for name, server in self.servers.items():
            if self.transport.is_alive(name):
                server.retransmit()

    def _snapshot_for(
        self, old: Configuration, new: Configuration, partition: int, recruit: ServerId
    ) -> VirtualServerSnapshot | None:
        for name in reversed(old.replicas(partition)):
            if name == recruit or not new.is_alive(name) or not self.transport.is_alive(name):
                continue
            snap = self.servers[name].snapshot(partition)
            if snap is not None:
                return snap

        # Every replica that served the partition is gone: fall back to what their logs kept.
        for name in reversed(old.replicas(partition)):
            if name in self.servers and name != recruit:
                logger.warning(f"Partition {partition}: recovering {recruit} from the apply log of {name}")
                return self.servers[name].durable_snapshot(partition)
        return None

    # Client side

    def record(self, payload: TransactionPayload, result: CommitResult) -> None:
        self.attempts[result.txn_id] = Attempt(
            payload, result.outcome, result.reason, result.retries, self.transport.now_us()
        )

    def submit(self, client: Client, ctx: TransactionContext, on_outcome: Callable[[CommitResult], None]) -> None:
        payload = ctx.payload()

        def done(result: CommitResult) -> None:
            self.record(payload, result)
            on_outcome(result)

        client.submit(ctx, done)

    # Checks

    def _observe_send(self, env: Envelope) -> None:
        """Prefix validity: a Forward leaving hop i means hops 0..i all hold that pass prepared."""

        msg = env.body
        if not isinstance(msg, Forward) or msg.token is None or env.src not in self.servers:
            return
        if msg.chain.config_version != self.coordinator.current.version:
            return

        txn = msg.payload.txn_id
        for hop in msg.chain.hops[: msg.chain.position(msg.vs)]:
            server = self.servers.get(hop.server)
            if server is None or not self.transport.is_alive(hop.server):
                continue
            vs = server.vservers.get(hop.vs.partition_index)
            if vs is None or not vs.ready:
                continue
            rec = vs.records.get(txn)
            if rec is None or rec.token != msg.token:
                self.violations.append(f"{env.src} forwarded {txn:#x} {msg.token!r} but {vs} does not hold it")

    def applied_versions(self) -> tuple[dict[TxnId, dict[SchemaKey, int]], list[str]]:
        """Version each transaction created per key, taken from the apply logs, and any replica disagreement."""

        applied: dict[TxnId, dict[SchemaKey, int]] = defaultdict(dict)
        problems: list[str] = []
        for name, server in sorted(self.servers.items()):
            for entry in server.log.entries:
                seen = applied[entry.txn_id].setdefault(entry.key, entry.version)
                if seen != entry.version:
                    problems.append(
                        f"{name} applied {entry.txn_id:#x} to {entry.key!r} as version {entry.version}, "
                        f"another replica as {seen}"
                    )
        return applied, problems

    def history(self) -> History:
        applied, _ = self.applied_versions()
        history = History()
        for txn, attempt in sorted(self.attempts.items(), key=lambda kv: (kv[1].finished_us, kv[0])):
            writes = tuple(sorted(applied.get(txn, {}).items())) if attempt.outcome is Outcome.committed else ()
            reads = tuple((r.key, r.observed_version) for r in attempt.payload.reads)
            history.add(HistoryRecord(txn, reads, writes, attempt.outcome, attempt.finished_us))
        return history

    def check_invariants(self) -> list[str]:
        """Everything wrong with the servers' state so far (prefix violations are collected as they happen)."""

        applied, mismatched = self.applied_versions()
        problems = [*self.violations, *mismatched]

        for txn, attempt in self.attempts.items():
            if attempt.outcome is Outcome.aborted and txn in applied:
                problems.append(f"Aborted {txn:#x} has applied writes {sorted(applied[txn])}")

        for name, server in sorted(self.servers.items()):
            bounds = [*self._segments[name], len(server.log)]
            for lo, hi in zip(bounds, bounds[1:]):
                problems += _check_log_order(name, server.log.entries[lo:hi])

            for p, vs in server.vservers.items():
                for key, ks in vs.keys.items():
                    slot = (name, p, key)
                    prior = self._max_seen.get(slot)
                    if prior is not None and (ks.max_seen is None or ks.max_seen < prior):
                        problems.append(f"max_seen of {key!r} on {vs} went backwards")
                    self._max_seen[slot] = ks.max_seen

        problems += self._check_replicas()
        return problems

    def _check_replicas(self) -> list[str]:
        problems: list[str] = []
        config = self.coordinator.current
        for p in range(len(config.partitions)):
            views: list[tuple[ServerId, dict[SchemaKey, tuple[Value, int]]]] = []
            for name in config.replicas(p):
                server = self.servers.get(name)
                if server is None or not self.transport.is_alive(name):
                    continue
                vs = server.vservers.get(p)
                if vs is None or not vs.ready or vs.records:
                    break
                views.append((name, {k: (ks.value, ks.version) for k, ks in vs.keys.items() if ks.version}))
            else:
                for (a, va), (b, vb) in zip(views, views[1:]):
                    if va != vb:
                        problems.append(f"Replicas {a} and {b} of partition {p} disagree")
        return problems


def _check_log_order(name: ServerId, entries: Sequence[AppliedWrite]) -> list[str]:
    problems: list[str] = []
    last: dict[SchemaKey, AppliedWrite] = {}
    for entry in entries:
        prev = last.get(entry.key)
        if prev is not None:
            if entry.version <= prev.version:
                problems.append(f"{name}: {entry.key!r} version went from {prev.version} to {entry.version}")
            if entry.token is not None and prev.token is not None and not prev.token < entry.token:
                problems.append(f"{name}: {entry.key!r} applied {entry.token!r} after {prev.token!r}")
        last[entry.key] = entry
    return problems


class SimCluster(Cluster):
    """A cluster in the discrete-event simulator, with crash detection and recovery wired up."""

    def __init__(self, params: ClusterParams, schemas: Sequence[str] = (DEFAULT_SCHEMA,)) -> None:
        self.sim = Simulation(params.seed, params.latency_us, params.service_us)
        names = [f"s{i}" for i in range(params.servers)]
        config = default_configuration(names, params.f, params.partitions, schemas)
        super().__init__(self.sim, config, params)
        self.sim.fault_listeners.append(self._on_fault)

    def _register(self, name: str, endpoint: StorageServer | Client) -> None:
        self.sim.register(name, endpoint, service=isinstance(endpoint, StorageServer))

    def inject(self, at_us: int, fault: Fault) -> None:
        self.sim.inject_fault(at_us, fault)

    def _on_fault(self, fault: Fault) -> None:
        match fault:
            case Crash(server=name):
                incarnation = self.sim.incarnation[name]
                self.sim.call_later(COORDINATOR, self.params.detect_us, lambda: self._detect(name, incarnation))
            case Recover(server=name):
                self._recover(name)
            case _:
                pass

    def _detect(self, name: ServerId, incarnation: int) -> None:
        if self.sim.incarnation[name] != incarnation or not self.coordinator.current.is_alive(name):
            return
        try:
            self.coordinator.report_fail(name)
        except NoReplacementAvailableError:
            pass

    def _recover(self, name: ServerId) -> None:
        if self.sim.is_alive(name) or name not in self.servers:
            return
        if self.coordinator.current.is_alive(name):
            self.coordinator.report_fail(name)

        log = self.servers[name].log
        self._segments[name].append(len(log))
        self.servers[name] = self._new_server(name, self.coordinator.current, log)
        self.coordinator.join(name)

    def add_server(self, name: ServerId) -> StorageServer:
        """Start a brand-new server and have the coordinator rebalance onto it."""

        server = self._new_server(name, self.coordinator.current, self._log_for(name))
        self.servers[name] = server
        self.coordinator.join(name)
        return server


# Workloads


@dataclass
class Metrics:
    issued: int = 0
    committed: int = 0
    aborted: int = 0
    attempts: int = 0
    attempt_aborts: int = 0
    retries: int = 0
    clean: int = 0
    hops: int = 0
    elapsed_us: int = 0
    latencies_us: dict[str, list[int]] = field(default_factory=dict[str, list[int]])
    commit_hops: list[int] = field(default_factory=list[int])
    abort_reasons: Counter[str] = field(default_factory=Counter[str])

    @property
    def stalled(self) -> int:
        return self.issued - self.committed - self.aborted

    @property
    def throughput(self) -> float:
        """Committed transactions per virtual second."""

        return self.committed / (self.elapsed_us / 1e6) if self.elapsed_us else 0.0

    @property
    def abort_rate(self) -> float:
        return self.attempt_aborts / self.attempts if self.attempts else 0.0

    @property
    def clean_ratio(self) -> float:
        return self.clean / self.committed if self.committed else 0.0

    def summary(self) -> dict[str, float | int]:
        return {
            "issued": self.issued,
            "committed": self.committed,
            "aborted": self.aborted,
            "stalled": self.stalled,
            "attempts": self.attempts,
            "attempt_aborts": self.attempt_aborts,
            "retries": self.retries,
            "hops": self.hops,
            "elapsed_us": self.elapsed_us,
            "throughput": round(self.throughput, 3),
            "abort_rate": round(self.abort_rate, 6),
            "clean_ratio": round(self.clean_ratio, 6),
        }


class AttemptFailed(StrEnum):
    unreachable = "unreachable"
    type_mismatch = "type_mismatch"
    timeout = "timeout"


@dataclass
class LogicalTxn:
    plan: TxnPlan
    started_us: int
    attempts: int = 0


def execute_plan(client: Client, plan: TxnPlan) -> TransactionContext:
    """Open a transaction on `client` and run the plan's reads and writes in it, ready to commit."""

    ctx = client.begin()
    for step in plan.steps:
        match step:
            case ReadStep(key=key):
                client.get(ctx, key)
            case WriteStep(key=key, op=op) | UpdateStep(key=key, op=op):
                client.put(ctx, key, op)
            case ReadModifyWriteStep(key=key, op=op):
                client.get(ctx, key)
                client.put(ctx, key, op)
    return ctx


class WorkloadDriver:
    """
    Closed loop: each client runs one logical transaction at a time, re-executing aborted ones. Elapsed
    time ends at the last transaction to finish, not at the last timer the simulator drained.
    """

    def __init__(self, cluster: SimCluster, spec: WorkloadSpec) -> None:
        self.cluster = cluster
        self.sim = cluster.sim
        self.spec = spec
        self.metrics = Metrics()
        self._plans: Iterator[TxnPlan] = spec.plans()

    def start(self) -> None:
        for client in self.cluster.clients:
            self._next(client)

    def _next(self, client: Client) -> None:
        plan = next(self._plans, None)
        if plan is None:
            return
        self.metrics.issued += 1
        self._execute(client, LogicalTxn(plan, self.sim.now_us()))

    def _execute(self, client: Client, txn: LogicalTxn) -> None:
        txn.attempts += 1
        self.metrics.attempts += 1
        try:
            ctx = execute_plan(client, txn.plan)
        except ServerUnreachableError:
            self._failed(client, txn, AttemptFailed.unreachable)
            return
        except TypeMismatchError:
            self._failed(client, txn, AttemptFailed.type_mismatch)
            return

        self.cluster.submit(client, ctx, lambda result: self._on_outcome(client, txn, result))

    def _failed(self, client: Client, txn: LogicalTxn, why: AttemptFailed) -> None:
        self.metrics.attempt_aborts += 1
        self.metrics.abort_reasons[why.value] += 1
        self._after_abort(client, txn, self.cluster.params.detect_us)

    def _on_outcome(self, client: Client, txn: LogicalTxn, result: CommitResult) -> None:
        self.metrics.retries += result.retries
        if result.outcome is Outcome.committed:
            self.metrics.committed += 1
            if txn.attempts == 1 and result.retries == 0:
                self.metrics.clean += 1
                self.metrics.commit_hops.append(self.sim.hops[result.txn_id])
            self.metrics.latencies_us.setdefault(txn.plan.profile, []).append(self.sim.now_us() - txn.started_us)
            self.metrics.elapsed_us = self.sim.now_us()
            self._next(client)
            return

        self.metrics.attempt_aborts += 1
        self.metrics.abort_reasons[(result.reason or AbortReason.validation_failed).value] += 1
        self._after_abort(client, txn, 0)

    def _after_abort(self, client: Client, txn: LogicalTxn, delay_us: int) -> None:
        if txn.attempts > self.cluster.params.reexecute_budget:
            self.metrics.aborted += 1
            self.metrics.elapsed_us = self.sim.now_us()
            self._next(client)
        elif delay_us:
            self.sim.call_later(client.name, delay_us, lambda: self._execute(client, txn))
        else:
            self._execute(client, txn)


def run_workload(
    spec: WorkloadSpec,
    params: ClusterParams,
    faults: Sequence[tuple[int, Fault]] = (),
    deadline_us: int = DEFAULT_DEADLINE_US,
) -> tuple[History, Metrics, SimCluster]:
    """
    Drive `spec` through a fresh simulated cluster until every transaction finished (or the deadline
    passed). Deterministic in (spec, params, faults).
    """

    cluster = SimCluster(params, spec.schemas)
    for at, fault in faults:
        cluster.inject(at, fault)

    driver = WorkloadDriver(cluster, spec)
    driver.start()
    cluster.sim.run(until_us=deadline_us)

    metrics = driver.metrics
    metrics.hops = cluster.sim.protocol_hops
    logger.info(
        f"{spec.name}: {metrics.committed}/{metrics.issued} committed, {metrics.aborted} aborted, "
        f"{metrics.retries} retries in {metrics.elapsed_us / 1e6:.3f}s virtual"
    )
    return cluster.history(), metrics, cluster


def crash_schedule(
    params: ClusterParams,
    count: int,
    window_us: int = 200_000,
    recover_after_us: int | None = None,
) -> list[tuple[int, Fault]]:
    """
    Crash `count` distinct servers at seeded random times within the first `window_us` of a run,
    each recovering `recover_after_us` later when given.
    """

    if not 0 <= count <= params.servers:
        raise ValueError(f"Cannot crash {count} of {params.servers} servers")
    rng = random.Random(f"crashes/{params.seed}")
    faults: list[tuple[int, Fault]] = []
    for i in sorted(rng.sample(range(params.servers), count)):
        at = rng.randrange(1, window_us + 1)
        faults.append((at, Crash(f"s{i}")))
        if recover_after_us is not None:
            faults.append((at + recover_after_us, Recover(f"s{i}")))
    return sorted(faults, key=lambda f: (f[0], repr(f[1])))


def safety_problems(history: History, cluster: Cluster) -> list[str]:
    """Server invariant violations plus a serialization cycle, if the history has one."""

    problems = cluster.check_invariants()
    match check_serializable(history):
        case Cycle(witness=witness):
            problems.append("serialization cycle " + " -> ".join(f"{t:#x}" for t in witness))
        case Ok():
            pass
    return problems


def run_bench(
    spec: WorkloadSpec,
    clients: Sequence[Client],
    reexecute_budget: int = 10,
    commit_timeout_s: float = 10.0,
) -> Metrics:
    """
    Wall-clock closed loop over clients on a live transport, one worker thread per client. Latency
    is wall time from first attempt to commit. Hop counts of clean commits are the chain's forward
    and backward passes, since no single process sees every delivery.
    """

    if not clients:
        raise ValueError("A benchmark needs at least one client")
    transport = clients[0].transport
    plans = spec.plans()
    metrics = Metrics()
    lock = threading.Lock()

    def failed(why: str) -> None:
        with lock:
            metrics.attempt_aborts += 1
            metrics.abort_reasons[why] += 1

    def run_one(client: Client, plan: TxnPlan) -> None:
        started = transport.now_us()
        for attempt in range(1, reexecute_budget + 2):
            with lock:
                metrics.attempts += 1
            try:
                ctx = execute_plan(client, plan)
                hops = 2 * len(build_chain(ctx.payload(), client.config).hops)
                result = client.commit(ctx, commit_timeout_s)
            except ServerUnreachableError:
                failed(AttemptFailed.unreachable.value)
                continue
            except TypeMismatchError:
                failed(AttemptFailed.type_mismatch.value)
                continue
            except CommitTimeoutError:
                failed(AttemptFailed.timeout.value)
                continue

            with lock:
                metrics.retries += result.retries
                if result.outcome is Outcome.committed:
                    metrics.committed += 1
                    if attempt == 1 and result.retries == 0:
                        metrics.clean += 1
                        metrics.commit_hops.append(hops)
                    metrics.latencies_us.setdefault(plan.profile, []).append(transport.now_us() - started)
                    return
                metrics.attempt_aborts += 1
                metrics.abort_reasons[(result.reason or AbortReason.validation_failed).value] += 1

        with lock:
            metrics.aborted += 1

    def worker(client: Client) -> None:
        while True:
            with lock:
                plan = next(plans, None)
                if plan is None:
                    return
                metrics.issued += 1
            run_one(client, plan)

    began = transport.now_us()
    threads = [threading.Thread(target=worker, args=(c,), name=f"bench-{c.name}") for c in clients]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    metrics.elapsed_us = transport.now_us() - began

    logger.info(f"{spec.name}: {metrics.committed}/{metrics.issued} committed in {metrics.elapsed_us / 1e6:.3f}s")
    return metrics


# The baseline on its own


def minitxn_commit(cluster: SimCluster, payloads: Sequence[TransactionPayload]) -> list[CommitResult]:
    """Run the payloads concurrently through the mini-transaction baseline, one client each."""

    results: dict[TxnId, CommitResult] = {}
    for i, payload in enumerate(payloads):
        client = cluster.clients[i % len(cluster.clients)]

        def on_outcome(outcome: Outcome, reason: AbortReason | None, txn: TxnId = payload.txn_id) -> None:
            results[txn] = CommitResult(txn, outcome, reason)

        client.mini.start(payload, cluster.coordinator.current, on_outcome)

    cluster.sim.run_until(lambda: len(results) == len(payloads), DEFAULT_DEADLINE_US)
    for payload in payloads:
        if payload.txn_id in results:
            cluster.record(payload, results[payload.txn_id])
    return [results[p.txn_id] for p in payloads if p.txn_id in results]


# Scripted scenarios and interleaving search


@dataclass(eq=True, frozen=True)
class Scenario:
    name: str
    config: Configuration
    payloads: tuple[TransactionPayload, ...]


def _pair_payload(client: int, keys: Sequence[bytes], reads: Sequence[bytes] = ()) -> TransactionPayload:
    txn = make_txn_id(client, 1)
    return TransactionPayload(
        txn,
        tuple(ReadRecord(SchemaKey(DEFAULT_SCHEMA, k), 0) for k in reads),
        tuple(WriteRecord(SchemaKey(DEFAULT_SCHEMA, k), overwrite(client)) for k in keys),
    )


def triangle_scenario() -> Scenario:
    """Three transactions on key pairs (A,B), (B,C), (C,A), each key on its own server."""

    config = from_ranges([(b"A", ["s0"]), (b"B", ["s1"]), (b"C", ["s2"])])
    return Scenario(
        "triangle", config, (_pair_payload(1, [b"A", b"B"]), _pair_payload(2, [b"B", b"C"]), _pair_payload(3, [b"C", b"A"]))
    )


def overlap_scenario() -> Scenario:
    """The nine-server mapping with T1 (reads H, writes A), T2 (reads P and T) and T3 (writes A, H, P, T)."""

    bounds = [b"A", b"D", b"G", b"J", b"M", b"P", b"S", b"V", b"Y"]
    config = from_ranges([(b, [f"s{i}"]) for i, b in enumerate(bounds)])
    return Scenario(
        "overlap",
        config,
        (
            _pair_payload(1, [b"A"], reads=[b"H"]),
            _pair_payload(2, [], reads=[b"P", b"T"]),
            _pair_payload(3, [b"A", b"H", b"P", b"T"]),
        ),
    )


class ScenarioRun(Cluster):
    """One execution of a scenario on a ControlledNetwork; every delivery is chosen from outside."""

    def __init__(self, scenario: Scenario, order_check: bool = True) -> None:
        self.network = ControlledNetwork({f"c{i}" for i in range(len(scenario.payloads))})
        params = ClusterParams(
            servers=len(scenario.config.servers),
            f=scenario.config.f,
            clients=len(scenario.payloads),
            order_check=order_check,
        )
        super().__init__(self.network, scenario.config, params)
        self.results: dict[TxnId, CommitResult] = {}
        for client, payload in zip(self.clients, scenario.payloads):
            self.submit(client, context_for(payload), self._done)

    def _done(self, result: CommitResult) -> None:
        self.results[result.txn_id] = result

    def enabled(self) -> list[Link]:
        return self.network.enabled()

    def deliver(self, link: Link) -> None:
        self.network.deliver(link)

    def verdict(self) -> str | None:
        """None if the run is serializable and every server invariant holds, else what went wrong."""

        problems = safety_problems(self.history(), self)
        return "; ".join(problems) if problems else None


@dataclass(eq=True, frozen=True)
class Violation:
    scenario: str
    trace: tuple[Link, ...]
    reason: str


@dataclass(eq=True, frozen=True)
class SearchResult:
    schedules: int
    outcome: Ok | Violation
    all_committed: int = 0
    exhausted: bool = False


class SearchMode(StrEnum):
    dfs = "dfs"
    random = "random"


def run_schedule(scenario: Scenario, trace: Sequence[Link], order_check: bool = True) -> ScenarioRun:
    """Replay a delivery trace; links in `trace` that are not enabled at their turn are skipped."""

    run = ScenarioRun(scenario, order_check)
    for link in trace:
        if link in run.enabled():
            run.deliver(link)
    return run


def interleaving_search(
    scenario: Scenario,
    bound: int = 10_000,
    mode: SearchMode = SearchMode.dfs,
    seed: int = 0,
    order_check: bool = True,
) -> SearchResult:
    """
    Enumerate delivery orders of the scenario (depth-first, or `bound` random walks) and check each
    completed execution. Stops at the first violation; its trace replays with `run_schedule`. A clean
    result is `exhausted` only when depth-first search ran out of schedules before reaching `bound`.
    """

    schedules = 0
    all_committed = 0

    def finish(run: ScenarioRun, trace: tuple[Link, ...]) -> Violation | None:
        nonlocal schedules, all_committed
        schedules += 1
        if len(run.results) == len(scenario.payloads) and all(
            r.outcome is Outcome.committed for r in run.results.values()
        ):
            all_committed += 1
        if len(run.results) < len(scenario.payloads):
            missing = [f"{p.txn_id:#x}" for p in scenario.payloads if p.txn_id not in run.results]
            return Violation(scenario.name, trace, f"stalled with no message in flight: {', '.join(missing)}")
        reason = run.verdict()
        return Violation(scenario.name, trace, reason) if reason is not None else None

    if mode is SearchMode.random:
        rng = random.Random(seed)
        for _ in range(bound):
            run = ScenarioRun(scenario, order_check)
            trace: list[Link] = []
            while enabled := run.enabled():
                link = rng.choice(enabled)
                trace.append(link)
                run.deliver(link)
            if (violation := finish(run, tuple(trace))) is not None:
                return SearchResult(schedules, violation, all_committed)
        return SearchResult(schedules, Ok(), all_committed)

    stack: list[tuple[Link, ...]] = [()]
    while stack and schedules < bound:
        prefix = stack.pop()
        run = run_schedule(scenario, prefix, order_check)
        enabled = run.enabled()
        if not enabled:
            if (violation := finish(run, prefix)) is not None:
                return SearchResult(schedules, violation, all_committed)
            continue
        stack.extend(prefix + (link,) for link in reversed(enabled))

    exhausted = not stack
    logger.info(
        f"{scenario.name}: {schedules} schedules explored, {all_committed} with every transaction committed"
        + ("" if exhausted else f", stopped at the bound of {bound}")
    )
    return SearchResult(schedules, Ok(), all_committed, exhausted)
