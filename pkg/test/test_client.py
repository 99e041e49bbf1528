import pytest

from src.client import (
    CommitResult,
    CommitTimeoutError,
    NestedOutcome,
    ParentBusyError,
    TransactionContext,
    TxnNotOpenError,
    TxnState,
    begin_nested,
    commit_nested,
    txn_get,
    txn_put,
)
from src.core import ReadRecord, SchemaKey, TxnId, WriteRecord
from src.harness import ClusterParams, SimCluster
from src.messages import Envelope, Forward, Outcome
from src.values import Value, add, list_append, overwrite

A, B = SchemaKey("default", b"A"), SchemaKey("default", b"B")


class Store:
    def __init__(self, data: dict[SchemaKey, tuple[Value, int]]) -> None:
        self.data = data
        self.fetched: list[SchemaKey] = []

    def __call__(self, key: SchemaKey) -> tuple[Value, int]:
        self.fetched.append(key)
        return self.data.get(key, (None, 0))


def test_reads_see_own_buffered_writes():
    store = Store({A: (10, 3)})
    ctx = TransactionContext(TxnId(1))
    txn_put(ctx, A, add(5))
    assert txn_get(ctx, A, store) == 15
    assert txn_get(ctx, A, store) == 15
    assert store.fetched == [A]

    payload = ctx.payload()
    assert payload.reads == (ReadRecord(A, 3),)
    assert payload.writes == (WriteRecord(A, add(5)),)


def test_overwrite_needs_no_fetch():
    store = Store({})
    ctx = TransactionContext(TxnId(1))
    txn_put(ctx, A, overwrite((1,)))
    txn_put(ctx, A, list_append(2))
    assert txn_get(ctx, A, store) == (1, 2)
    assert store.fetched == []
    assert ctx.payload().reads == ()


def test_nested_merge():
    store = Store({A: (1, 1), B: (2, 1)})
    root = TransactionContext(TxnId(1))
    assert txn_get(root, A, store) == 1

    child = begin_nested(root)
    assert txn_get(child, A, store) == 1
    assert txn_get(child, B, store) == 2
    txn_put(child, B, add(1))
    assert store.fetched == [A, B]

    assert commit_nested(child) is NestedOutcome.merged
    assert child.state is TxnState.committed
    assert txn_get(root, B, store) == 3
    assert {r.key for r in root.payload().reads} == {A, B}


def test_nested_abort_discards_child():
    store = Store({A: (1, 1)})
    root = TransactionContext(TxnId(1))
    child = begin_nested(root)
    assert txn_get(child, A, store) == 1
    txn_put(child, B, overwrite(9))

    # a parent write from another thread that got past the busy check before the child began
    root.write_buffer[A] = add(1)
    root.write_stamps[A] = root.tick()

    assert commit_nested(child) is NestedOutcome.nested_abort
    assert root.child is None
    assert B not in root.write_buffer
    with pytest.raises(TxnNotOpenError):
        txn_get(child, A, store)


def test_parent_busy():
    root = TransactionContext(TxnId(1))
    child = begin_nested(root)
    with pytest.raises(ParentBusyError):
        begin_nested(root)
    with pytest.raises(ParentBusyError):
        root.require_idle()
    commit_nested(child)
    begin_nested(root)


def test_parent_waits_for_open_child():
    store = Store({A: (1, 1)})
    root = TransactionContext(TxnId(1))
    child = begin_nested(root)
    with pytest.raises(ParentBusyError):
        txn_put(root, A, add(1))
    with pytest.raises(ParentBusyError):
        txn_get(root, A, store)
    assert root.write_buffer == {}
    assert store.fetched == []

    txn_put(child, A, add(1))
    assert commit_nested(child) is NestedOutcome.merged
    assert txn_get(root, A, store) == 2


@pytest.fixture
def cluster() -> SimCluster:
    return SimCluster(ClusterParams(servers=3, f=1, partitions=4, clients=2, seed=5))


def test_commit_through_cluster(cluster: SimCluster):
    client = cluster.clients[0]
    results: list[CommitResult] = []

    ctx = client.begin()
    client.put(ctx, A, overwrite(b"v"))
    client.put(ctx, B, add(2))
    cluster.submit(client, ctx, results.append)
    cluster.sim.run()

    assert results == [CommitResult(ctx.txn_id, Outcome.committed)]
    assert ctx.state is TxnState.committed
    assert cluster.clients[1].read(A) == b"v"
    assert cluster.clients[1].read(B) == 2
    with pytest.raises(TxnNotOpenError):
        client.put(ctx, A, overwrite(b"w"))


def test_empty_transaction_commits_locally(cluster: SimCluster):
    client = cluster.clients[0]
    results: list[CommitResult] = []
    ctx = client.begin()
    client.submit(ctx, results.append)
    assert results == [CommitResult(ctx.txn_id, Outcome.committed)]
    assert cluster.sim.idle


def test_transaction_ids_are_unique(cluster: SimCluster):
    ids = {c.begin().txn_id for c in cluster.clients for _ in range(10)}
    assert len(ids) == 20


def test_handle_refuses_parent_while_child_is_open(cluster: SimCluster):
    client = cluster.clients[0]
    root = client.begin()
    child = client.begin_nested(root)
    with pytest.raises(ParentBusyError):
        client.put(root, A, overwrite(1))
    with pytest.raises(ParentBusyError):
        client.get(root, A)
    with pytest.raises(ParentBusyError):
        client.abort(root)

    client.abort(child)
    client.put(root, A, overwrite(1))


def test_write_passthrough_is_a_one_op_transaction(cluster: SimCluster):
    client = cluster.clients[0]
    results: list[CommitResult] = []

    ctx = client.write(A, add(3), results.append)
    assert ctx.payload().reads == ()
    assert ctx.payload().writes == (WriteRecord(A, add(3)),)

    explicit = client.begin()
    client.put(explicit, B, add(3))
    client.submit(explicit, results.append)
    cluster.sim.run()

    assert sorted(results, key=lambda r: r.txn_id) == [
        CommitResult(ctx.txn_id, Outcome.committed),
        CommitResult(explicit.txn_id, Outcome.committed),
    ]
    assert client.read(A) == client.read(B) == 3
    assert cluster.coordinator.current.version == 1


def test_blocking_commit_timeout_stops_resending(cluster: SimCluster):
    client = cluster.clients[0]
    forwards: list[Envelope] = []

    def observe(env: Envelope) -> None:
        if env.src == client.name and isinstance(env.body, Forward):
            forwards.append(env)

    cluster.sim.send_observers.append(observe)
    ctx = client.begin()
    client.put(ctx, A, overwrite(1))

    # nothing runs the simulator while commit blocks, so the outcome cannot arrive in time
    with pytest.raises(CommitTimeoutError):
        client.commit(ctx, timeout=0.01)
    assert ctx.txn_id not in client.pending

    cluster.sim.run()
    assert len(forwards) == 1
    assert ctx.state is TxnState.committing
    assert cluster.clients[1].read(A) == 1
