from dataclasses import replace
from pathlib import Path

import pytest

from src.applylog import ApplyLog
from src.core import MediatorToken, ReadRecord, SchemaKey, TokenCounter, TransactionPayload, TxnId, WriteRecord
from src.mapping import Configuration, VirtualServerId, build_chain, from_ranges
from src.messages import (
    AbortBackward,
    AbortReason,
    ClientReply,
    CommitBackward,
    Forward,
    Outcome,
    Read,
    ReadReply,
    RetryBackward,
    StatusQuery,
    StatusReply,
    TxnStatus,
    WrongServer,
)
from src.server import (
    Invalid,
    InvalidReason,
    Outbound,
    SourceUnavailableError,
    StorageServer,
    Valid,
    VirtualServer,
    WrongServerError,
)
from src.state import KeyState, Phase, ServerTxnRecord
from src.transport import ControlledNetwork
from src.values import add, overwrite

A, B, N = SchemaKey("default", b"A"), SchemaKey("default", b"B"), SchemaKey("default", b"N")
T1, T2, T3 = TxnId(1), TxnId(2), TxnId(3)


@pytest.fixture
def config() -> Configuration:
    """s0 holds keys below M, s1 the rest."""

    return from_ranges([(b"", ["s0"]), (b"M", ["s1"])])


def vserver(name: str, partition: int, config: Configuration, retry_budget: int = 50) -> VirtualServer:
    return VirtualServer(name, partition, config, TokenCounter(name), ApplyLog(), retry_budget)


def payload(txn: TxnId, writes: dict[SchemaKey, int], reads: dict[SchemaKey, int] | None = None) -> TransactionPayload:
    return TransactionPayload(
        txn,
        tuple(ReadRecord(k, v) for k, v in (reads or {}).items()),
        tuple(WriteRecord(k, overwrite(v)) for k, v in writes.items()),
    )


def from_client(p: TransactionPayload, config: Configuration) -> Forward:
    chain = build_chain(p, config)
    return Forward(chain.head.vs, p, chain, None, "c")


def test_single_hop_commit(config: Configuration):
    s0 = vserver("s0", 0, config)
    p = payload(T1, {A: 7})
    out = s0.handle_forward(from_client(p, config), "c")

    token = MediatorToken(0, "s0", T1)
    assert out == [Outbound("c", ClientReply(T1, Outcome.committed, None, 0, token))]
    assert s0.local_read(A) == (7, 1)
    assert [(e.txn_id, e.version, e.token) for e in s0.log.entries] == [(T1, 1, token)]

    # a replayed request gets the same answer and applies nothing
    assert s0.handle_forward(from_client(p, config), "c") == out
    assert len(s0.log) == 1


def test_two_hop_commit(config: Configuration):
    s0, s1 = vserver("s0", 0, config), vserver("s1", 1, config)
    p = payload(T1, {A: 1, N: 2})
    chain = build_chain(p, config)
    token = MediatorToken(0, "s0", T1)

    out = s0.handle_forward(from_client(p, config), "c")
    assert out == [Outbound("s1", Forward(VirtualServerId(1, 0), p, chain, token, "c"))]
    assert s0.local_read(A) == (None, 0)

    out = s1.handle_forward(out[0].message, "s0")  # pyright: ignore[reportArgumentType]
    assert out == [Outbound("s0", CommitBackward(VirtualServerId(0, 0), T1, chain, token, "c"))]
    assert s1.local_read(N) == (2, 1)

    out = s0.handle_commit(out[0].message)  # pyright: ignore[reportArgumentType]
    assert out == [Outbound("c", ClientReply(T1, Outcome.committed, None, 0, token))]
    assert s0.local_read(A) == (1, 1)


def test_stale_read_aborts(config: Configuration):
    s0 = vserver("s0", 0, config)
    (out,) = s0.handle_forward(from_client(payload(T1, {}, reads={A: 3}), config), "c")
    assert isinstance(out.message, ClientReply)
    assert (out.message.outcome, out.message.reason) == (Outcome.aborted, AbortReason.validation_failed)


def test_type_mismatch_aborts(config: Configuration):
    s0 = vserver("s0", 0, config)
    s0.keys[A] = KeyState(b"text", 1)
    p = TransactionPayload(T1, (), (WriteRecord(A, add(1)),))
    (out,) = s0.handle_forward(from_client(p, config), "c")
    assert isinstance(out.message, ClientReply)
    assert out.message.reason is AbortReason.type_mismatch
    assert s0.local_read(A) == (b"text", 1)


def test_read_of_prepared_write_aborts(config: Configuration):
    s0 = vserver("s0", 0, config)
    s0.handle_forward(from_client(payload(T1, {A: 1, N: 1}), config), "c")

    (out,) = s0.handle_forward(from_client(payload(T2, {B: 1}, reads={A: 0}), config), "c")
    assert isinstance(out.message, ClientReply)
    assert out.message.outcome is Outcome.aborted


def test_concurrent_writers_apply_in_token_order(config: Configuration):
    s0, s1 = vserver("s0", 0, config), vserver("s1", 1, config)
    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1, N: 1}), config), "c")

    (reply,) = s0.handle_forward(from_client(payload(T2, {A: 2}), config), "c")
    assert isinstance(reply.message, ClientReply)
    assert reply.message.outcome is Outcome.committed
    assert s0.local_read(A) == (None, 0)

    (commit,) = s1.handle_forward(to_s1.message, "s0")  # pyright: ignore[reportArgumentType]
    s0.handle_commit(commit.message)  # pyright: ignore[reportArgumentType]
    assert [e.txn_id for e in s0.log.entries] == [T1, T2]
    assert s0.local_read(A) == (2, 2)


def test_order_check_retries_with_larger_token(config: Configuration):
    s0, s1 = vserver("s0", 0, config), vserver("s1", 1, config)
    s1.handle_forward(from_client(payload(T2, {N: 5}), config), "c")
    newer = MediatorToken(0, "s1", T2)
    assert s1.keys[N].max_seen == newer

    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1, N: 1}), config), "c")
    (retry,) = s1.handle_forward(to_s1.message, "s0")  # pyright: ignore[reportArgumentType]
    assert isinstance(retry.message, RetryBackward)
    assert retry.dst == "s0"
    assert retry.message.floor == newer

    (again,) = s0.handle_retry(retry.message)
    assert isinstance(again.message, Forward)
    assert again.message.token is not None
    assert again.message.token > newer
    assert again.message.retries == 1

    (commit,) = s1.handle_forward(again.message, "s0")
    assert isinstance(commit.message, CommitBackward)
    assert [e.txn_id for e in s1.log.entries] == [T2, T1]


def test_retry_budget(config: Configuration):
    s0, s1 = vserver("s0", 0, config, retry_budget=0), vserver("s1", 1, config)
    s1.handle_forward(from_client(payload(T2, {N: 5}), config), "c")
    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1, N: 1}), config), "c")
    (retry,) = s1.handle_forward(to_s1.message, "s0")  # pyright: ignore[reportArgumentType]

    (out,) = s0.handle_retry(retry.message)  # pyright: ignore[reportArgumentType]
    assert isinstance(out.message, ClientReply)
    assert (out.message.outcome, out.message.reason) == (Outcome.aborted, AbortReason.retry_budget)
    assert T1 not in s0.records


def test_local_read_outside_partition(config: Configuration):
    s0 = vserver("s0", 0, config)
    with pytest.raises(WrongServerError):
        s0.local_read(N)


def test_storage_server_serves_reads_and_status(config: Configuration):
    net = ControlledNetwork(clients={"c"})
    server = StorageServer("s0", net, config)
    net.register("s0", server)

    assert server.serve(Read(VirtualServerId(0, 0), A)) == ReadReply(A, None, 0)
    assert server.serve(Read(VirtualServerId(1, 0), N)) == WrongServer(config.version)
    assert server.serve(StatusQuery(T1)) == StatusReply(T1, TxnStatus.unknown)


def record(p: TransactionPayload, config: Configuration, counter: int) -> ServerTxnRecord:
    return ServerTxnRecord(
        p.txn_id, p, p.reads, p.writes, MediatorToken(counter, "s0", p.txn_id), build_chain(p, config), "c"
    )


@pytest.mark.parametrize(
    ("prepared", "incoming", "expected"),
    [
        (payload(T1, {A: 1, N: 1}), payload(T2, {}, reads={A: 0}), Invalid(InvalidReason.reads_prepared_write)),
        (payload(T1, {N: 1}, reads={A: 0}), payload(T2, {A: 2}), Invalid(InvalidReason.writes_prepared_read)),
        (payload(T1, {A: 1, N: 1}), payload(T2, {A: 2}), Valid()),
        (payload(T1, {N: 1}, reads={A: 0}), payload(T2, {}, reads={A: 0}), Valid()),
    ],
)
def test_validation_against_prepared(
    config: Configuration, prepared: TransactionPayload, incoming: TransactionPayload, expected: Valid | Invalid
):
    s0 = vserver("s0", 0, config)
    s0.handle_forward(from_client(prepared, config), "c")
    assert s0.records[T1].phase is Phase.prepared
    assert s0.validate(record(incoming, config, 5)) == expected


def test_abort_propagates_back_to_the_head(config: Configuration):
    s0, s1 = vserver("s0", 0, config), vserver("s1", 1, config)
    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1}, reads={N: 3}), config), "c")
    assert isinstance(to_s1.message, Forward)
    token = to_s1.message.token

    (abort,) = s1.handle_forward(to_s1.message, "s0")
    assert abort.dst == "s0"
    assert isinstance(abort.message, AbortBackward)
    assert abort.message.reason is AbortReason.validation_failed
    assert T1 not in s1.records

    (reply,) = s0.handle_abort(abort.message)
    assert reply == Outbound("c", ClientReply(T1, Outcome.aborted, AbortReason.validation_failed, 0, token))
    assert T1 not in s0.records
    assert s0.local_read(A) == (None, 0)

    # a duplicate abort gets the same answer
    assert s0.handle_abort(abort.message) == [reply]


def test_replayed_commit_applies_once(config: Configuration):
    s0, s1 = vserver("s0", 0, config), vserver("s1", 1, config)
    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1, N: 2}), config), "c")
    assert isinstance(to_s1.message, Forward)
    (commit,) = s1.handle_forward(to_s1.message, "s0")
    assert isinstance(commit.message, CommitBackward)

    first = s0.handle_commit(commit.message)
    assert s0.handle_commit(commit.message) == first
    assert len(s0.log) == 1
    assert s0.local_read(A) == (1, 1)


def test_max_seen_never_goes_backwards(config: Configuration):
    s1 = vserver("s1", 1, config)

    def forward(txn: TxnId, value: int, token: MediatorToken) -> list[Outbound]:
        p = payload(txn, {A: value, N: value})
        return s1.handle_forward(Forward(VirtualServerId(1, 0), p, build_chain(p, config), token, "c"), "s0")

    big = MediatorToken(5, "s0", T2)
    forward(T2, 1, big)
    assert s1.keys[N].max_seen == big

    (retry,) = forward(T1, 2, MediatorToken(1, "s0", T1))
    assert isinstance(retry.message, RetryBackward)
    assert retry.message.floor == big
    assert s1.keys[N].max_seen == big

    bigger = MediatorToken(6, "s0", T1)
    (commit,) = forward(T1, 2, bigger)
    assert isinstance(commit.message, CommitBackward)
    assert s1.keys[N].max_seen == bigger
    assert s1.local_read(N) == (2, 2)


def test_blocked_reader_validates_once_writer_aborts(config: Configuration):
    s0 = vserver("s0", 0, config)
    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1, N: 1}), config), "c")
    assert isinstance(to_s1.message, Forward)

    (blocked,) = s0.handle_forward(from_client(payload(T2, {B: 1}, reads={A: 0}), config), "c")
    assert isinstance(blocked.message, ClientReply)
    assert blocked.message.outcome is Outcome.aborted

    token = to_s1.message.token
    abort = AbortBackward(VirtualServerId(0, 0), T1, to_s1.message.chain, token, "c", AbortReason.validation_failed)
    s0.handle_abort(abort)

    (reply,) = s0.handle_forward(from_client(payload(T3, {B: 1}, reads={A: 0}), config), "c")
    assert isinstance(reply.message, ClientReply)
    assert reply.message.outcome is Outcome.committed
    assert s0.local_read(B) == (1, 1)


def test_forward_from_another_configuration_is_refused(config: Configuration):
    s0 = vserver("s0", 0, config)
    msg = from_client(payload(T1, {A: 7}), config)
    stale = replace(msg, chain=replace(msg.chain, config_version=7))

    assert s0.handle_forward(stale, "c") == [Outbound("c", WrongServer(config.version, T1))]
    assert s0.handle_forward(replace(stale, token=MediatorToken(3, "s1", T1)), "s1") == []
    assert (s0.records, s0.completions, len(s0.log)) == ({}, {}, 0)
    assert s0.local_read(A) == (None, 0)


def test_backward_messages_from_another_configuration_are_dropped(config: Configuration):
    s0, s1 = vserver("s0", 0, config), vserver("s1", 1, config)
    (to_s1,) = s0.handle_forward(from_client(payload(T1, {A: 1, N: 2}), config), "c")
    assert isinstance(to_s1.message, Forward)
    (commit,) = s1.handle_forward(to_s1.message, "s0")
    assert isinstance(commit.message, CommitBackward)

    token = commit.message.token
    stale = replace(commit.message.chain, config_version=7)
    vs = VirtualServerId(0, 0)
    assert s0.handle_commit(replace(commit.message, chain=stale)) == []
    assert s0.handle_abort(AbortBackward(vs, T1, stale, token, "c", AbortReason.validation_failed)) == []
    assert s0.handle_retry(RetryBackward(vs, T1, stale, token, "c", token)) == []
    assert s0.records[T1].phase is Phase.prepared

    assert s0.handle_commit(commit.message) == [Outbound("c", ClientReply(T1, Outcome.committed, None, 0, token))]
    assert s0.local_read(A) == (1, 1)


def test_retransmit_follows_configuration_changes(config: Configuration):
    s0 = vserver("s0", 0, config)
    p = payload(T1, {A: 1, N: 1})
    token = MediatorToken(0, "s0", T1)
    s0.handle_forward(from_client(p, config), "c")
    assert s0.handle_retransmit() == []

    moved = from_ranges([(b"", ["s0"]), (b"M", ["s2"])], version=2)
    s0.config = moved
    chain = build_chain(p, moved)
    assert s0.handle_retransmit() == [Outbound("s2", Forward(VirtualServerId(1, 0), p, chain, token, "c"))]
    assert s0.records[T1].chain == chain
    assert s0.handle_retransmit() == []

    # same layout under a new version: the next hop drops the old Forward, so it is sent again
    s0.config = from_ranges([(b"", ["s0"]), (b"M", ["s2"])], version=3)
    (out,) = s0.handle_retransmit()
    assert out.dst == "s2"
    assert isinstance(out.message, Forward)
    assert out.message.chain.config_version == 3


def test_recover_replica_takes_over_state(config: Configuration):
    source = vserver("s0", 0, config)
    source.handle_forward(from_client(payload(T1, {A: 7}), config), "c")
    source.handle_forward(from_client(payload(T2, {A: 8, N: 8}), config), "c")

    recruit = VirtualServer("s0", 0, config, TokenCounter("s0"), ApplyLog(), ready=False)
    with pytest.raises(WrongServerError):
        recruit.local_read(A)
    with pytest.raises(SourceUnavailableError):
        recruit.recover_replica(None)

    recruit.recover_replica(source.snapshot())
    assert recruit.ready
    assert recruit.local_read(A) == (7, 1)
    assert set(recruit.records) == {T2}
    assert recruit.completions[T1].outcome is Outcome.committed

    # the recovered prepared write still blocks readers, and new tokens sort after recovered ones
    (out,) = recruit.handle_forward(from_client(payload(T3, {}, reads={A: 1}), config), "c")
    assert isinstance(out.message, ClientReply)
    assert out.message.outcome is Outcome.aborted
    assert recruit.counter.generate(TxnId(4)) > source.records[T2].token


def test_restart_rebuilds_state_from_apply_log(config: Configuration, tmp_path: Path):
    path = tmp_path / "s0.log"
    net = ControlledNetwork(clients={"c"})
    log = ApplyLog(path)
    server = StorageServer("s0", net, config, log)
    p = payload(T1, {A: 7})
    (reply,) = server.vservers[0].handle_forward(from_client(p, config), "c")
    log.sync()
    log.close()

    restarted = StorageServer("s0", net, config, ApplyLog(path))
    assert restarted.serve(Read(VirtualServerId(0, 0), A)) == ReadReply(A, 7, 1)
    assert restarted.status(T1) is TxnStatus.committed

    # a replayed request is answered, not applied a second time
    assert restarted.vservers[0].handle_forward(from_client(p, config), "c") == [reply]
    assert len(restarted.log) == 1
