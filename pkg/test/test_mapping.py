import pytest

from src.core import ReadRecord, SchemaKey, TransactionPayload, TxnId, WriteRecord
from src.mapping import (
    CLIENT,
    Direction,
    DuplicateServerError,
    NoReplacementAvailableError,
    ServerFail,
    ServerJoin,
    TailHasNoForwardError,
    UnknownServerError,
    VirtualServerId,
    apply_membership_event,
    build_chain,
    default_configuration,
    from_ranges,
    next_hop,
    partition_of,
)
from src.values import overwrite


def k(name: str) -> SchemaKey:
    return SchemaKey("default", name.encode())


def writes(*names: str | bytes) -> TransactionPayload:
    keys = [SchemaKey("default", n) if isinstance(n, bytes) else k(n) for n in names]
    return TransactionPayload(TxnId(1), (), tuple(WriteRecord(key, overwrite(1)) for key in keys))


@pytest.fixture
def abc():
    """s0 owns keys below D, s1 owns D..G, s2 owns the rest."""

    return from_ranges([(b"", ["s0"]), (b"D", ["s1"]), (b"G", ["s2"])])


@pytest.mark.parametrize(("key", "partition"), [("A", 0), ("C", 0), ("D", 1), ("F", 1), ("G", 2), ("Z", 2)])
def test_partition_of(abc, key: str, partition: int):
    assert partition_of(k(key), abc) == partition


def test_chain_follows_footprint_order(abc):
    chain = build_chain(writes("Z", "A", "E"), abc)
    assert [h.server for h in chain.hops] == ["s0", "s1", "s2"]
    assert chain.head.server == "s0"
    assert chain.tail.server == "s2"


def test_chain_visits_each_partition_once(abc):
    reads = (ReadRecord(k("A"), 0), ReadRecord(k("B"), 0))
    payload = TransactionPayload(TxnId(1), reads, (WriteRecord(k("C"), overwrite(1)),))
    assert len(build_chain(payload, abc)) == 1


@pytest.mark.parametrize("f", [0, 1, 2])
def test_chain_inlines_every_replica(f: int):
    config = default_configuration([f"s{i}" for i in range(5)], f=f, partitions=16)
    chain = build_chain(writes(b"\x00", b"\x40", b"\x80", b"\xc0"), config)
    assert len(chain) == 4 * (f + 1)
    for i in range(0, len(chain), f + 1):
        subchain = chain.hops[i : i + f + 1]
        assert [h.vs.replica_slot for h in subchain] == list(range(f + 1))
        assert len({h.vs.partition_index for h in subchain}) == 1


def test_next_hop(abc):
    chain = build_chain(writes("A", "E", "Z"), abc)
    head, middle, tail = chain.hops
    assert next_hop(chain, head.vs, Direction.forward) == middle
    assert next_hop(chain, middle.vs, Direction.backward) == head
    assert next_hop(chain, head.vs, Direction.backward) is CLIENT
    with pytest.raises(TailHasNoForwardError):
        next_hop(chain, tail.vs, Direction.forward)


def test_default_configuration_round_robin():
    config = default_configuration(["s0", "s1", "s2"], f=1, partitions=6)
    assert [p.replicas for p in config.partitions[:4]] == [("s0", "s1"), ("s1", "s2"), ("s2", "s0"), ("s0", "s1")]
    assert config.load() == {"s0": 4, "s1": 4, "s2": 4}


def test_default_configuration_needs_enough_servers():
    with pytest.raises(NoReplacementAvailableError):
        default_configuration(["s0"], f=1)


def test_fail_replaces_failed_replica_at_tail():
    config = default_configuration(["s0", "s1", "s2", "s3"], f=1, partitions=4)
    after = apply_membership_event(config, ServerFail("s1"))
    assert after.version == config.version + 1
    assert not after.is_alive("s1")
    for before, now in zip(config.partitions, after.partitions, strict=True):
        assert "s1" not in now.replicas
        if "s1" in before.replicas:
            survivor = next(r for r in before.replicas if r != "s1")
            assert now.replicas[0] == survivor
        else:
            assert now == before


def test_fail_without_replacement():
    config = default_configuration(["s0", "s1"], f=1, partitions=2)
    with pytest.raises(NoReplacementAvailableError):
        apply_membership_event(config, ServerFail("s0"))


def test_fail_unknown_server():
    config = default_configuration(["s0", "s1"], f=0, partitions=2)
    with pytest.raises(UnknownServerError):
        apply_membership_event(config, ServerFail("s9"))


def test_join_takes_load():
    config = default_configuration(["s0", "s1", "s2"], f=1, partitions=6)
    after = apply_membership_event(config, ServerJoin("s3"))
    load = after.load()
    assert load["s3"] == 2
    assert sum(load.values()) == 12
    for before, now in zip(config.partitions, after.partitions, strict=True):
        assert len(set(now.replicas)) == 2
        assert set(before.replicas) & set(now.replicas)


def test_join_with_single_replicas_moves_nothing():
    config = default_configuration(["s0", "s1"], f=0, partitions=8)
    after = apply_membership_event(config, ServerJoin("s2"))
    assert after.version == config.version + 1
    assert after.is_alive("s2")
    assert after.load()["s2"] == 0
    for before, now in zip(config.partitions, after.partitions, strict=True):
        assert set(before.replicas) & set(now.replicas)


def test_join_live_server():
    config = default_configuration(["s0", "s1"], f=0, partitions=2)
    with pytest.raises(DuplicateServerError):
        apply_membership_event(config, ServerJoin("s0"))


def test_vs_repr():
    assert repr(VirtualServerId(3, 1)) == "p3.1"
