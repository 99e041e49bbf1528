from collections.abc import Sequence
from pathlib import Path

import pytest

from src.core import SchemaKey, TxnId
from src.history import (
    Cycle,
    Dependency,
    History,
    HistoryRecord,
    MalformedHistoryError,
    Ok,
    check_serializable,
    serialization_graph,
)
from src.messages import Outcome

A, B, C = (SchemaKey("default", k) for k in (b"A", b"B", b"C"))

type Versions = Sequence[tuple[SchemaKey, int]]


def committed(txn: int, reads: Versions = (), writes: Versions = ()) -> HistoryRecord:
    return HistoryRecord(TxnId(txn), tuple(reads), tuple(writes), Outcome.committed)


def cyclic_history() -> History:
    """Each of three transactions overwrote a pair of keys; every pair was applied in a different order."""

    return History(
        [
            committed(1, writes=[(A, 1), (B, 2)]),
            committed(2, writes=[(B, 1), (C, 2)]),
            committed(3, writes=[(C, 1), (A, 2)]),
        ]
    )


def test_write_cycle_is_found():
    assert check_serializable(cyclic_history()) == Cycle((TxnId(1), TxnId(3), TxnId(2)))


def test_serial_history_is_ok():
    history = History(
        [
            committed(1, writes=[(A, 1), (B, 1)]),
            committed(2, reads=[(A, 1)], writes=[(B, 2), (C, 1)]),
            committed(3, reads=[(C, 1), (B, 2)], writes=[(A, 2)]),
        ]
    )
    assert check_serializable(history) == Ok()


def test_edge_kinds():
    history = History(
        [
            committed(1, writes=[(A, 1)]),
            committed(2, reads=[(A, 1)]),
            committed(3, writes=[(A, 2)]),
        ]
    )
    graph = serialization_graph(history)
    assert graph.labels(TxnId(1), TxnId(2)) == {Dependency.wr}
    assert graph.labels(TxnId(1), TxnId(3)) == {Dependency.ww}
    assert graph.labels(TxnId(2), TxnId(3)) == {Dependency.rw}
    assert graph.number_of_edges() == 3


def test_write_skew_is_a_cycle():
    history = History(
        [
            committed(1, reads=[(A, 0), (B, 0)], writes=[(A, 1)]),
            committed(2, reads=[(A, 0), (B, 0)], writes=[(B, 1)]),
        ]
    )
    assert isinstance(check_serializable(history), Cycle)


def test_aborted_transactions_are_ignored():
    history = cyclic_history()
    history.records[2] = HistoryRecord(TxnId(3), (), ((C, 1), (A, 2)), Outcome.aborted)
    assert check_serializable(history) == Ok()


def test_duplicate_version_is_malformed():
    history = History([committed(1, writes=[(A, 1)]), committed(2, writes=[(A, 1)])])
    with pytest.raises(MalformedHistoryError):
        check_serializable(history)


def test_dump_and_load(tmp_path: Path):
    path = tmp_path / "history.json"
    cyclic_history().dump(path)
    loaded = History.load(path)
    assert loaded == cyclic_history()
    assert isinstance(check_serializable(loaded), Cycle)


@pytest.mark.parametrize(
    "text",
    [
        '{"format": 99, "transactions": []}',
        '{"format": 1, "transactions": [{"txn_id": 1, "reads": [], "writes": [], "outcome": "maybe"}]}',
        '{"format": 1, "transactions": [{"txn_id": 1}]}',
    ],
)
def test_malformed_json(text: str):
    with pytest.raises(MalformedHistoryError):
        History.from_json(text)
