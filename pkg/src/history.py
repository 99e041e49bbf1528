"""
history.py

Recorded histories and the serializability oracle.

A history lists finished transactions with the versions they read and the versions they created. The
oracle builds the direct serialization graph over the committed ones and looks for a cycle:

    wr  T1 -> T2  T2 read the version of a key that T1 wrote
    ww  T1 -> T2  T2 wrote the next version of a key after T1's
    rw  T1 -> T2  T1 read a version of a key and T2 wrote the next one

Versions come from the servers' apply logs, never from comparing values, so a value written twice is
never confused with itself.
"""

import json
import logging
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

from src.core import SchemaKey, TxnId
from src.graph_utils import LabeledDiGraph
from src.messages import Outcome

logger = logging.getLogger(__name__)

HISTORY_FORMAT = 1


class MalformedHistoryError(Exception):
    """Raised when two committed transactions claim the same version of one key."""

    ...


class Dependency(StrEnum):
    wr = "wr"
    ww = "ww"
    rw = "rw"


@dataclass(eq=True, frozen=True)
class HistoryRecord:
    txn_id: TxnId
    reads: tuple[tuple[SchemaKey, int], ...]
    writes: tuple[tuple[SchemaKey, int], ...]
    outcome: Outcome
    commit_time: int = 0


@dataclass
class History:
    records: list[HistoryRecord] = field(default_factory=list[HistoryRecord])

    def add(self, record: HistoryRecord) -> None:
        self.records.append(record)

    def committed(self) -> list[HistoryRecord]:
        return [r for r in self.records if r.outcome is Outcome.committed]

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> str:
        return json.dumps(
            {"format": HISTORY_FORMAT, "transactions": [_record_to_json(r) for r in self.records]},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "History":
        doc = json.loads(text)
        if doc.get("format") != HISTORY_FORMAT:
            raise MalformedHistoryError(f"Unsupported history format {doc.get('format')!r}")
        return cls([_record_from_json(r) for r in doc["transactions"]])

    def dump(self, path: Path) -> None:
        path.write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: Path) -> "History":
        return cls.from_json(path.read_text())


def _key_to_json(key: SchemaKey, version: int) -> list[str | int]:
    return [key.schema, key.key.hex(), version]


def _key_from_json(entry: list[str | int]) -> tuple[SchemaKey, int]:
    schema, key, version = entry
    return SchemaKey(str(schema), bytes.fromhex(str(key))), int(version)


def _record_to_json(r: HistoryRecord) -> dict[str, object]:
    return {
        "txn_id": r.txn_id,
        "reads": [_key_to_json(k, v) for k, v in r.reads],
        "writes": [_key_to_json(k, v) for k, v in r.writes],
        "outcome": r.outcome.value,
        "commit_time": r.commit_time,
    }


def _record_from_json(doc: dict[str, object]) -> HistoryRecord:
    try:
        return HistoryRecord(
            TxnId(int(doc["txn_id"])),  # pyright: ignore[reportArgumentType]
            tuple(_key_from_json(e) for e in doc["reads"]),  # pyright: ignore[reportGeneralTypeIssues, reportUnknownVariableType, reportUnknownArgumentType]
            tuple(_key_from_json(e) for e in doc["writes"]),  # pyright: ignore[reportGeneralTypeIssues, reportUnknownVariableType, reportUnknownArgumentType]
            Outcome(doc["outcome"]),
            int(doc.get("commit_time", 0)),  # pyright: ignore[reportArgumentType]
        )
    except (KeyError, ValueError, TypeError) as e:
        raise MalformedHistoryError(f"Bad history record {doc!r}: {e}") from e


@dataclass(eq=True, frozen=True)
class Ok:
    pass


@dataclass(eq=True, frozen=True)
class Cycle:
    witness: tuple[TxnId, ...]


def serialization_graph(history: History) -> LabeledDiGraph[TxnId, Dependency]:
    committed = history.committed()
    graph: LabeledDiGraph[TxnId, Dependency] = LabeledDiGraph()

    writers: dict[SchemaKey, dict[int, TxnId]] = {}
    for r in committed:
        graph.add_node(r.txn_id)
        for key, version in r.writes:
            by_version = writers.setdefault(key, {})
            if version in by_version:
                raise MalformedHistoryError(
                    f"{key!r} version {version} written by both {by_version[version]:#x} and {r.txn_id:#x}"
                )
            by_version[version] = r.txn_id

    versions = {key: sorted(by_version) for key, by_version in writers.items()}

    def next_writer(key: SchemaKey, version: int) -> TxnId | None:
        ordered = versions.get(key, [])
        i = bisect_right(ordered, version)
        return writers[key][ordered[i]] if i < len(ordered) else None

    for key, ordered in versions.items():
        for lo, hi in zip(ordered, ordered[1:]):
            graph.add_edge(writers[key][lo], writers[key][hi], Dependency.ww)

    for r in committed:
        for key, version in r.reads:
            writer = writers.get(key, {}).get(version)
            if writer is not None and writer != r.txn_id:
                graph.add_edge(writer, r.txn_id, Dependency.wr)
            successor = next_writer(key, version)
            if successor is not None and successor != r.txn_id:
                graph.add_edge(r.txn_id, successor, Dependency.rw)

    return graph


def check_serializable(history: History) -> Ok | Cycle:
    """Ok when the committed transactions' dependency graph is acyclic, otherwise one cycle as a witness."""

    cycle = serialization_graph(history).find_cycle()
    if cycle is None:
        return Ok()
    logger.info(f"Serialization cycle: {' -> '.join(f'{t:#x}' for t in cycle)}")
    return Cycle(tuple(cycle))
