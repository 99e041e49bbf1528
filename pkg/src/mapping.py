"""
mapping.py

The coordinator's view of the cluster: which physical servers own which slice of the key space,
how a transaction's footprint becomes a chain of hops, and how the mapping changes when servers
fail or join.

The key space is split into ordered ranges, per schema, by lower bound. Each range (a "partition")
has f+1 replicas; replica j of partition p is the virtual server (p, j). A physical server owns as
many virtual servers as there are partitions listing it, and acts as each of them independently.

A chain is built by grouping the sorted footprint by partition and inlining every replica of each
partition in slot order. Because the footprint is sorted and the partitions are ordered ranges,
two transactions sharing servers always visit them in the same relative order.
"""

import logging
import math
from bisect import bisect_right
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Final

from src.core import SchemaKey, TransactionPayload, TxnId, footprint

logger = logging.getLogger(__name__)

type ServerId = str

DEFAULT_SCHEMA = "default"
DEFAULT_PARTITIONS = 64


class TailHasNoForwardError(Exception):
    """Raised when asking for the forward neighbor of a chain's tail."""

    ...


class NoReplacementAvailableError(Exception):
    """Raised when a failure leaves fewer than f+1 live servers; the configuration freezes."""

    ...


class UnknownServerError(Exception):
    """Raised when a membership event names a server that is not a live roster member."""

    ...


class DuplicateServerError(Exception):
    """Raised when a live server tries to join again."""

    ...


@dataclass(eq=True, frozen=True, order=True)
class VirtualServerId:
    partition_index: int
    replica_slot: int

    def __repr__(self) -> str:
        return f"p{self.partition_index}.{self.replica_slot}"


@dataclass(eq=True, frozen=True)
class Hop:
    vs: VirtualServerId
    server: ServerId


class Direction(StrEnum):
    forward = "forward"
    backward = "backward"


class ClientEndpoint:
    """Marker for "off the head end of the chain": the backward neighbor of the head."""

    def __repr__(self) -> str:
        return "CLIENT"


CLIENT: Final = ClientEndpoint()


@dataclass(eq=True, frozen=True)
class Chain:
    txn_id: TxnId
    hops: tuple[Hop, ...]
    config_version: int

    @property
    def head(self) -> Hop:
        return self.hops[0]

    @property
    def tail(self) -> Hop:
        return self.hops[-1]

    def position(self, vs: VirtualServerId) -> int:
        for i, hop in enumerate(self.hops):
            if hop.vs == vs:
                return i
        raise ValueError(f"{vs} is not on the chain of {self.txn_id:#x}")

    def index_of(self, partition: int, server: ServerId) -> int | None:
        """Where `server` acts for `partition` in this chain, if it does at all."""

        for i, hop in enumerate(self.hops):
            if hop.vs.partition_index == partition and hop.server == server:
                return i
        return None

    def __len__(self) -> int:
        return len(self.hops)

    def __repr__(self) -> str:
        return " -> ".join(f"{h.server}[{h.vs!r}]" for h in self.hops)


@dataclass(eq=True, frozen=True)
class Partition:
    """The range of `schema` starting at `lower` (inclusive) up to the next partition's lower bound."""

    schema: str
    lower: bytes
    replicas: tuple[ServerId, ...]

    @property
    def bound(self) -> tuple[bytes, bytes]:
        return (self.schema.encode(), self.lower)


@dataclass(eq=True, frozen=True)
class ServerStatus:
    server: ServerId
    alive: bool = True


@dataclass(eq=True, frozen=True)
class Configuration:
    version: int
    f: int
    partitions: tuple[Partition, ...]
    roster: tuple[ServerStatus, ...]
    _bounds: tuple[tuple[bytes, bytes], ...] = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        bounds = tuple(p.bound for p in self.partitions)
        if not bounds or list(bounds) != sorted(set(bounds)):
            raise ValueError("Partitions must be non-empty, sorted and distinct")
        for p in self.partitions:
            if len(p.replicas) != self.f + 1 or len(set(p.replicas)) != self.f + 1:
                raise ValueError(f"Partition {p.schema}:{p.lower!r} needs {self.f + 1} distinct replicas")
        object.__setattr__(self, "_bounds", bounds)

    @property
    def bounds(self) -> tuple[tuple[bytes, bytes], ...]:
        return self._bounds

    @property
    def servers(self) -> tuple[ServerId, ...]:
        return tuple(s.server for s in self.roster)

    @property
    def live_servers(self) -> tuple[ServerId, ...]:
        return tuple(sorted(s.server for s in self.roster if s.alive))

    def is_alive(self, server: ServerId) -> bool:
        return any(s.server == server and s.alive for s in self.roster)

    def replicas(self, partition: int) -> tuple[ServerId, ...]:
        return self.partitions[partition].replicas

    def server_of(self, vs: VirtualServerId) -> ServerId:
        return self.partitions[vs.partition_index].replicas[vs.replica_slot]

    def vs_of(self, partition: int, server: ServerId) -> VirtualServerId | None:
        replicas = self.partitions[partition].replicas
        return VirtualServerId(partition, replicas.index(server)) if server in replicas else None

    def partitions_of(self, server: ServerId) -> list[int]:
        return [i for i, p in enumerate(self.partitions) if server in p.replicas]

    def load(self) -> dict[ServerId, int]:
        """Number of replica slots each live server holds."""

        counts = dict.fromkeys(self.live_servers, 0)
        for p in self.partitions:
            for r in p.replicas:
                counts[r] = counts.get(r, 0) + 1
        return counts


def partition_of(key: SchemaKey, config: Configuration) -> int:
    """Index of the partition whose range holds `key`; keys below every bound fall in partition 0."""

    return max(0, bisect_right(config.bounds, key.sort_key) - 1)


def partition_lower_bound(i: int, count: int) -> bytes:
    if i == 0:
        return b""
    if count <= 256:
        return bytes([i * 256 // count])
    return (i * 65536 // count).to_bytes(2, "big")


def default_configuration(
    servers: Sequence[ServerId],
    f: int = 1,
    partitions: int = DEFAULT_PARTITIONS,
    schemas: Iterable[str] = (DEFAULT_SCHEMA,),
) -> Configuration:
    """
    Evenly split each schema's key space by its first byte (two bytes past 256 partitions) and assign
    replicas round-robin, so partition g lives on servers g, g+1, ..., g+f (mod n).
    """

    if f < 0:
        raise ValueError("f must be non-negative")
    if len(set(servers)) != len(servers) or len(servers) < f + 1:
        raise NoReplacementAvailableError(f"Need at least {f + 1} distinct servers, got {list(servers)}")
    if not 1 <= partitions <= 65536:
        raise ValueError("Partition count must be between 1 and 65536")

    n = len(servers)
    parts: list[Partition] = []
    for schema in sorted(set(schemas)):
        for i in range(partitions):
            g = len(parts)
            replicas = tuple(servers[(g + j) % n] for j in range(f + 1))
            parts.append(Partition(schema, partition_lower_bound(i, partitions), replicas))

    return Configuration(1, f, tuple(parts), tuple(ServerStatus(s) for s in servers))


def from_ranges(
    ranges: Sequence[tuple[bytes, Sequence[ServerId]]],
    f: int = 0,
    schema: str = DEFAULT_SCHEMA,
    version: int = 1,
) -> Configuration:
    """
    Build a configuration from explicit (lower bound, replicas) ranges of one schema.

    >>> from_ranges([(b"", ["s0"]), (b"D", ["s1"]), (b"G", ["s2"])])

    The first range always starts at the bottom of the key space, whatever bound is given for it.
    """

    parts = tuple(
        Partition(schema, b"" if i == 0 else lower, tuple(replicas)) for i, (lower, replicas) in enumerate(ranges)
    )
    roster = list(dict.fromkeys(r for p in parts for r in p.replicas))
    return Configuration(version, f, parts, tuple(ServerStatus(s) for s in roster))


def build_chain(payload: TransactionPayload, config: Configuration) -> Chain:
    """
    Map the sorted footprint onto virtual servers: one subchain per touched partition, in order of the
    partition's first footprint key, with every replica slot 0..f inlined.
    """

    partitions: list[int] = []
    for key in footprint(payload):
        p = partition_of(key, config)
        if not partitions or partitions[-1] != p:
            partitions.append(p)

    hops = tuple(
        Hop(VirtualServerId(p, slot), server) for p in partitions for slot, server in enumerate(config.replicas(p))
    )
    return Chain(payload.txn_id, hops, config.version)


def next_hop(chain: Chain, vs: VirtualServerId, direction: Direction) -> Hop | ClientEndpoint:
    i = chain.position(vs)
    match direction:
        case Direction.forward:
            if i == len(chain) - 1:
                raise TailHasNoForwardError(f"{vs} is the tail of {chain.txn_id:#x}")
            return chain.hops[i + 1]
        case Direction.backward:
            return CLIENT if i == 0 else chain.hops[i - 1]


@dataclass(eq=True, frozen=True)
class ServerJoin:
    server: ServerId


@dataclass(eq=True, frozen=True)
class ServerFail:
    server: ServerId


type MembershipEvent = ServerJoin | ServerFail


def apply_membership_event(config: Configuration, event: MembershipEvent) -> Configuration:
    match event:
        case ServerFail(server=failed):
            return _apply_fail(config, failed)
        case ServerJoin(server=joined):
            return _apply_join(config, joined)


def _apply_fail(config: Configuration, failed: ServerId) -> Configuration:
    if not config.is_alive(failed):
        raise UnknownServerError(f"{failed} is not a live member of configuration {config.version}")

    roster = tuple(replace(s, alive=False) if s.server == failed else s for s in config.roster)
    live = sorted(s.server for s in roster if s.alive)
    if len(live) < config.f + 1:
        raise NoReplacementAvailableError(
            f"Only {len(live)} live servers after losing {failed}; {config.f + 1} needed per replica set"
        )

    partitions: list[Partition] = []
    for p in config.partitions:
        if failed not in p.replicas:
            partitions.append(p)
            continue
        survivors = tuple(r for r in p.replicas if r != failed)
        replacement = next(s for s in live if s not in survivors)
        partitions.append(replace(p, replicas=(*survivors, replacement)))

    return Configuration(config.version + 1, config.f, tuple(partitions), roster)


def _apply_join(config: Configuration, joined: ServerId) -> Configuration:
    if config.is_alive(joined):
        raise DuplicateServerError(f"{joined} is already a live member")

    if joined in config.servers:
        roster = tuple(replace(s, alive=True) if s.server == joined else s for s in config.roster)
    else:
        roster = (*config.roster, ServerStatus(joined))

    partitions = list(config.partitions)
    if config.f == 0:
        # A single-replica set that moves has nothing in common with its previous version.
        logger.info(f"{joined} joins without taking partitions: f=0 replica sets cannot move")
        return Configuration(config.version + 1, config.f, tuple(partitions), roster)

    n_live = sum(s.alive for s in roster)
    moves = min(
        math.ceil(len(partitions) / len(roster)),
        max(1, len(partitions) * (config.f + 1) // n_live),
    )

    load: dict[ServerId, int] = {s.server: 0 for s in roster if s.alive}
    for p in partitions:
        for r in p.replicas:
            load[r] += 1

    for _ in range(moves):
        candidates = [
            (-load[r], r, i) for i, p in enumerate(partitions) if joined not in p.replicas for r in p.replicas
        ]
        if not candidates:
            break
        _, donor, index = min(candidates)
        if load[donor] <= load[joined]:
            break

        p = partitions[index]
        partitions[index] = replace(p, replicas=(*(r for r in p.replicas if r != donor), joined))
        load[donor] -= 1
        load[joined] += 1

    return Configuration(config.version + 1, config.f, tuple(partitions), roster)
