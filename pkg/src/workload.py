"""
workload.py

Workload generators. A workload is a weighted mix of profiles; each profile draws a TxnPlan (a list of
reads, blind writes and read-modify-writes) from a seeded random.Random, so a (spec, seed) pair always
yields the same sequence of transactions.

Keys are spread over the key space by prefixing them with a byte derived from their name (crc32), or,
for the microbenchmarks, with the lower bound of a chosen partition so that a transaction of O keys
touches exactly O partitions.
"""

import random
import zlib
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from enum import StrEnum

from src.core import SchemaKey
from src.mapping import DEFAULT_PARTITIONS, DEFAULT_SCHEMA, partition_lower_bound
from src.values import AtomicOp, MapValue, add, list_append, overwrite

KEY_SIZE = 12
VALUE_SIZE = 64


@dataclass(eq=True, frozen=True)
class KeySpace:
    schema: str = DEFAULT_SCHEMA
    partitions: int = DEFAULT_PARTITIONS

    def key(self, name: str) -> SchemaKey:
        """A key whose first byte is derived from its name, spreading names over all partitions."""

        raw = name.encode()
        return SchemaKey(self.schema, bytes([zlib.crc32(raw) & 0xFF]) + raw)

    def key_in(self, partition: int, name: str) -> SchemaKey:
        """A key of exactly KEY_SIZE bytes that falls in `partition` of an evenly split key space."""

        prefix = partition_lower_bound(partition, self.partitions)
        if not prefix:
            prefix = bytes(1 if self.partitions <= 256 else 2)
        width = KEY_SIZE - len(prefix)
        return SchemaKey(self.schema, prefix + name.encode()[-width:].rjust(width, b"0"))


@dataclass(eq=True, frozen=True)
class ReadStep:
    key: SchemaKey


@dataclass(eq=True, frozen=True)
class WriteStep:
    key: SchemaKey
    op: AtomicOp


@dataclass(eq=True, frozen=True)
class ReadModifyWriteStep:
    """Read the key, then write it; the read is validated at commit like any other."""

    key: SchemaKey
    op: AtomicOp


@dataclass(eq=True, frozen=True)
class UpdateStep:
    """A read-modify-write done entirely by the server through an atomic op; the client never reads."""

    key: SchemaKey
    op: AtomicOp


type Step = ReadStep | WriteStep | ReadModifyWriteStep | UpdateStep


@dataclass(eq=True, frozen=True)
class TxnPlan:
    profile: str
    steps: tuple[Step, ...]

    @property
    def keys(self) -> frozenset[SchemaKey]:
        return frozenset(s.key for s in self.steps)

    @property
    def writes(self) -> int:
        return sum(1 for s in self.steps if not isinstance(s, ReadStep))


@dataclass(eq=True, frozen=True)
class Profile:
    name: str
    weight: float
    generate: Callable[[random.Random], TxnPlan] = field(compare=False)


@dataclass(eq=True, frozen=True)
class WorkloadSpec:
    """
    A weighted mix of profiles. `duration` is the number of transactions to issue; `txn_size` and
    `write_fraction` describe the microbenchmarks and are informational for mixed workloads.
    """

    name: str
    mix: tuple[Profile, ...]
    duration: int
    seed: int = 0
    txn_size: int = 0
    write_fraction: float = 0.0
    hot_keys: frozenset[SchemaKey] = frozenset()
    schemas: tuple[str, ...] = (DEFAULT_SCHEMA,)

    def __post_init__(self) -> None:
        if not self.mix:
            raise ValueError("A workload needs at least one profile")
        if abs(sum(p.weight for p in self.mix) - 1.0) > 1e-9:
            raise ValueError(f"Profile weights of {self.name} sum to {sum(p.weight for p in self.mix)}, not 1")
        if self.duration < 0:
            raise ValueError("Duration must be non-negative")

    def draw_profile(self, rng: random.Random) -> Profile:
        return rng.choices(self.mix, weights=[p.weight for p in self.mix])[0]

    def plans(self) -> Iterator[TxnPlan]:
        rng = random.Random(self.seed)
        for _ in range(self.duration):
            yield self.draw_profile(rng).generate(rng)


def _value(rng: random.Random) -> bytes:
    return rng.randbytes(VALUE_SIZE)


# Microbenchmarks


def micro(
    txn_size: int,
    write_fraction: float,
    duration: int,
    seed: int = 0,
    partitions: int = DEFAULT_PARTITIONS,
    keys_per_partition: int = 1000,
) -> WorkloadSpec:
    """
    Transactions of `txn_size` keys, each in a different partition; every key is written with
    probability `write_fraction` (a 64-byte overwrite) and read otherwise.
    """

    if not 1 <= txn_size <= partitions:
        raise ValueError(f"Transaction size must be between 1 and {partitions}")
    space = KeySpace(partitions=partitions)

    def generate(rng: random.Random) -> TxnPlan:
        steps: list[Step] = []
        for p in sorted(rng.sample(range(partitions), txn_size)):
            key = space.key_in(p, str(rng.randrange(keys_per_partition)))
            steps.append(WriteStep(key, overwrite(_value(rng))) if rng.random() < write_fraction else ReadStep(key))
        return TxnPlan("micro", tuple(steps))

    return WorkloadSpec(
        f"micro-{txn_size}-{write_fraction}", (Profile("micro", 1.0, generate),), duration, seed, txn_size, write_fraction
    )


def scalability(duration: int, seed: int = 0, keys: int = 100_000) -> WorkloadSpec:
    """Two-key read-modify-write transactions over a large, uniformly spread key space."""

    space = KeySpace()

    def generate(rng: random.Random) -> TxnPlan:
        a, b = rng.sample(range(keys), 2)
        value = rng.randrange(1 << 32)
        steps = (ReadModifyWriteStep(space.key(f"k{a}"), add(1)), WriteStep(space.key(f"k{b}"), overwrite(value)))
        return TxnPlan("pair", steps)

    return WorkloadSpec("scalability", (Profile("pair", 1.0, generate),), duration, seed, 2, 1.0)


def hot_mixed(
    duration: int,
    seed: int = 0,
    keys: int = 64,
    hot: int = 8,
    txn_size: int = 3,
    write_fraction: float = 0.5,
    hot_fraction: float = 0.5,
) -> WorkloadSpec:
    """Small mixed read/write transactions where a fraction of the accesses go to a few hot keys."""

    space = KeySpace()
    names = [f"key{i}" for i in range(keys)]

    def generate(rng: random.Random) -> TxnPlan:
        chosen: set[str] = set()
        while len(chosen) < min(txn_size, keys):
            pool = names[:hot] if hot and rng.random() < hot_fraction else names
            chosen.add(rng.choice(pool))
        steps: list[Step] = []
        for name in sorted(chosen):
            key = space.key(name)
            roll = rng.random()
            if roll < write_fraction / 2:
                steps.append(WriteStep(key, overwrite(rng.randrange(1000))))
            elif roll < write_fraction:
                steps.append(ReadModifyWriteStep(key, add(1)))
            else:
                steps.append(ReadStep(key))
        return TxnPlan("mixed", tuple(steps))

    return WorkloadSpec(
        "hot-mixed",
        (Profile("mixed", 1.0, generate),),
        duration,
        seed,
        txn_size,
        write_fraction,
        frozenset(space.key(n) for n in names[:hot]),
    )


# TPC-C lite


class Table(StrEnum):
    warehouse = "warehouse"
    district = "district"
    customer = "customer"
    item = "item"
    stock = "stock"
    order = "order"
    new_order = "new_order"
    order_line = "order_line"
    history = "history"


TPCC_SCHEMAS = tuple(t.value for t in Table)
CUSTOMERS_PER_DISTRICT = 30
ITEMS = 1000
ORDER_ITEMS = 10
STOCK_LEVEL_ITEMS = 200


def tpcc_lite(seed: int = 0, warehouses: int = 10, districts: int = 100, duration: int = 20_000) -> WorkloadSpec:
    """
    A key-value rendition of TPC-C without the delivery transaction. `districts` is the total across
    all warehouses. The contended keys are the warehouse year-to-date counters and the district rows;
    they are only ever updated with a server-side `add`, never read back by the client, so concurrent
    increments conflict as writes only.

        New Order     12 reads, 3 writes, 11 read-modify-writes (10 stock rows, 1 district)   45%
        Payment        0 reads, 1 write,   3 read-modify-writes (warehouse, district, customer) 45%
        Order Status  12 reads                                                                  5%
        Stock Level  201 reads                                                                  5%
    """

    if warehouses < 1 or districts < warehouses:
        raise ValueError("Need at least one warehouse and one district per warehouse")
    per_warehouse = districts // warehouses

    def row(table: Table, *ids: int | str) -> SchemaKey:
        name = "/".join(str(i) for i in ids)
        return KeySpace(table.value).key(name)

    def pick_district(rng: random.Random) -> tuple[int, int]:
        return rng.randrange(warehouses), rng.randrange(per_warehouse)

    def new_order(rng: random.Random) -> TxnPlan:
        w, d = pick_district(rng)
        c = rng.randrange(CUSTOMERS_PER_DISTRICT)
        items = rng.sample(range(ITEMS), ORDER_ITEMS)
        order_id = rng.getrandbits(48)

        steps: list[Step] = [ReadStep(row(Table.warehouse, w)), ReadStep(row(Table.customer, w, d, c))]
        steps += [ReadStep(row(Table.item, i)) for i in items]
        steps += [ReadModifyWriteStep(row(Table.stock, w, i), add(-rng.randint(1, 10))) for i in items]
        steps.append(UpdateStep(row(Table.district, w, d), add(1)))
        steps += [
            WriteStep(row(Table.order, w, d, order_id), overwrite(MapValue.of({"customer": c, "lines": ORDER_ITEMS}))),
            WriteStep(row(Table.new_order, w, d, order_id), overwrite(order_id)),
            WriteStep(row(Table.order_line, w, d, order_id), overwrite(tuple(items))),
        ]
        return TxnPlan("new_order", tuple(steps))

    def payment(rng: random.Random) -> TxnPlan:
        w, d = pick_district(rng)
        c = rng.randrange(CUSTOMERS_PER_DISTRICT)
        amount = rng.randint(1, 5000)
        return TxnPlan(
            "payment",
            (
                WriteStep(row(Table.history, w, d, c), list_append(amount)),
                UpdateStep(row(Table.warehouse, w, "ytd"), add(amount)),
                UpdateStep(row(Table.district, w, d), add(amount)),
                ReadModifyWriteStep(row(Table.customer, w, d, c), add(-amount)),
            ),
        )

    def order_status(rng: random.Random) -> TxnPlan:
        w, d = pick_district(rng)
        c = rng.randrange(CUSTOMERS_PER_DISTRICT)
        steps: list[Step] = [ReadStep(row(Table.customer, w, d, c))]
        steps += [ReadStep(row(Table.item, i)) for i in rng.sample(range(ITEMS), ORDER_ITEMS + 1)]
        return TxnPlan("order_status", tuple(steps))

    def stock_level(rng: random.Random) -> TxnPlan:
        w, d = pick_district(rng)
        steps: list[Step] = [ReadStep(row(Table.district, w, d))]
        steps += [ReadStep(row(Table.stock, w, i)) for i in rng.sample(range(ITEMS), STOCK_LEVEL_ITEMS)]
        return TxnPlan("stock_level", tuple(steps))

    hot = {row(Table.warehouse, w, "ytd") for w in range(warehouses)}
    hot |= {row(Table.district, w, d) for w in range(warehouses) for d in range(per_warehouse)}

    return WorkloadSpec(
        "tpcc-lite",
        (
            Profile("new_order", 0.45, new_order),
            Profile("payment", 0.45, payment),
            Profile("order_status", 0.05, order_status),
            Profile("stock_level", 0.05, stock_level),
        ),
        duration,
        seed,
        hot_keys=frozenset(hot),
        schemas=TPCC_SCHEMAS,
    )
