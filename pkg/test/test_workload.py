import random
from collections import Counter
from itertools import islice

import pytest

from src.mapping import default_configuration, partition_of
from src.workload import (
    KEY_SIZE,
    KeySpace,
    Profile,
    ReadModifyWriteStep,
    ReadStep,
    TxnPlan,
    UpdateStep,
    WorkloadSpec,
    WriteStep,
    hot_mixed,
    micro,
    scalability,
    tpcc_lite,
)


def test_tpcc_mix():
    spec = tpcc_lite(seed=1)
    rng = random.Random(1)
    draws = 1_000_000
    counts = Counter(spec.draw_profile(rng).name for _ in range(draws))
    expected = {"new_order": 0.45, "payment": 0.45, "order_status": 0.05, "stock_level": 0.05}
    for name, share in expected.items():
        assert abs(counts[name] / draws - share) <= 0.005, (name, counts[name])


def test_tpcc_hot_keys():
    assert len(tpcc_lite(warehouses=10, districts=100).hot_keys) == 110


def _shape(plan: TxnPlan) -> Counter[type]:
    return Counter(type(s) for s in plan.steps)


def test_tpcc_profiles():
    plans: dict[str, TxnPlan] = {}
    for plan in islice(tpcc_lite(seed=3).plans(), 500):
        plans.setdefault(plan.profile, plan)
    assert set(plans) == {"new_order", "payment", "order_status", "stock_level"}

    assert _shape(plans["new_order"]) == {ReadStep: 12, ReadModifyWriteStep: 10, UpdateStep: 1, WriteStep: 3}
    assert _shape(plans["payment"]) == {WriteStep: 1, UpdateStep: 2, ReadModifyWriteStep: 1}
    assert _shape(plans["order_status"]) == {ReadStep: 12}
    assert _shape(plans["stock_level"]) == {ReadStep: 201}
    for plan in plans.values():
        assert len(plan.keys) == len(plan.steps)


def test_contended_keys_are_never_read_by_the_client():
    spec = tpcc_lite(seed=4)
    for plan in islice(spec.plans(), 2000):
        if plan.profile in ("new_order", "payment"):
            for step in plan.steps:
                if step.key in spec.hot_keys:
                    assert isinstance(step, UpdateStep)


def test_plans_are_deterministic():
    a = list(islice(tpcc_lite(seed=9).plans(), 100))
    b = list(islice(tpcc_lite(seed=9).plans(), 100))
    c = list(islice(tpcc_lite(seed=10).plans(), 100))
    assert a == b
    assert a != c


@pytest.mark.parametrize("partitions", [64, 1000])
def test_key_in_lands_in_partition(partitions: int):
    space = KeySpace(partitions=partitions)
    config = default_configuration(["s0"], f=0, partitions=partitions)
    for p in range(partitions):
        key = space.key_in(p, f"name{p}")
        assert len(key.key) == KEY_SIZE
        assert partition_of(key, config) == p


@pytest.mark.parametrize(("txn_size", "write_fraction"), [(1, 1.0), (8, 1.0), (30, 1.0), (8, 0.0)])
def test_micro_touches_distinct_partitions(txn_size: int, write_fraction: float):
    spec = micro(txn_size, write_fraction, duration=50, seed=2)
    config = default_configuration(["s0"], f=0)
    for plan in spec.plans():
        assert len({partition_of(k, config) for k in plan.keys}) == txn_size
        assert plan.writes == (txn_size if write_fraction == 1.0 else 0)


def test_micro_rejects_oversized_transactions():
    with pytest.raises(ValueError):
        micro(65, 1.0, duration=1)


def test_scalability_and_hot_mixed():
    for plan in scalability(100, seed=1).plans():
        assert len(plan.keys) == 2
    spec = hot_mixed(200, seed=1, hot=4)
    assert len(spec.hot_keys) == 4
    for plan in spec.plans():
        assert 1 <= len(plan.steps) <= 3


def test_weights_must_sum_to_one():
    profile = Profile("p", 0.5, lambda rng: TxnPlan("p", ()))
    with pytest.raises(ValueError):
        WorkloadSpec("bad", (profile,), 10)
