import random

import pytest

from src.values import (
    AtomicOp,
    MapValue,
    SetValue,
    TypeMismatchError,
    Value,
    ValueTag,
    add,
    apply_atomic,
    delete,
    fold_ops,
    list_append,
    map_put,
    overwrite,
    sequence,
    set_insert,
    set_remove,
    value_tag,
)


@pytest.mark.parametrize(
    ("value", "tag"),
    [
        (None, ValueTag.absent),
        (b"abc", ValueTag.string),
        (7, ValueTag.integer),
        (1.5, ValueTag.float),
        ((1, 2), ValueTag.list),
        (SetValue.of([1]), ValueTag.set),
        (MapValue.of({"a": 1}), ValueTag.map),
    ],
)
def test_value_tag(value: Value, tag: ValueTag):
    assert value_tag(value) is tag


@pytest.mark.parametrize("value", [True, 2**63, "text", [1, 2]])
def test_value_tag_rejects_non_values(value: object):
    with pytest.raises(TypeMismatchError):
        value_tag(value)  # pyright: ignore[reportArgumentType]


@pytest.mark.parametrize(
    ("current", "op", "expected"),
    [
        (None, add(5), 5),
        (3, add(-4), -1),
        (b"old", overwrite(b"new"), b"new"),
        (b"old", delete(), None),
        (None, list_append(1), (1,)),
        ((1,), list_append(2), (1, 2)),
        (SetValue.of([1]), set_insert(2), SetValue.of([1, 2])),
        (SetValue.of([1, 2]), set_remove(1), SetValue.of([2])),
        (None, set_remove(1), SetValue()),
        (None, map_put("k", 1), MapValue.of({"k": 1})),
        (MapValue.of({"k": 1}), map_put("k", 2), MapValue.of({"k": 2})),
    ],
)
def test_apply_atomic(current: Value, op: AtomicOp, expected: Value):
    assert apply_atomic(current, op) == expected


@pytest.mark.parametrize(
    ("current", "op"),
    [
        (b"text", add(1)),
        (5, list_append(1)),
        ((1,), set_insert(1)),
        (SetValue(), map_put("k", 1)),
        (2**63 - 1, add(1)),
    ],
)
def test_apply_atomic_type_mismatch(current: Value, op: AtomicOp):
    with pytest.raises(TypeMismatchError):
        apply_atomic(current, op)


def test_map_value_is_order_insensitive():
    assert MapValue((("b", 2), ("a", 1))) == MapValue.of({"a": 1, "b": 2})
    assert MapValue.of({"a": 1}).get("missing") is None


def test_sets_and_maps_tell_integers_from_floats():
    both = apply_atomic(SetValue.of([1]), set_insert(1.0))
    assert isinstance(both, SetValue)
    assert len(both) == 2
    assert 1 in both and 1.0 in both
    assert apply_atomic(both, set_remove(1)) == SetValue.of([1.0])
    assert apply_atomic(SetValue.of([1]), set_remove(1.0)) == SetValue.of([1])

    assert SetValue.of([1]) != SetValue.of([1.0])
    assert len(SetValue.of([(1,), (1.0,), (1,)])) == 2
    assert MapValue.of({"k": 1}) != MapValue.of({"k": 1.0})
    assert MapValue.of({"k": SetValue.of([2])}) == MapValue.of({"k": SetValue.of([2, 2])})
    assert len({MapValue.of({"k": 1}), MapValue.of({"k": 1.0}), MapValue.of({"k": 1})}) == 2


@pytest.mark.parametrize(
    ("prior", "new", "expected"),
    [
        (None, add(1), add(1)),
        (add(1), add(2), add(3)),
        (overwrite(5), add(2), overwrite(7)),
        (add(2), overwrite(b"x"), overwrite(b"x")),
        (list_append(1), delete(), delete()),
        (delete(), add(3), overwrite(3)),
        (overwrite(b"x"), add(1), sequence((overwrite(b"x"), add(1)))),
        (list_append(1), list_append(2), sequence((list_append(1), list_append(2)))),
    ],
)
def test_fold_ops(prior: AtomicOp | None, new: AtomicOp, expected: AtomicOp):
    assert fold_ops(prior, new) == expected


def _random_op(rng: random.Random) -> AtomicOp:
    return rng.choice(
        [
            overwrite(rng.randrange(10)),
            overwrite((rng.randrange(3),)),
            delete(),
            add(rng.randrange(-5, 6)),
            list_append(rng.randrange(3)),
            set_insert(rng.randrange(3)),
            set_remove(rng.randrange(3)),
        ]
    )


def _run(current: Value, ops: list[AtomicOp]) -> Value | type[TypeMismatchError]:
    try:
        for op in ops:
            current = op.apply(current)
    except TypeMismatchError:
        return TypeMismatchError
    return current


@pytest.mark.parametrize("seed", range(20))
def test_fold_matches_sequential_application(seed: int):
    """Folding a buffered op sequence gives the same value as applying the ops one by one."""

    rng = random.Random(seed)
    for _ in range(50):
        ops = [_random_op(rng) for _ in range(rng.randint(1, 5))]
        folded: AtomicOp | None = None
        for op in ops:
            folded = fold_ops(folded, op)
        assert folded is not None

        for start in (None, 3, (1,), SetValue.of([1])):
            expected = _run(start, ops)
            if expected is TypeMismatchError:
                continue
            assert _run(start, [folded]) == expected, (ops, folded, start)
