"""
values.py

The values a key can hold, and the atomic operations a transaction can buffer against a key.

A Value is a plain Python object from a small closed family:

    bytes        string
    int          signed 64-bit integer (bool is rejected)
    float        64-bit float
    tuple        list of Values
    SetValue     set of Values
    MapValue     map of str -> Value
    None         absent (the key has no committed value)

Everything here is immutable and hashable. Sets and maps compare their contents by type as well as
value (see `value_key`), so 1 and 1.0 are different members and a map holding 1 differs from one
holding 1.0.

There's an AtomicOp ABC with one lowercase dataclass per operation (`overwrite`, `add`, ...). Each
op declares the tags it applies to; applying it to anything else raises TypeMismatchError. Ops
other than `overwrite` and `delete` treat `absent` as their natural identity (0, empty list, ...).
"""

from abc import ABC, abstractmethod
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from enum import StrEnum
from typing import ClassVar

type Value = bytes | int | float | tuple[Value, ...] | SetValue | MapValue | None
type ValueKey = tuple[object, ...]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class TypeMismatchError(Exception):
    """Raised when an atomic operation is applied to a value of the wrong type."""

    ...


class ValueTag(StrEnum):
    string = "string"
    integer = "integer"
    float = "float"
    list = "list"
    set = "set"
    map = "map"
    absent = "absent"


ALL_TAGS = frozenset(ValueTag)


@dataclass(eq=False, frozen=True)
class MapValue:
    """A map of str -> Value, kept as key-sorted pairs."""

    items: tuple[tuple[str, Value], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(sorted(dict(self.items).items())))

    @classmethod
    def of(cls, mapping: Mapping[str, Value]) -> "MapValue":
        return cls(tuple(mapping.items()))

    def get(self, key: str) -> Value:
        return dict(self.items).get(key)

    def put(self, key: str, value: Value) -> "MapValue":
        merged = dict(self.items)
        merged[key] = value
        return MapValue(tuple(merged.items()))

    def as_dict(self) -> dict[str, Value]:
        return dict(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MapValue) and value_key(self) == value_key(other)

    def __hash__(self) -> int:
        return hash(value_key(self))


@dataclass(eq=False, frozen=True)
class SetValue:
    """A set of Values, kept ordered by `value_key` with one member per key."""

    items: tuple[Value, ...] = ()

    def __post_init__(self) -> None:
        members = {value_key(v): v for v in self.items}
        object.__setattr__(self, "items", tuple(members[k] for k in sorted(members)))

    @classmethod
    def of(cls, values: Iterable[Value]) -> "SetValue":
        return cls(tuple(values))

    def insert(self, value: Value) -> "SetValue":
        return SetValue((*self.items, value))

    def remove(self, value: Value) -> "SetValue":
        key = value_key(value)
        return SetValue(tuple(v for v in self.items if value_key(v) != key))

    def __contains__(self, value: Value) -> bool:
        key = value_key(value)
        return any(value_key(v) == key for v in self.items)

    def __iter__(self) -> Iterator[Value]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SetValue) and value_key(self) == value_key(other)

    def __hash__(self) -> int:
        return hash(value_key(self))


def value_key(value: Value) -> ValueKey:
    """
    A hashable, ordered stand-in for `value` that equals another value's key only when both have the
    same tag and the same contents. Python's own equality has 1 == 1.0; this does not. Floats compare
    by bit pattern, so -0.0 and 0.0 differ and NaN equals itself.
    """

    match value:
        case None:
            return ("absent",)
        case bool():
            raise TypeMismatchError("booleans are not values; use an integer")
        case bytes():
            return ("string", value)
        case int():
            return ("integer", value)
        case float():
            return ("float", value.hex())
        case tuple():
            return ("list", tuple(value_key(v) for v in value))
        case SetValue():
            return ("set", tuple(sorted(value_key(v) for v in value.items)))
        case MapValue():
            return ("map", tuple((k, value_key(v)) for k, v in value.items))
        case _:  # pyright: ignore[reportUnnecessaryComparison]
            raise TypeMismatchError(f"{type(value).__name__} is not a storable value")


def value_tag(value: Value) -> ValueTag:
    """Classify a value; raise TypeMismatchError for objects outside the Value family."""

    match value:
        case None:
            return ValueTag.absent
        case bool():
            raise TypeMismatchError("booleans are not values; use an integer")
        case bytes():
            return ValueTag.string
        case int():
            if not INT64_MIN <= value <= INT64_MAX:
                raise TypeMismatchError(f"integer {value} does not fit in 64 bits")
            return ValueTag.integer
        case float():
            return ValueTag.float
        case tuple():
            return ValueTag.list
        case SetValue():
            return ValueTag.set
        case MapValue():
            return ValueTag.map
        case _:  # pyright: ignore[reportUnnecessaryComparison]
            raise TypeMismatchError(f"{type(value).__name__} is not a storable value")


def check_value(value: Value) -> Value:
    """Validate a value recursively and return it unchanged."""

    value_tag(value)
    if isinstance(value, tuple | SetValue):
        for item in value:
            check_value(item)
    elif isinstance(value, MapValue):
        for _key, item in value.items:
            check_value(item)
    return value


class AtomicOp(ABC):
    """Base class for the write operations a transaction can buffer against a key."""

    applies_to: ClassVar[frozenset[ValueTag]]

    @abstractmethod
    def apply(self, current: Value) -> Value: ...

    @abstractmethod
    def __repr__(self) -> str: ...

    def _check(self, current: Value) -> ValueTag:
        tag = value_tag(current)
        if tag is not ValueTag.absent and tag not in self.applies_to:
            raise TypeMismatchError(f"{self!r} does not apply to a {tag} value")
        return tag


@dataclass(eq=True, frozen=True)
class overwrite(AtomicOp):  # noqa: N801
    """Replace whatever is stored with `value`."""

    applies_to: ClassVar[frozenset[ValueTag]] = ALL_TAGS
    value: Value

    def __post_init__(self) -> None:
        check_value(self.value)

    def apply(self, current: Value) -> Value:
        return self.value

    def __repr__(self) -> str:
        return f"overwrite({self.value!r})"


@dataclass(eq=True, frozen=True)
class delete(AtomicOp):  # noqa: N801
    applies_to: ClassVar[frozenset[ValueTag]] = ALL_TAGS

    def apply(self, current: Value) -> Value:
        return None

    def __repr__(self) -> str:
        return "delete()"


@dataclass(eq=True, frozen=True)
class add(AtomicOp):  # noqa: N801
    """Integer arithmetic. The result must stay within 64 bits."""

    applies_to: ClassVar[frozenset[ValueTag]] = frozenset({ValueTag.integer})
    delta: int

    def apply(self, current: Value) -> Value:
        self._check(current)
        base = current if isinstance(current, int) else 0
        result = base + self.delta
        if not INT64_MIN <= result <= INT64_MAX:
            raise TypeMismatchError(f"{self!r} overflows {base}")
        return result

    def __repr__(self) -> str:
        return f"add({self.delta:+d})"


@dataclass(eq=True, frozen=True)
class list_append(AtomicOp):  # noqa: N801
    applies_to: ClassVar[frozenset[ValueTag]] = frozenset({ValueTag.list})
    value: Value

    def apply(self, current: Value) -> Value:
        self._check(current)
        base: tuple[Value, ...] = current if isinstance(current, tuple) else ()
        return (*base, self.value)

    def __repr__(self) -> str:
        return f"list_append({self.value!r})"


@dataclass(eq=True, frozen=True)
class set_insert(AtomicOp):  # noqa: N801
    applies_to: ClassVar[frozenset[ValueTag]] = frozenset({ValueTag.set})
    value: Value

    def apply(self, current: Value) -> Value:
        self._check(current)
        base = current if isinstance(current, SetValue) else SetValue()
        return base.insert(self.value)

    def __repr__(self) -> str:
        return f"set_insert({self.value!r})"


@dataclass(eq=True, frozen=True)
class set_remove(AtomicOp):  # noqa: N801
    applies_to: ClassVar[frozenset[ValueTag]] = frozenset({ValueTag.set})
    value: Value

    def apply(self, current: Value) -> Value:
        self._check(current)
        base = current if isinstance(current, SetValue) else SetValue()
        return base.remove(self.value)

    def __repr__(self) -> str:
        return f"set_remove({self.value!r})"


@dataclass(eq=True, frozen=True)
class map_put(AtomicOp):  # noqa: N801
    applies_to: ClassVar[frozenset[ValueTag]] = frozenset({ValueTag.map})
    key: str
    value: Value

    def apply(self, current: Value) -> Value:
        self._check(current)
        base = current if isinstance(current, MapValue) else MapValue()
        return base.put(self.key, self.value)

    def __repr__(self) -> str:
        return f"map_put({self.key!r}, {self.value!r})"


@dataclass(eq=True, frozen=True)
class sequence(AtomicOp):  # noqa: N801
    """
    Ops that could not be folded into one, applied left to right at commit.

    Clients never build these directly; `fold_ops` produces them when two buffered writes to the same
    key don't compose (e.g. a list_append followed by a set_insert on a key whose type we don't know).
    """

    applies_to: ClassVar[frozenset[ValueTag]] = ALL_TAGS
    ops: tuple[AtomicOp, ...]

    def apply(self, current: Value) -> Value:
        for op in self.ops:
            current = op.apply(current)
        return current

    def __repr__(self) -> str:
        return " then ".join(repr(op) for op in self.ops)


def apply_atomic(current: Value, op: AtomicOp) -> Value:
    """Apply `op` to `current` and return the new value. Pure; raises TypeMismatchError."""

    return op.apply(current)


def _fits(delta: int) -> bool:
    return INT64_MIN <= delta <= INT64_MAX


def fold_ops(prior: AtomicOp | None, new: AtomicOp) -> AtomicOp:
    """
    Fold a newly buffered op onto the op already buffered for the same key.

    The result `r` satisfies r.apply(x) == new.apply(prior.apply(x)) for every x on which the
    sequential application is well-typed:
     - overwrite and delete absorb whatever came before
     - an op after overwrite (or delete) is applied eagerly to the known value
     - add after add sums the deltas
     - anything else is kept as a sequence for the server to apply in order
    """

    if prior is None or isinstance(new, overwrite | delete):
        return new

    match prior:
        case overwrite(value=base):
            try:
                return overwrite(new.apply(base))
            except TypeMismatchError:
                return sequence((prior, new))
        case delete():
            try:
                return overwrite(new.apply(None))
            except TypeMismatchError:
                return sequence((prior, new))
        case add(delta=delta) if isinstance(new, add) and _fits(delta + new.delta):
            return add(delta + new.delta)
        case sequence(ops=ops):
            last = fold_ops(ops[-1], new)
            folded = (*ops[:-1], *last.ops) if isinstance(last, sequence) else (*ops[:-1], last)
            return folded[0] if len(folded) == 1 else sequence(folded)
        case _:
            return sequence((prior, new))
