"""
codec.py

Canonical binary encoding shared by the wire protocol, the apply log and the coordinator's history
file. Every top-level encoding starts with a version byte; integers are little-endian and fixed width,
byte strings and sequences are prefixed with a u32 length, and fields are written in declaration
order. Set elements are written sorted by their own encoding so equal sets encode identically.

Frames (used on the wire and in log files) are a 4-byte big-endian length followed by the body.
"""

import struct
from collections.abc import Callable, Iterator, Sequence

from src.core import MediatorToken, ReadRecord, SchemaKey, TransactionPayload, TxnId, WriteRecord
from src.mapping import Chain, Configuration, Hop, Partition, ServerStatus, VirtualServerId
from src.messages import (
    AbortBackward,
    AbortReason,
    ClientReply,
    CommitBackward,
    ConfigResponse,
    Envelope,
    Forward,
    GetConfig,
    Message,
    MiniAck,
    MiniDecide,
    MiniPrepare,
    MiniVote,
    Outcome,
    Read,
    ReadReply,
    Register,
    ReportFail,
    RetryBackward,
    SnapshotReply,
    SnapshotRequest,
    StatusQuery,
    StatusReply,
    TxnStatus,
    WrongServer,
)
from src.state import AppliedWrite, CompletionEntry, KeyState, Phase, ServerTxnRecord, VirtualServerSnapshot
from src.values import (
    AtomicOp,
    MapValue,
    SetValue,
    Value,
    add,
    delete,
    list_append,
    map_put,
    overwrite,
    sequence,
    set_insert,
    set_remove,
)

VERSION = 1
FRAME_HEADER = struct.Struct(">I")


class CodecError(Exception):
    """Raised when bytes cannot be decoded (bad version, unknown tag, truncation)."""

    ...


class Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, x: int) -> None:
        self.parts.append(struct.pack("<B", x))

    def u32(self, x: int) -> None:
        self.parts.append(struct.pack("<I", x))

    def u64(self, x: int) -> None:
        self.parts.append(struct.pack("<Q", x))

    def i64(self, x: int) -> None:
        self.parts.append(struct.pack("<q", x))

    def f64(self, x: float) -> None:
        self.parts.append(struct.pack("<d", x))

    def raw(self, b: bytes) -> None:
        self.u32(len(b))
        self.parts.append(b)

    def text(self, s: str) -> None:
        self.raw(s.encode())

    def txn(self, t: TxnId) -> None:
        self.parts.append(t.to_bytes(16, "little"))

    def flag(self, present: bool) -> None:
        self.u8(1 if present else 0)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CodecError(f"Truncated input: wanted {n} bytes at offset {self.pos}")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def _unpack(self, fmt: str) -> int | float:
        s = struct.Struct(fmt)
        return s.unpack(self._take(s.size))[0]

    def u8(self) -> int:
        return int(self._unpack("<B"))

    def u32(self) -> int:
        return int(self._unpack("<I"))

    def u64(self) -> int:
        return int(self._unpack("<Q"))

    def i64(self) -> int:
        return int(self._unpack("<q"))

    def f64(self) -> float:
        return float(self._unpack("<d"))

    def raw(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        return self.raw().decode()

    def txn(self) -> TxnId:
        return TxnId(int.from_bytes(self._take(16), "little"))

    def flag(self) -> bool:
        return self.u8() == 1

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CodecError(f"{len(self.data) - self.pos} trailing bytes")


def _seq[T](w: Writer, items: Sequence[T], put: Callable[[Writer, T], None]) -> None:
    w.u32(len(items))
    for item in items:
        put(w, item)


def _read_seq[T](r: Reader, get: Callable[[Reader], T]) -> tuple[T, ...]:
    return tuple(get(r) for _ in range(r.u32()))


def _versioned(put: Callable[[Writer], None]) -> bytes:
    w = Writer()
    w.u8(VERSION)
    put(w)
    return w.getvalue()


def _unversioned[T](data: bytes, get: Callable[[Reader], T]) -> T:
    r = Reader(data)
    if (version := r.u8()) != VERSION:
        raise CodecError(f"Unsupported encoding version {version}")
    out = get(r)
    r.done()
    return out


# Values and ops


def put_value(w: Writer, v: Value) -> None:
    match v:
        case None:
            w.u8(6)
        case bool():
            raise CodecError("booleans are not values")
        case bytes():
            w.u8(0)
            w.raw(v)
        case int():
            w.u8(1)
            w.i64(v)
        case float():
            w.u8(2)
            w.f64(v)
        case tuple():
            w.u8(3)
            _seq(w, v, put_value)
        case SetValue():
            w.u8(4)
            elements = sorted(encode_value(e) for e in v)
            _seq(w, elements, Writer.raw)
        case MapValue():
            w.u8(5)
            w.u32(len(v.items))
            for k, item in v.items:
                w.text(k)
                put_value(w, item)
        case _:  # pyright: ignore[reportUnnecessaryComparison]
            raise CodecError(f"Cannot encode {type(v).__name__}")


def get_value(r: Reader) -> Value:
    match r.u8():
        case 0:
            return r.raw()
        case 1:
            return r.i64()
        case 2:
            return r.f64()
        case 3:
            return _read_seq(r, get_value)
        case 4:
            return SetValue.of(decode_value(b) for b in _read_seq(r, Reader.raw))
        case 5:
            return MapValue(tuple((r.text(), get_value(r)) for _ in range(r.u32())))
        case 6:
            return None
        case tag:
            raise CodecError(f"Unknown value tag {tag}")


def put_op(w: Writer, op: AtomicOp) -> None:
    match op:
        case overwrite(value=v):
            w.u8(0)
            put_value(w, v)
        case add(delta=d):
            w.u8(1)
            w.i64(d)
        case list_append(value=v):
            w.u8(2)
            put_value(w, v)
        case set_insert(value=v):
            w.u8(3)
            put_value(w, v)
        case set_remove(value=v):
            w.u8(4)
            put_value(w, v)
        case map_put(key=k, value=v):
            w.u8(5)
            w.text(k)
            put_value(w, v)
        case delete():
            w.u8(6)
        case sequence(ops=ops):
            w.u8(7)
            _seq(w, ops, put_op)
        case _:
            raise CodecError(f"Cannot encode op {op!r}")


def get_op(r: Reader) -> AtomicOp:
    match r.u8():
        case 0:
            return overwrite(get_value(r))
        case 1:
            return add(r.i64())
        case 2:
            return list_append(get_value(r))
        case 3:
            return set_insert(get_value(r))
        case 4:
            return set_remove(get_value(r))
        case 5:
            return map_put(r.text(), get_value(r))
        case 6:
            return delete()
        case 7:
            return sequence(_read_seq(r, get_op))
        case tag:
            raise CodecError(f"Unknown op tag {tag}")


# Core types


def put_key(w: Writer, k: SchemaKey) -> None:
    w.text(k.schema)
    w.raw(k.key)


def get_key(r: Reader) -> SchemaKey:
    return SchemaKey(r.text(), r.raw())


def put_token(w: Writer, t: MediatorToken | None) -> None:
    w.flag(t is not None)
    if t is not None:
        w.u64(t.counter)
        w.text(t.head)
        w.txn(t.txn_id)


def get_token(r: Reader) -> MediatorToken | None:
    if not r.flag():
        return None
    return MediatorToken(r.u64(), r.text(), r.txn())


def _get_token_required(r: Reader) -> MediatorToken:
    if (t := get_token(r)) is None:
        raise CodecError("Missing token")
    return t


def put_payload(w: Writer, p: TransactionPayload) -> None:
    w.txn(p.txn_id)
    _seq(w, p.reads, _put_read)
    _seq(w, p.writes, _put_write)


def get_payload(r: Reader) -> TransactionPayload:
    return TransactionPayload(r.txn(), _read_seq(r, _get_read), _read_seq(r, _get_write))


def _put_read(w: Writer, rr: ReadRecord) -> None:
    put_key(w, rr.key)
    w.u64(rr.observed_version)


def _get_read(r: Reader) -> ReadRecord:
    return ReadRecord(get_key(r), r.u64())


def _put_write(w: Writer, wr: WriteRecord) -> None:
    put_key(w, wr.key)
    put_op(w, wr.op)


def _get_write(r: Reader) -> WriteRecord:
    return WriteRecord(get_key(r), get_op(r))


# Mapping types


def put_vs(w: Writer, vs: VirtualServerId) -> None:
    w.u32(vs.partition_index)
    w.u8(vs.replica_slot)


def get_vs(r: Reader) -> VirtualServerId:
    return VirtualServerId(r.u32(), r.u8())


def put_chain(w: Writer, c: Chain) -> None:
    w.txn(c.txn_id)
    w.u64(c.config_version)
    w.u32(len(c.hops))
    for hop in c.hops:
        put_vs(w, hop.vs)
        w.text(hop.server)


def get_chain(r: Reader) -> Chain:
    txn_id, version = r.txn(), r.u64()
    hops = tuple(Hop(get_vs(r), r.text()) for _ in range(r.u32()))
    return Chain(txn_id, hops, version)


def put_configuration(w: Writer, c: Configuration) -> None:
    w.u64(c.version)
    w.u8(c.f)
    w.u32(len(c.partitions))
    for p in c.partitions:
        w.text(p.schema)
        w.raw(p.lower)
        _seq(w, p.replicas, Writer.text)
    w.u32(len(c.roster))
    for s in c.roster:
        w.text(s.server)
        w.flag(s.alive)


def get_configuration(r: Reader) -> Configuration:
    version, f = r.u64(), r.u8()
    partitions = tuple(Partition(r.text(), r.raw(), _read_seq(r, Reader.text)) for _ in range(r.u32()))
    roster = tuple(ServerStatus(r.text(), r.flag()) for _ in range(r.u32()))
    return Configuration(version, f, partitions, roster)


# Server state


def _put_opt_str(w: Writer, s: str | None) -> None:
    w.flag(s is not None)
    if s is not None:
        w.text(s)


def _get_opt_str(r: Reader) -> str | None:
    return r.text() if r.flag() else None


def put_applied_write(w: Writer, a: AppliedWrite) -> None:
    w.txn(a.txn_id)
    put_key(w, a.key)
    put_value(w, a.value)
    w.u64(a.version)
    put_token(w, a.token)


def get_applied_write(r: Reader) -> AppliedWrite:
    return AppliedWrite(r.txn(), get_key(r), get_value(r), r.u64(), get_token(r))


def _put_record(w: Writer, rec: ServerTxnRecord) -> None:
    put_payload(w, rec.payload)
    _seq(w, rec.reads, _put_read)
    _seq(w, rec.writes, _put_write)
    put_token(w, rec.token)
    put_chain(w, rec.chain)
    w.text(rec.client)
    w.text(rec.phase)
    w.u32(rec.retries)


def _get_record(r: Reader) -> ServerTxnRecord:
    payload = get_payload(r)
    return ServerTxnRecord(
        txn_id=payload.txn_id,
        payload=payload,
        reads=_read_seq(r, _get_read),
        writes=_read_seq(r, _get_write),
        token=_get_token_required(r),
        chain=get_chain(r),
        client=r.text(),
        phase=Phase(r.text()),
        retries=r.u32(),
    )


def put_snapshot(w: Writer, s: VirtualServerSnapshot) -> None:
    put_vs(w, s.vs)
    w.u32(len(s.keys))
    for key, ks in sorted(s.keys.items()):
        put_key(w, key)
        put_value(w, ks.value)
        w.u64(ks.version)
        put_token(w, ks.max_seen)
    _seq(w, [s.records[t] for t in sorted(s.records)], _put_record)
    w.u32(len(s.completions))
    for txn_id, entry in sorted(s.completions.items()):
        w.txn(txn_id)
        w.text(entry.outcome)
        put_token(w, entry.token)
        _put_opt_str(w, entry.reason)
        w.u32(entry.retries)
    w.u32(len(s.retired))
    for txn_id, token in sorted(s.retired.items()):
        w.txn(txn_id)
        put_token(w, token)


def get_snapshot(r: Reader) -> VirtualServerSnapshot:
    snap = VirtualServerSnapshot(get_vs(r))
    for _ in range(r.u32()):
        key = get_key(r)
        snap.keys[key] = KeyState(get_value(r), r.u64(), get_token(r))
    for rec in _read_seq(r, _get_record):
        snap.records[rec.txn_id] = rec
    for _ in range(r.u32()):
        txn_id, outcome, token = r.txn(), Outcome(r.text()), get_token(r)
        reason = _get_opt_str(r)
        snap.completions[txn_id] = CompletionEntry(
            outcome, token, AbortReason(reason) if reason else None, r.u32()
        )
    for _ in range(r.u32()):
        txn_id = r.txn()
        snap.retired[txn_id] = _get_token_required(r)
    return snap


# Messages

_TAGS: dict[type, int] = {
    Forward: 1,
    CommitBackward: 2,
    AbortBackward: 3,
    RetryBackward: 4,
    ClientReply: 5,
    WrongServer: 6,
    Read: 7,
    ReadReply: 8,
    StatusQuery: 9,
    StatusReply: 10,
    GetConfig: 11,
    ConfigResponse: 12,
    ReportFail: 13,
    Register: 14,
    SnapshotRequest: 15,
    SnapshotReply: 16,
    MiniPrepare: 17,
    MiniVote: 18,
    MiniDecide: 19,
    MiniAck: 20,
}


def put_message(w: Writer, m: Message) -> None:
    w.u8(_TAGS[type(m)])
    match m:
        case Forward():
            put_vs(w, m.vs)
            put_payload(w, m.payload)
            put_chain(w, m.chain)
            put_token(w, m.token)
            w.text(m.client)
            w.u32(m.retries)
        case CommitBackward():
            put_vs(w, m.vs)
            w.txn(m.txn_id)
            put_chain(w, m.chain)
            put_token(w, m.token)
            w.text(m.client)
            w.u32(m.retries)
        case AbortBackward():
            put_vs(w, m.vs)
            w.txn(m.txn_id)
            put_chain(w, m.chain)
            put_token(w, m.token)
            w.text(m.client)
            w.text(m.reason)
        case RetryBackward():
            put_vs(w, m.vs)
            w.txn(m.txn_id)
            put_chain(w, m.chain)
            put_token(w, m.token)
            w.text(m.client)
            put_token(w, m.floor)
        case ClientReply():
            w.txn(m.txn_id)
            w.text(m.outcome)
            _put_opt_str(w, m.reason)
            w.u32(m.retries)
            put_token(w, m.token)
        case WrongServer():
            w.u64(m.config_version)
            w.flag(m.txn_id is not None)
            if m.txn_id is not None:
                w.txn(m.txn_id)
        case Read():
            put_vs(w, m.vs)
            put_key(w, m.key)
        case ReadReply():
            put_key(w, m.key)
            put_value(w, m.value)
            w.u64(m.version)
        case StatusQuery():
            w.txn(m.txn_id)
        case StatusReply():
            w.txn(m.txn_id)
            w.text(m.status)
        case GetConfig():
            w.u64(m.min_version)
        case ConfigResponse():
            put_configuration(w, m.config)
        case ReportFail():
            w.text(m.server)
        case Register():
            w.text(m.server)
            w.text(m.address)
        case SnapshotRequest():
            w.u32(m.partition)
            w.text(m.requester)
        case SnapshotReply():
            w.u32(m.partition)
            w.raw(m.snapshot)
        case MiniPrepare():
            w.u32(m.partition)
            w.txn(m.txn_id)
            w.u32(len(m.reads))
            for key, version in m.reads:
                put_key(w, key)
                w.u64(version)
            w.u32(len(m.writes))
            for key, op in m.writes:
                put_key(w, key)
                put_op(w, op)
            w.text(m.client)
        case MiniVote():
            w.u32(m.partition)
            w.txn(m.txn_id)
            w.text(m.server)
            _put_opt_str(w, m.reason)
        case MiniDecide():
            w.u32(m.partition)
            w.txn(m.txn_id)
            w.text(m.outcome)
            w.text(m.client)
        case MiniAck():
            w.u32(m.partition)
            w.txn(m.txn_id)
            w.text(m.server)


def get_message(r: Reader) -> Message:
    match r.u8():
        case 1:
            return Forward(get_vs(r), get_payload(r), get_chain(r), get_token(r), r.text(), r.u32())
        case 2:
            return CommitBackward(get_vs(r), r.txn(), get_chain(r), _get_token_required(r), r.text(), r.u32())
        case 3:
            return AbortBackward(get_vs(r), r.txn(), get_chain(r), get_token(r), r.text(), AbortReason(r.text()))
        case 4:
            return RetryBackward(
                get_vs(r), r.txn(), get_chain(r), _get_token_required(r), r.text(), _get_token_required(r)
            )
        case 5:
            txn_id, outcome, reason = r.txn(), Outcome(r.text()), _get_opt_str(r)
            return ClientReply(txn_id, outcome, AbortReason(reason) if reason else None, r.u32(), get_token(r))
        case 6:
            version = r.u64()
            return WrongServer(version, r.txn() if r.flag() else None)
        case 7:
            return Read(get_vs(r), get_key(r))
        case 8:
            return ReadReply(get_key(r), get_value(r), r.u64())
        case 9:
            return StatusQuery(r.txn())
        case 10:
            return StatusReply(r.txn(), TxnStatus(r.text()))
        case 11:
            return GetConfig(r.u64())
        case 12:
            return ConfigResponse(get_configuration(r))
        case 13:
            return ReportFail(r.text())
        case 14:
            return Register(r.text(), r.text())
        case 15:
            return SnapshotRequest(r.u32(), r.text())
        case 16:
            return SnapshotReply(r.u32(), r.raw())
        case 17:
            partition, txn_id = r.u32(), r.txn()
            reads = tuple((get_key(r), r.u64()) for _ in range(r.u32()))
            writes = tuple((get_key(r), get_op(r)) for _ in range(r.u32()))
            return MiniPrepare(partition, txn_id, reads, writes, r.text())
        case 18:
            partition, txn_id, server, reason = r.u32(), r.txn(), r.text(), _get_opt_str(r)
            return MiniVote(partition, txn_id, server, AbortReason(reason) if reason else None)
        case 19:
            return MiniDecide(r.u32(), r.txn(), Outcome(r.text()), r.text())
        case 20:
            return MiniAck(r.u32(), r.txn(), r.text())
        case tag:
            raise CodecError(f"Unknown message tag {tag}")


# Public entry points


def encode_value(v: Value) -> bytes:
    return _versioned(lambda w: put_value(w, v))


def decode_value(data: bytes) -> Value:
    return _unversioned(data, get_value)


def encode_message(m: Message) -> bytes:
    return _versioned(lambda w: put_message(w, m))


def decode_message(data: bytes) -> Message:
    return _unversioned(data, get_message)


def encode_envelope(env: Envelope) -> bytes:
    def put(w: Writer) -> None:
        w.text(env.src)
        w.text(env.dst)
        w.u64(env.seq)
        put_message(w, env.body)

    return _versioned(put)


def decode_envelope(data: bytes) -> Envelope:
    return _unversioned(data, lambda r: Envelope(r.text(), r.text(), r.u64(), get_message(r)))


def encode_configuration(c: Configuration) -> bytes:
    return _versioned(lambda w: put_configuration(w, c))


def decode_configuration(data: bytes) -> Configuration:
    return _unversioned(data, get_configuration)


def encode_applied_write(a: AppliedWrite) -> bytes:
    return _versioned(lambda w: put_applied_write(w, a))


def decode_applied_write(data: bytes) -> AppliedWrite:
    return _unversioned(data, get_applied_write)


def encode_snapshot(s: VirtualServerSnapshot) -> bytes:
    return _versioned(lambda w: put_snapshot(w, s))


def decode_snapshot(data: bytes) -> VirtualServerSnapshot:
    return _unversioned(data, get_snapshot)


def frame(body: bytes) -> bytes:
    return FRAME_HEADER.pack(len(body)) + body


def read_frames(data: bytes) -> Iterator[bytes]:
    """Split a byte string into frame bodies, stopping quietly at a truncated final frame."""

    pos = 0
    while pos + FRAME_HEADER.size <= len(data):
        (length,) = FRAME_HEADER.unpack_from(data, pos)
        start = pos + FRAME_HEADER.size
        if start + length > len(data):
            return
        yield data[start : start + length]
        pos = start + length
