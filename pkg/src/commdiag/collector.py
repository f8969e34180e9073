"""Snapshot transport and persistence between probes and the analyzer.

Records travel as single text lines so a trace is both the wire format and
the on-disk format::

    1 RANK COMM ROUND REASON ENTER_US COMPLETE_US|- DUR_US SRATE RRATE ch0s ch0r ... OP ALGO PROTO BYTES

Rates are exact fractions ``num/den``. Communicator lifecycle events use the
same envelope with a keyword in the second field::

    1 comm ID ALGO CREATED_US MEMBERS
    1 release ID AT_US
    1 end END_US
    1 config KEY=VAL ...
"""

from __future__ import annotations

import os
import threading
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Union

from .errors import DiagError, MalformedRecordError, SchemaMismatchError
from .sim.scenario import CommDecl, CommRelease, parse_members
from .trace_model import Algorithm, MetricSnapshot, OperationDescriptor, OpName, Protocol, TraceId, parse_enum

SCHEMA_VERSION = 1

_FIXED = 10  # v rank comm round reason enter complete dur srate rrate
_DESC = 4


@dataclass(frozen=True)
class SnapshotRecord:
    """A snapshot in its transport envelope."""

    snapshot: MetricSnapshot
    schema_version: int = SCHEMA_VERSION

    @property
    def emitted_at_us(self) -> int:
        return self.snapshot.emitted_at_us


@dataclass(frozen=True)
class StreamEnd:
    """Simulated time the recorded run stopped at."""

    end_us: int


@dataclass(frozen=True)
class TraceConfig:
    """Configuration overrides the recorded run was diagnosed with."""

    items: tuple[tuple[str, str], ...] = ()

    @classmethod
    def of(cls, mapping: dict[str, str]) -> "TraceConfig":
        return cls(tuple(sorted(mapping.items())))


Item = Union[SnapshotRecord, CommDecl, CommRelease, StreamEnd, TraceConfig]


# ------------------------------------------------------------------ encoding
def _frac(text: str) -> Fraction:
    num, sep, den = text.partition("/")
    if not sep:
        raise MalformedRecordError(f"rate {text!r} is not num/den")
    value = Fraction(int(num), int(den))
    if not 0 <= value <= 1:
        raise MalformedRecordError(f"rate {text!r} out of [0, 1]")
    return value


def _fmt_frac(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def _fmt_round(tid: TraceId) -> str:
    return f"{tid.op_counter}:{tid.extension}" if tid.extension else str(tid.op_counter)


def encode(item) -> str:
    """One line, without the trailing newline."""
    if isinstance(item, SnapshotRecord):
        item = item.snapshot
    if isinstance(item, MetricSnapshot):
        s = item
        d = s.descriptor
        fields = [
            SCHEMA_VERSION, s.rank, s.trace_id.comm_id, _fmt_round(s.trace_id), s.reason,
            s.enter_time_us, "-" if s.complete_time_us is None else s.complete_time_us,
            s.duration_us, _fmt_frac(s.send_rate), _fmt_frac(s.recv_rate),
        ]
        for send, recv in s.per_channel_counts:
            fields += [send, recv]
        fields += [d.op_name.value, d.algorithm.value, d.protocol.value, d.data_size_bytes]
        return " ".join(map(str, fields))
    if isinstance(item, CommDecl):
        members = ",".join(map(str, item.members))
        return f"{SCHEMA_VERSION} comm {item.comm_id} {item.algorithm.value} {item.created_us} {members}"
    if isinstance(item, CommRelease):
        return f"{SCHEMA_VERSION} release {item.comm_id} {item.at_us}"
    if isinstance(item, StreamEnd):
        return f"{SCHEMA_VERSION} end {item.end_us}"
    if isinstance(item, TraceConfig):
        for k, v in item.items:
            if not k or "=" in k or any(c.isspace() for c in k + v):
                raise MalformedRecordError(f"config entry {k}={v} cannot be encoded")
        return " ".join([f"{SCHEMA_VERSION} config"] + [f"{k}={v}" for k, v in item.items])
    raise MalformedRecordError(f"cannot encode {type(item).__name__}")


def decode(line: str) -> Item:
    """Parse one line; raises SchemaMismatchError or MalformedRecordError."""
    words = line.split()
    if not words:
        raise MalformedRecordError("empty record")
    try:
        version = int(words[0])
    except ValueError:
        raise MalformedRecordError(f"bad schema version {words[0]!r}") from None
    if version != SCHEMA_VERSION:
        raise SchemaMismatchError(f"schema version {version}, expected {SCHEMA_VERSION}")
    try:
        return _decode_body(words)
    except MalformedRecordError:
        raise
    except (DiagError, ValueError, IndexError) as e:
        raise MalformedRecordError(f"{e}: {line.strip()[:80]!r}") from None


def _decode_body(words: list[str]) -> Item:
    kind = words[1]
    if kind == "comm":
        if len(words) != 6:
            raise MalformedRecordError("comm record has 6 fields")
        return CommDecl(int(words[2]), parse_enum(Algorithm, words[3]), parse_members(0, words[5]), int(words[4]))
    if kind == "release":
        if len(words) != 4:
            raise MalformedRecordError("release record has 4 fields")
        return CommRelease(int(words[2]), int(words[3]))
    if kind == "end":
        if len(words) != 3:
            raise MalformedRecordError("end record has 3 fields")
        return StreamEnd(int(words[2]))
    if kind == "config":
        pairs = [w.split("=", 1) for w in words[2:]]
        if any(len(p) != 2 for p in pairs):
            raise MalformedRecordError("config entries are KEY=VAL")
        return TraceConfig(tuple((k, v) for k, v in pairs))
    counts = words[_FIXED:-_DESC]
    if len(words) < _FIXED + 2 + _DESC or len(counts) % 2:
        raise MalformedRecordError(f"snapshot record has {len(words)} fields")
    rnd, _, ext = words[3].partition(":")
    op, algo, proto, size = words[-_DESC:]
    desc = OperationDescriptor(parse_enum(OpName, op), parse_enum(Algorithm, algo),
                               parse_enum(Protocol, proto), int(size)).validate()
    nums = [int(c) for c in counts]
    if min(nums) < 0:
        raise MalformedRecordError("negative counter")
    snap = MetricSnapshot(
        rank=int(words[1]),
        trace_id=TraceId(int(words[2]), int(rnd), int(ext) if ext else 0),
        descriptor=desc,
        per_channel_counts=tuple(zip(nums[0::2], nums[1::2])),
        send_rate=_frac(words[8]),
        recv_rate=_frac(words[9]),
        enter_time_us=int(words[5]),
        complete_time_us=None if words[6] == "-" else int(words[6]),
        duration_us=int(words[7]),
        reason=words[4],
    )
    if snap.duration_us < 0 or (snap.completed and snap.complete_time_us != snap.emitted_at_us):
        raise MalformedRecordError("duration disagrees with timestamps")
    return SnapshotRecord(snap)


# ----------------------------------------------------------------- collector
class Collector:
    """In-process collector: lossless ingest log plus per-communicator buffers.

    Producers may call ``ingest`` from any thread. The log keeps every
    well-formed record in arrival order and is what gets persisted. The
    per-communicator buffers hold records not yet handed to a consumer,
    with repeated (rank, trace_id, reason) records collapsed to the latest.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._log: list[Item] = []
        self._pending: dict[int, dict[tuple, SnapshotRecord]] = defaultdict(dict)
        self.parse_errors = 0

    def ingest(self, record) -> bool:
        """Accept a record, snapshot, lifecycle item or wire line.

        Malformed input is counted in ``parse_errors`` and dropped.
        """
        try:
            item = self._coerce(record)
        except (DiagError, ValueError, TypeError, AttributeError):
            with self._lock:
                self.parse_errors += 1
            return False
        with self._lock:
            self._log.append(item)
            if isinstance(item, SnapshotRecord):
                s = item.snapshot
                buf = self._pending[s.trace_id.comm_id]
                key = (s.rank, s.trace_id, s.reason)
                # re-insert so the buffer reflects arrival order of the freshest copy
                buf.pop(key, None)
                buf[key] = item
        return True

    @staticmethod
    def _coerce(record) -> Item:
        if isinstance(record, str):
            return decode(record)
        if isinstance(record, MetricSnapshot):
            return SnapshotRecord(record)
        if isinstance(record, SnapshotRecord):
            if record.schema_version != SCHEMA_VERSION:
                raise SchemaMismatchError(f"schema version {record.schema_version}")
            if not isinstance(record.snapshot, MetricSnapshot):
                raise MalformedRecordError("record carries no snapshot")
            return record
        if isinstance(record, (CommDecl, CommRelease, StreamEnd, TraceConfig)):
            return record
        raise MalformedRecordError(f"unsupported record type {type(record).__name__}")

    def ingest_all(self, records: Iterable) -> int:
        return sum(self.ingest(r) for r in records)

    def __len__(self) -> int:
        return len(self._log)

    # ----------------------------------------------------------- consumers
    def buffer(self, comm_id: int) -> list[SnapshotRecord]:
        """Pending records of one communicator, ordered by (emission time, rank)."""
        with self._lock:
            items = list(self._pending.get(comm_id, {}).values())
        return sorted(items, key=lambda r: (r.emitted_at_us, r.snapshot.rank))

    def drain(self, comm_id: int) -> list[SnapshotRecord]:
        """Hand the pending batch of one communicator to a consumer."""
        batch = self.buffer(comm_id)
        with self._lock:
            self._pending.pop(comm_id, None)
        return batch

    def records(self) -> list[Item]:
        with self._lock:
            return list(self._log)

    def stream(self) -> Iterator:
        """Analyzer input: lifecycle items and bare snapshots in ingest order."""
        for item in self.records():
            if isinstance(item, SnapshotRecord):
                yield item.snapshot
            elif isinstance(item, (CommDecl, CommRelease)):
                yield item

    @property
    def end_us(self) -> Optional[int]:
        ends = [i.end_us for i in self.records() if isinstance(i, StreamEnd)]
        return ends[-1] if ends else None

    @property
    def config(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for item in self.records():
            if isinstance(item, TraceConfig):
                out.update(item.items)
        return out

    def query(self, comm_id: int, first_round: int = 0, last_round: Optional[int] = None) -> list[SnapshotRecord]:
        """Snapshot records of a communicator with round in [first, last], in ingest order."""
        out = []
        for item in self.records():
            if isinstance(item, SnapshotRecord):
                tid = item.snapshot.trace_id
                if tid.comm_id == comm_id and tid.op_counter >= first_round and (
                        last_round is None or tid.op_counter <= last_round):
                    out.append(item)
        return out

    # --------------------------------------------------------- persistence
    def persist(self, path) -> int:
        """Write the ingest log one record per line; returns the record count."""
        items = self.records()
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "w", encoding="ascii") as f:
            for item in items:
                f.write(encode(item))
                f.write("\n")
        os.replace(tmp, path)
        return len(items)


def load(path) -> Iterator[Item]:
    """Records of a persisted trace in their original ingest order.

    Raises OSError for unreadable files, SchemaMismatchError for foreign
    versions and MalformedRecordError (with the line number) for damage.
    """
    with open(path, encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield decode(line)
            except MalformedRecordError as e:
                raise MalformedRecordError(f"line {lineno}: {e}") from None


def load_collector(path) -> Collector:
    c = Collector()
    for item in load(path):
        c.ingest(item)
    return c


def persist(items: Iterable, path) -> int:
    c = Collector()
    c.ingest_all(items)
    return c.persist(path)
