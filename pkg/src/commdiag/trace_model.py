"""Diagnostic data structures: trace ids, probing frames and metric snapshots.

The probing frame is stored as a flat ``array('Q')`` of 148 little-endian
64-bit words, so its in-memory image *is* the 1,184-byte interchange layout::

    offset 0      header: op_counter, mode_flag, kernel_index, num_channels
    offset 32+144*b   block b:
        +0   trace id (comm_id u64, op_counter u32, extension u32)
        +16+16*c  channel c send_count (u64)
        +24+16*c  channel c recv_count (u64)

One writer (the kernel executor of the owning rank) updates single words; any
number of readers may copy the buffer concurrently. Word reads and writes are
atomic under the interpreter lock, which is all the readers rely on.
"""

from __future__ import annotations

import enum
import struct
import sys
from array import array
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

from .errors import (
    InvalidChannelError,
    InvalidConfigurationError,
    MalformedRecordError,
    NoRoundError,
    TraceDesyncError,
)

NUM_BLOCKS = 8
MAX_CHANNELS = 8
HEADER_SIZE = 32
BLOCK_SIZE = 144
BODY_SIZE = NUM_BLOCKS * BLOCK_SIZE
FRAME_SIZE = HEADER_SIZE + BODY_SIZE
TRACE_ID_SIZE = 16

_HEADER_WORDS = HEADER_SIZE // 8
_BLOCK_WORDS = BLOCK_SIZE // 8
_FRAME_WORDS = FRAME_SIZE // 8

_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF

# Extension-field status bits (our convention for the reserved bytes).
EXT_ENTERED = 0x1
EXT_COMPLETE = 0x2

_TRACE_ID = struct.Struct("<QII")


class OpName(str, enum.Enum):
    ALL_REDUCE = "AllReduce"
    ALL_GATHER = "AllGather"
    REDUCE_SCATTER = "ReduceScatter"
    ALL_TO_ALL = "AlltoAll"
    BROADCAST = "Broadcast"
    SEND = "Send"
    RECV = "Recv"


class Algorithm(str, enum.Enum):
    RING = "Ring"
    TREE = "Tree"


class Protocol(str, enum.Enum):
    SIMPLE = "Simple"
    LL = "LL"
    LL128 = "LL128"


class Direction(enum.IntEnum):
    SEND = 0
    RECV = 1


def parse_enum(cls, text: str):
    """Case-insensitive lookup of an enum member by value."""
    for member in cls:
        if member.value.lower() == text.lower():
            return member
    raise ValueError(f"unknown {cls.__name__}: {text!r}")


class TraceId(NamedTuple):
    comm_id: int
    op_counter: int
    extension: int = 0


class OperationDescriptor(NamedTuple):
    """Static per-round metadata (the operation type set)."""

    op_name: OpName
    algorithm: Algorithm
    protocol: Protocol
    data_size_bytes: int

    def validate(self) -> "OperationDescriptor":
        if self.data_size_bytes <= 0:
            raise InvalidConfigurationError("data_size_bytes must be positive")
        return self

    def is_barrier(self, barrier_size_bytes: int = 4) -> bool:
        return self.op_name == OpName.ALL_REDUCE and self.data_size_bytes <= barrier_size_bytes

    def __str__(self) -> str:
        return f"{self.op_name.value}/{self.algorithm.value}/{self.protocol.value}/{self.data_size_bytes}"


def make_trace_id(comm_id: int, op_counter: int, extension: int = 0) -> TraceId:
    return TraceId(comm_id & _U64, op_counter & _U32, extension & _U32)


def encode_trace_id(t: TraceId) -> bytes:
    return _TRACE_ID.pack(t.comm_id, t.op_counter, t.extension)


def decode_trace_id(data: bytes) -> TraceId:
    if len(data) != TRACE_ID_SIZE:
        raise MalformedRecordError(f"trace id needs {TRACE_ID_SIZE} bytes, got {len(data)}")
    return TraceId(*_TRACE_ID.unpack(data))


def block_index(op_counter: int, num_blocks: int = NUM_BLOCKS) -> int:
    if num_blocks <= 0:
        raise InvalidConfigurationError("num_blocks must be positive")
    return op_counter % num_blocks


class BlockHandle(NamedTuple):
    frame: "ProbingFrame"
    block: int


class ProbingFrame:
    """Per-rank reusable counter record; see the module docstring for layout."""

    __slots__ = ("words",)

    def __init__(self, num_channels: int = MAX_CHANNELS, enabled: bool = True):
        if not 1 <= num_channels <= MAX_CHANNELS:
            raise InvalidConfigurationError(f"num_channels must be in 1..{MAX_CHANNELS}")
        self.words = array("Q", bytes(FRAME_SIZE))
        self.words[1] = 1 if enabled else 0
        self.words[3] = num_channels

    # header fields
    @property
    def op_counter(self) -> int:
        return self.words[0]

    @property
    def mode_flag(self) -> int:
        return self.words[1]

    @mode_flag.setter
    def mode_flag(self, value: int) -> None:
        self.words[1] = value

    @property
    def kernel_index(self) -> int:
        return self.words[2]

    @property
    def num_channels(self) -> int:
        return self.words[3]

    @staticmethod
    def _base(block: int) -> int:
        return _HEADER_WORDS + block * _BLOCK_WORDS

    def block_trace_id(self, block: int) -> TraceId:
        base = self._base(block)
        packed = self.words[base + 1]
        return TraceId(self.words[base], packed & _U32, packed >> 32)

    def set_status(self, block: int, bits: int) -> None:
        self.words[self._base(block) + 1] |= (bits & _U32) << 32

    def begin_round(self, trace_id: TraceId) -> BlockHandle:
        expected = self.words[0]
        if trace_id.op_counter != expected & _U32:
            raise TraceDesyncError(
                f"frame expects round {expected}, got {trace_id.op_counter}"
            )
        block = block_index(expected)
        base = self._base(block)
        w = self.words
        # trace id first, then zero the counters of the reused block
        w[base] = trace_id.comm_id
        w[base + 1] = trace_id.op_counter | (trace_id.extension << 32)
        for i in range(base + 2, base + _BLOCK_WORDS):
            w[i] = 0
        w[0] = expected + 1
        w[2] = block_index(expected + 1)
        return BlockHandle(self, block)

    def record(self, block: int, channel: int, direction: int, delta: int = 1) -> None:
        w = self.words
        if not 0 <= channel < w[3]:
            raise InvalidChannelError(f"channel {channel} outside 0..{w[3] - 1}")
        if w[1]:
            w[_HEADER_WORDS + block * _BLOCK_WORDS + 2 + 2 * channel + direction] += delta

    def read_block(self, block: int) -> tuple[TraceId, tuple[tuple[int, int], ...]]:
        if not 0 <= block < NUM_BLOCKS:
            raise IndexError(f"block {block} outside 0..{NUM_BLOCKS - 1}")
        base = self._base(block)
        snap = self.words[base:base + _BLOCK_WORDS]
        n = self.words[3]
        tid = TraceId(snap[0], snap[1] & _U32, snap[1] >> 32)
        counts = tuple((snap[2 + 2 * c], snap[3 + 2 * c]) for c in range(n))
        return tid, counts

    def channel_value(self, block: int, channel: int, direction: int) -> int:
        return self.words[_HEADER_WORDS + block * _BLOCK_WORDS + 2 + 2 * channel + direction]

    def to_bytes(self) -> bytes:
        if sys.byteorder == "little":
            return self.words.tobytes()
        swapped = array("Q", self.words)
        swapped.byteswap()
        return swapped.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProbingFrame":
        if len(data) != FRAME_SIZE:
            raise MalformedRecordError(f"frame needs {FRAME_SIZE} bytes, got {len(data)}")
        frame = cls.__new__(cls)
        frame.words = array("Q")
        frame.words.frombytes(bytes(data))
        if sys.byteorder != "little":
            frame.words.byteswap()
        return frame

    def __eq__(self, other) -> bool:
        return isinstance(other, ProbingFrame) and self.words == other.words

    def __repr__(self) -> str:
        return (f"ProbingFrame(op_counter={self.op_counter}, kernel_index={self.kernel_index}, "
                f"num_channels={self.num_channels}, mode_flag={self.mode_flag})")


def counter_word(block: int, channel: int = 0, direction: int = 0) -> int:
    """Index into ``ProbingFrame.words`` of one channel counter."""
    return _HEADER_WORDS + block * _BLOCK_WORDS + 2 + 2 * channel + direction


def frame_begin_round(frame: ProbingFrame, trace_id: TraceId) -> BlockHandle:
    return frame.begin_round(trace_id)


def frame_record(handle: BlockHandle, channel: int, direction: int, delta: int = 1) -> None:
    handle.frame.record(handle.block, channel, direction, delta)


def frame_read_block(frame: ProbingFrame, block: int):
    return frame.read_block(block)


def encode_frame(frame: ProbingFrame) -> bytes:
    return frame.to_bytes()


def decode_frame(data: bytes) -> ProbingFrame:
    return ProbingFrame.from_bytes(data)


@dataclass(frozen=True)
class MetricSnapshot:
    """One rank's measurement of one round, handed from probe to collector."""

    rank: int
    trace_id: TraceId
    descriptor: OperationDescriptor
    per_channel_counts: tuple[tuple[int, int], ...]
    send_rate: Fraction
    recv_rate: Fraction
    enter_time_us: int
    complete_time_us: Optional[int]
    duration_us: int
    reason: str = "completion"

    def __post_init__(self):
        if self.complete_time_us is not None and self.complete_time_us < self.enter_time_us:
            raise MalformedRecordError("completion precedes entry")
        if self.reason not in ("completion", "heartbeat"):
            raise MalformedRecordError(f"unknown snapshot reason {self.reason!r}")

    @property
    def completed(self) -> bool:
        return self.complete_time_us is not None

    @property
    def emitted_at_us(self) -> int:
        return self.enter_time_us + self.duration_us

    @property
    def send_total(self) -> int:
        return sum(s for s, _ in self.per_channel_counts)

    @property
    def recv_total(self) -> int:
        return sum(r for _, r in self.per_channel_counts)

    @property
    def total_count(self) -> int:
        return self.send_total + self.recv_total


def require_round(frame: ProbingFrame, block: int) -> TraceId:
    """Return the trace id of a begun block, or raise if it was never begun."""
    if not 0 <= block < min(frame.op_counter, NUM_BLOCKS):
        raise NoRoundError(f"block {block} holds no round")
    return frame.block_trace_id(block)
