"""Per-rank sampler turning frame counters into metric snapshots.

Every ``sample_interval_us`` the probe reads each tracked counter and notes
whether it changed since the previous sample. The progress rate of a counter
is the reciprocal of the number of changes within the current window, so a
round that needs many small steps to move the same data reports a lower rate
than one that moves it in a few large steps.

Sampling is lazy: counters only change when the simulator writes them, so the
probe replays the samples it owes a round just before each write to that
round's block (and before every snapshot). The result is identical to polling
on the grid, at a fraction of the cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .errors import InsufficientDataError, InvalidConfigurationError, NoRoundError
from .trace_model import (
    MetricSnapshot,
    OperationDescriptor,
    ProbingFrame,
    TraceId,
    counter_word,
    require_round,
)


@dataclass(frozen=True)
class ProbeConfig:
    sample_interval_us: int = 1_000
    heartbeat_interval_us: int = 1_000_000
    rate_window_samples: int = 1_000

    def __post_init__(self):
        if self.sample_interval_us <= 0 or self.heartbeat_interval_us <= 0 or self.rate_window_samples <= 0:
            raise InvalidConfigurationError("probe intervals and window must be positive")
        if self.sample_interval_us > self.heartbeat_interval_us:
            raise InvalidConfigurationError("sample_interval_us must not exceed heartbeat_interval_us")


@dataclass
class RateAccumulator:
    """Counts value changes of one counter over a window of samples."""

    window_limit: int = 1_000
    last_value: int = 0
    change_count: int = 0
    window_samples: int = 0
    # change count of the most recent full window, if any
    previous_changes: Optional[int] = None

    def _roll(self) -> None:
        self.previous_changes = self.change_count
        self.change_count = 0
        self.window_samples = 0

    def sample(self, value: int) -> None:
        if self.window_samples == self.window_limit:
            self._roll()
        self.window_samples += 1
        if value != self.last_value:
            self.change_count += 1
            self.last_value = value

    def quiet(self, n: int) -> None:
        """Record ``n`` samples that all read ``last_value``."""
        while n > 0:
            if self.window_samples == self.window_limit:
                self._roll()
            take = min(n, self.window_limit - self.window_samples)
            self.window_samples += take
            n -= take

    def effective_changes(self) -> int:
        """Change count the rate is based on; 0 means stalled.

        A window that has just started and has not seen a change yet falls
        back to the previous full window, so a snapshot taken right after a
        roll is not mistaken for a stall.
        """
        if self.window_samples == 0 and self.previous_changes is None:
            raise InsufficientDataError("no samples in the rate window")
        if self.change_count:
            return self.change_count
        if self.window_samples == self.window_limit or self.previous_changes is None:
            return 0
        return self.previous_changes


_ZERO = Fraction(0)


def rate_of(changes: int) -> Fraction:
    return Fraction(1, changes) if changes else Fraction(0)


def current_rate(acc: RateAccumulator) -> Fraction:
    """1/changes for the current window; 0 when a full window saw no change."""
    return rate_of(acc.effective_changes())


def min_rate(accs) -> Fraction:
    """Smallest rate among accumulators: any stall wins, else the most changes."""
    counts = [a.effective_changes() for a in accs]
    return Fraction(0) if 0 in counts else Fraction(1, max(counts))


@dataclass
class _Track:
    frame: ProbingFrame
    block: int
    trace_id: TraceId
    descriptor: OperationDescriptor
    begin_us: int
    next_sample_us: int
    accs: list[RateAccumulator]
    enter_us: Optional[int] = None
    # set by writes; with both rates already 0 an unwritten track cannot change
    dirty: bool = True
    stalled_counts: Optional[tuple] = None


class Probe:
    """Sampler for one rank. Owns its accumulators exclusively."""

    def __init__(self, rank: int, config: Optional[ProbeConfig] = None):
        self.rank = rank
        self.config = config or ProbeConfig()
        self._tracks: dict[TraceId, _Track] = {}
        self._by_block: dict[tuple[int, int], TraceId] = {}

    # ---------------------------------------------------------- registration
    def begin(self, frame: ProbingFrame, trace_id: TraceId, descriptor: OperationDescriptor,
              block: int, now_us: int) -> None:
        """Start tracking a round whose block was just begun (the posting record)."""
        old = self._by_block.pop((id(frame), block), None)
        if old is not None:
            self._tracks.pop(old, None)
        interval = self.config.sample_interval_us
        n = 2 * frame.num_channels
        self._tracks[trace_id] = _Track(
            frame, block, trace_id, descriptor, now_us,
            (now_us // interval + 1) * interval,
            [RateAccumulator(self.config.rate_window_samples) for _ in range(n)],
        )
        self._by_block[(id(frame), block)] = trace_id

    def enter(self, trace_id: TraceId, now_us: int) -> None:
        track = self._tracks.get(trace_id)
        if track is not None:
            track.enter_us = now_us

    def release(self, comm_id: int) -> None:
        """Drop everything held for a communicator; unknown ids are a no-op."""
        for tid in [t for t in self._tracks if t.comm_id == comm_id]:
            track = self._tracks.pop(tid)
            self._by_block.pop((id(track.frame), track.block), None)

    @property
    def tracked(self) -> int:
        return len(self._tracks)

    # -------------------------------------------------------------- sampling
    def _catch_up(self, track: _Track, until_us: int, inclusive: bool) -> None:
        interval = self.config.sample_interval_us
        last = until_us if inclusive else until_us - 1
        if track.next_sample_us > last:
            return
        n = (last - track.next_sample_us) // interval + 1
        track.next_sample_us += n * interval
        words = track.frame.words
        base = counter_word(track.block)
        for i, acc in enumerate(track.accs):
            acc.sample(words[base + i])
            if n > 1:
                acc.quiet(n - 1)

    def before_write(self, trace_id: TraceId, now_us: int) -> None:
        """Take every sample due strictly before a write at ``now_us``."""
        track = self._tracks.get(trace_id)
        if track is not None:
            track.dirty = True
            self._catch_up(track, now_us, inclusive=False)

    def sample(self, now_us: int) -> None:
        """Take every sample due at or before ``now_us`` for all tracked rounds."""
        for track in self._tracks.values():
            self._catch_up(track, now_us, inclusive=True)

    # -------------------------------------------------------------- emission
    def emit_snapshot(self, frame: ProbingFrame, block: int, reason: str, now_us: int) -> MetricSnapshot:
        require_round(frame, block)
        tid = self._by_block.get((id(frame), block))
        if tid is None:
            raise NoRoundError(f"rank {self.rank} tracks no round in block {block}")
        return self._emit(self._tracks[tid], reason, now_us)

    def emit_for(self, trace_id: TraceId, reason: str, now_us: int) -> MetricSnapshot:
        track = self._tracks.get(trace_id)
        if track is None:
            raise NoRoundError(f"rank {self.rank} tracks no round {trace_id}")
        return self._emit(track, reason, now_us)

    def _emit(self, track: _Track, reason: str, now_us: int) -> MetricSnapshot:
        enter = track.enter_us if track.enter_us is not None else track.begin_us
        if reason == "heartbeat" and not track.dirty and track.stalled_counts is not None:
            # zero rates absorb further quiet samples; skip the catch-up
            return MetricSnapshot(self.rank, track.trace_id, track.descriptor, track.stalled_counts,
                                  _ZERO, _ZERO, enter, None, now_us - enter, reason)
        self._catch_up(track, now_us, inclusive=True)
        interval = self.config.sample_interval_us
        if reason == "completion" and now_us % interval:
            # final reading at the completion instant
            words = track.frame.words
            base = counter_word(track.block)
            for i, acc in enumerate(track.accs):
                acc.sample(words[base + i])
        base = counter_word(track.block)
        words = track.frame.words[base:base + len(track.accs)]
        counts = tuple(zip(words[0::2], words[1::2]))
        send_rate = min_rate(track.accs[0::2])
        recv_rate = min_rate(track.accs[1::2])
        track.dirty = False
        track.stalled_counts = counts if send_rate == 0 and recv_rate == 0 else None
        complete = now_us if reason == "completion" else None
        snap = MetricSnapshot(
            rank=self.rank,
            trace_id=track.trace_id,
            descriptor=track.descriptor,
            per_channel_counts=counts,
            send_rate=send_rate,
            recv_rate=recv_rate,
            enter_time_us=enter,
            complete_time_us=complete,
            duration_us=now_us - enter,
            reason=reason,
        )
        if reason == "completion":
            self._tracks.pop(track.trace_id, None)
            self._by_block.pop((id(track.frame), track.block), None)
        return snap

    def heartbeats(self, now_us: int) -> list[MetricSnapshot]:
        """Snapshots of every entered, unfinished round."""
        return [self._emit(t, "heartbeat", now_us)
                for t in list(self._tracks.values()) if t.enter_us is not None]


def sample(probe: Probe, now_us: int) -> None:
    probe.sample(now_us)


def emit_snapshot(probe: Probe, frame: ProbingFrame, block: int, reason: str, now_us: int) -> MetricSnapshot:
    return probe.emit_snapshot(frame, block, reason, now_us)


def release(probe: Probe, comm_id: int) -> None:
    probe.release(comm_id)


@dataclass
class ProbeHub:
    """Cluster observer wiring one probe per rank to a snapshot sink."""

    probes: dict[int, Probe]
    sink: Callable[[MetricSnapshot], None]
    config: ProbeConfig = field(default_factory=ProbeConfig)

    def before_write(self, rank, trace_id, now_us):
        self.probes[rank].before_write(trace_id, now_us)

    def on_begin(self, rank, frame, trace_id, descriptor, block, now_us):
        self.probes[rank].begin(frame, trace_id, descriptor, block, now_us)

    def on_enter(self, rank, trace_id, now_us):
        self.probes[rank].enter(trace_id, now_us)

    def on_complete(self, rank, trace_id, now_us):
        self.sink(self.probes[rank].emit_for(trace_id, "completion", now_us))

    def heartbeat(self, now_us: int) -> None:
        for rank in sorted(self.probes):
            probe = self.probes[rank]
            if probe.tracked:
                for snap in probe.heartbeats(now_us):
                    self.sink(snap)

    def release(self, comm_id: int) -> None:
        for p in self.probes.values():
            p.release(comm_id)


def attach_probes(cluster, sink: Callable[[MetricSnapshot], None],
                  config: Optional[ProbeConfig] = None) -> ProbeHub:
    config = config or ProbeConfig()
    hub = ProbeHub({r: Probe(r, config) for r in range(cluster.config.num_ranks)}, sink, config)
    cluster.observer = hub
    return hub
