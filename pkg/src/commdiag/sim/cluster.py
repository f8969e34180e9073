"""Deterministic discrete-event simulator of multi-rank collectives.

Each posted round is decomposed into point-to-point transfers (see
:mod:`commdiag.sim.plan`). A transfer streams its units in batches; a batch is
recorded as a send on the source frame when it leaves and as a receive on the
destination frame one hop latency later. The sender's transfer is finished
when the last batch is acknowledged, one more hop later.

Events are ordered by ``(time, rank, channel, seq)`` so a run is a pure
function of configuration, script and seed.
"""

from __future__ import annotations

import enum
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Optional, Protocol as TypingProtocol, Sequence, Union

from ..errors import InvalidConfigurationError, TraceDesyncError
from ..trace_model import (
    EXT_COMPLETE,
    EXT_ENTERED,
    MAX_CHANNELS,
    NUM_BLOCKS,
    Algorithm,
    Direction,
    OperationDescriptor,
    ProbingFrame,
    TraceId,
    make_trace_id,
)
from .plan import Plan, binary_tree_layers, decompose_op, unit_wire_bytes

SEND = int(Direction.SEND)
RECV = int(Direction.RECV)


class FaultKind(str, enum.Enum):
    NOT_ENTERED_HANG = "NotEnteredHang"
    INCONSISTENT_HANG = "InconsistentHang"
    HARDWARE_FAULT = "HardwareFault"
    COMP_SLOW = "CompSlow"
    COMM_SLOW = "CommSlow"
    MIXED_SLOW = "MixedSlow"

    @property
    def is_hang(self) -> bool:
        return self in (FaultKind.NOT_ENTERED_HANG, FaultKind.INCONSISTENT_HANG, FaultKind.HARDWARE_FAULT)


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    victim: int
    trigger_round: int
    entry_delay_us: int = 0
    bandwidth_factor: float = 1.0
    freeze_after_fraction: float = 0.5
    substitute: Optional[OperationDescriptor] = None
    comm_id: Optional[int] = None
    # slow faults stay active for rounds in [trigger_round, until_round)
    until_round: Optional[int] = None

    def __post_init__(self):
        k = self.kind
        if k in (FaultKind.COMM_SLOW, FaultKind.MIXED_SLOW) and not 0 < self.bandwidth_factor < 1:
            raise InvalidConfigurationError("bandwidth_factor must lie in (0, 1)")
        if k in (FaultKind.COMP_SLOW, FaultKind.MIXED_SLOW) and self.entry_delay_us <= 0:
            raise InvalidConfigurationError("entry_delay_us must be positive")
        if k == FaultKind.HARDWARE_FAULT and not 0 <= self.freeze_after_fraction < 1:
            raise InvalidConfigurationError("freeze_after_fraction must lie in [0, 1)")
        if k == FaultKind.INCONSISTENT_HANG and self.substitute is None:
            raise InvalidConfigurationError("InconsistentHang needs a substitute descriptor")

    def applies(self, comm_id: int, round_: int) -> bool:
        if self.comm_id is not None and self.comm_id != comm_id:
            return False
        if self.kind == FaultKind.NOT_ENTERED_HANG:
            return round_ >= self.trigger_round
        if self.kind.is_hang:
            return round_ == self.trigger_round
        return round_ >= self.trigger_round and (self.until_round is None or round_ < self.until_round)


@dataclass
class ClusterConfig:
    num_ranks: int
    channels_per_rank: int = 1
    # scalar, or one entry per rank (scalar or per-channel list)
    link_bandwidth_bytes_per_us: Union[float, Sequence] = 2000.0
    base_latency_us: int = 5
    seed: int = 0
    dispatch_jitter_us: int = 0
    batch_us: int = 250
    measurement_enabled: bool = True
    record_trace: bool = True

    def validate(self) -> "ClusterConfig":
        if self.num_ranks < 1:
            raise InvalidConfigurationError("num_ranks must be positive")
        if not 1 <= self.channels_per_rank <= MAX_CHANNELS:
            raise InvalidConfigurationError(f"channels_per_rank must be in 1..{MAX_CHANNELS}")
        if self.base_latency_us < 0 or self.dispatch_jitter_us < 0 or self.batch_us <= 0:
            raise InvalidConfigurationError("latency/jitter must be >= 0 and batch_us > 0")
        for r in range(self.num_ranks):
            for c in range(self.channels_per_rank):
                if self.bandwidth(r, c) <= 0:
                    raise InvalidConfigurationError("bandwidths must be positive")
        return self

    @property
    def hop_us(self) -> int:
        """One network hop; never free, so a zero latency still orders events."""
        return max(1, self.base_latency_us)

    def bandwidth(self, rank: int, channel: int) -> float:
        bw = self.link_bandwidth_bytes_per_us
        if isinstance(bw, (int, float)):
            return float(bw)
        per_rank = bw[rank]
        if isinstance(per_rank, (int, float)):
            return float(per_rank)
        return float(per_rank[channel])


@dataclass
class Communicator:
    id: int
    members: tuple[int, ...]
    algorithm: Algorithm
    tree_layers: Optional[dict[int, int]] = None
    next_round: int = 0

    def successor(self) -> dict[int, int]:
        m = self.members
        return {m[i]: m[(i + 1) % len(m)] for i in range(len(m))}

    def predecessor(self) -> dict[int, int]:
        m = self.members
        return {m[i]: m[i - 1] for i in range(len(m))}


@dataclass(frozen=True)
class Completion:
    time_us: int
    rank: int
    comm_id: int
    round: int


class ClusterObserver(TypingProtocol):
    def before_write(self, rank: int, trace_id: TraceId, now_us: int) -> None: ...
    def on_begin(self, rank: int, frame: ProbingFrame, trace_id: TraceId,
                 descriptor: OperationDescriptor, block: int, now_us: int) -> None: ...
    def on_enter(self, rank: int, trace_id: TraceId, now_us: int) -> None: ...
    def on_complete(self, rank: int, trace_id: TraceId, now_us: int) -> None: ...


# event kinds
_ENTER, _SEND, _RECV, _DONE, _SOLO = range(5)


@dataclass
class _RankState:
    frame: ProbingFrame
    block: int
    trace_id: TraceId
    descriptor: OperationDescriptor
    ready_us: int = 0
    entered_us: Optional[int] = None
    complete_us: Optional[int] = None
    pending: int = 0
    frozen: bool = False
    solo: bool = False
    bw_factor: float = 1.0
    freeze_limit: Optional[int] = None
    sent_units: int = 0
    done_us: int = 0


class _PlanIndex:
    """Static lookups derived from a plan; shared by every round that uses it."""

    def __init__(self, plan: Plan):
        self.plan = plan
        n = len(plan.transfers)
        self.deps_left = [len(t.deps) + len(t.credits) for t in plan.transfers]
        self.dependents: list[list[int]] = [[] for _ in range(n)]
        self.creditors: list[list[int]] = [[] for _ in range(n)]
        self.senders_to: dict[int, set[tuple[int, int]]] = {r: set() for r in plan.members}
        for t in plan.transfers:
            for d in t.deps:
                self.dependents[d].append(t.index)
            for c in t.credits:
                self.creditors[c].append(t.index)
            self.senders_to[t.dst].add((t.src, t.channel))
        self.parts = {r: len(plan.recvs[r]) + sum(len(o) for o in plan.send_order[r]) for r in plan.members}


class _RoundRun:
    """Execution state of one round of one communicator."""

    def __init__(self, comm: Communicator, round_: int, index: _PlanIndex):
        self.comm = comm
        self.round = round_
        self.index = index
        plan = self.plan = index.plan
        n = len(plan.transfers)
        self.deps_left = list(index.deps_left)
        self.dependents = index.dependents
        self.creditors = index.creditors
        self.senders_to = index.senders_to
        self.sent = [0] * n
        self.recvd = [0] * n
        self.started = [None] * n  # (t0, us_per_unit, batch_units)
        self.ptr = {r: [0] * plan.channels for r in plan.members}
        self.busy = {r: [False] * plan.channels for r in plan.members}
        self.ranks: dict[int, _RankState] = {}
        self.solo_left: dict[int, list[list[int]]] = {}


class Cluster:
    def __init__(self, config: ClusterConfig):
        self.config = config.validate()
        # one frame per rank, bound to the first communicator the rank joins;
        # a rank in further communicators gets one extra frame for each
        self.frames = [ProbingFrame(config.channels_per_rank, config.measurement_enabled)
                       for _ in range(config.num_ranks)]
        self._frame_owner: dict[int, int] = {}
        self._extra_frames: dict[tuple[int, int], ProbingFrame] = {}
        self.now_us = 0
        self.comms: dict[int, Communicator] = {}
        self.faults: list[FaultSpec] = []
        self.trace: list[tuple] = []
        self.observer: Optional[ClusterObserver] = None
        self._rng = random.Random(config.seed)
        self._queue: list[tuple] = []
        self._seq = 0
        self._completions: list[Completion] = []
        # (rank, comm) -> [active run or None, deque of queued runs]
        self._streams: dict[tuple[int, int], list] = {}
        self._suppressed: set[tuple[int, int]] = set()
        self.active_runs: dict[tuple[int, int], _RoundRun] = {}
        self._plans: dict[tuple, _PlanIndex] = {}
        self._bw = [[config.bandwidth(r, c) for c in range(config.channels_per_rank)]
                    for r in range(config.num_ranks)]

    # ------------------------------------------------------------------ setup
    def create_communicator(self, members, algorithm: Algorithm, comm_id: Optional[int] = None) -> Communicator:
        members = tuple(int(m) for m in members)
        if len(members) < 2:
            raise InvalidConfigurationError("a communicator needs at least two ranks")
        if len(set(members)) != len(members):
            raise InvalidConfigurationError("duplicate communicator member")
        if any(not 0 <= m < self.config.num_ranks for m in members):
            raise InvalidConfigurationError("member outside the cluster")
        if comm_id is None:
            comm_id = max(self.comms, default=0) + 1
        if comm_id in self.comms:
            raise InvalidConfigurationError(f"communicator {comm_id} already exists")
        layers = binary_tree_layers(members) if algorithm == Algorithm.TREE else None
        comm = Communicator(comm_id, members, algorithm, layers)
        self.comms[comm_id] = comm
        return comm

    def destroy_communicator(self, comm_id: int) -> None:
        comm = self.comms.pop(comm_id, None)
        if comm is None:
            return
        for r in comm.members:
            self._extra_frames.pop((r, comm_id), None)

    def frame_for(self, rank: int, comm_id: int) -> ProbingFrame:
        owner = self._frame_owner.setdefault(rank, comm_id)
        if owner == comm_id:
            return self.frames[rank]
        key = (rank, comm_id)
        frame = self._extra_frames.get(key)
        if frame is None:
            frame = ProbingFrame(self.config.channels_per_rank, self.config.measurement_enabled)
            self._extra_frames[key] = frame
        return frame

    def add_fault(self, fault: FaultSpec) -> None:
        if not 0 <= fault.victim < self.config.num_ranks:
            raise InvalidConfigurationError("fault victim outside the cluster")
        self.faults.append(fault)

    def _log(self, t, rank, ch, event, detail):
        if self.config.record_trace:
            self.trace.append((t, rank, ch, event, detail))

    def _push(self, t, rank, ch, kind, run, a=0, b=0):
        self._seq += 1
        heapq.heappush(self._queue, (t, rank, ch, self._seq, kind, run, a, b))

    # ------------------------------------------------------------------ posting
    def post_collective(self, comm: Communicator, descriptor: OperationDescriptor, round_: int) -> None:
        if round_ != comm.next_round:
            raise TraceDesyncError(f"communicator {comm.id} expects round {comm.next_round}, got {round_}")
        descriptor.validate()
        index = self._plan_index(descriptor, comm)
        plan = index.plan
        run = _RoundRun(comm, round_, index)
        faults = [f for f in self.faults if f.applies(comm.id, round_) and f.victim in comm.members]
        tid = make_trace_id(comm.id, round_, 0)
        now = self.now_us
        for rank in comm.members:
            mine = [f for f in faults if f.victim == rank]
            kinds = {f.kind for f in mine}
            if FaultKind.NOT_ENTERED_HANG in kinds or (rank, comm.id) in self._suppressed:
                self._suppressed.add((rank, comm.id))
                self._log(now, rank, 0, "suppress", (comm.id, round_))
                continue
            desc = descriptor
            for f in mine:
                if f.kind == FaultKind.INCONSISTENT_HANG:
                    desc = f.substitute
            st = _RankState(self.frame_for(rank, comm.id), -1, tid, desc)
            delay = self._rng.randint(0, self.config.dispatch_jitter_us) if self.config.dispatch_jitter_us else 0
            for f in mine:
                if f.kind in (FaultKind.COMP_SLOW, FaultKind.MIXED_SLOW):
                    delay += f.entry_delay_us
                if f.kind in (FaultKind.COMM_SLOW, FaultKind.MIXED_SLOW):
                    st.bw_factor *= f.bandwidth_factor
                if f.kind == FaultKind.HARDWARE_FAULT:
                    st.freeze_limit = math.floor(f.freeze_after_fraction * plan.send_units(rank))
                if f.kind == FaultKind.INCONSISTENT_HANG:
                    st.solo = True
            st.ready_us = now + delay
            run.ranks[rank] = st
            stream = self._streams.setdefault((rank, comm.id), [None, deque(), deque()])
            open_rounds = (stream[0] is not None) + len(stream[1])
            if open_rounds >= NUM_BLOCKS:
                # every block still holds an unfinished round: the host waits
                stream[2].append(run)
            else:
                self._begin(run, rank, now)
        comm.next_round += 1
        self.active_runs[(comm.id, round_)] = run

    def _plan_index(self, descriptor: OperationDescriptor, comm: Communicator) -> _PlanIndex:
        key = (descriptor, comm.members, comm.algorithm)
        index = self._plans.get(key)
        if index is None:
            plan = decompose_op(descriptor, comm.members, comm.algorithm, self.config.channels_per_rank)
            index = self._plans[key] = _PlanIndex(plan)
        return index

    def _begin(self, run: _RoundRun, rank: int, now: int) -> None:
        st = run.ranks[rank]
        st.block = st.frame.begin_round(st.trace_id).block
        self._log(now, rank, 0, "post", (run.comm.id, run.round, str(st.descriptor)))
        if self.observer is not None:
            self.observer.on_begin(rank, st.frame, st.trace_id, st.descriptor, st.block, now)
        stream = self._streams[(rank, run.comm.id)]
        if stream[0] is None:
            stream[0] = run
            self._push(max(now, st.ready_us), rank, 0, _ENTER, run)
        else:
            stream[1].append(run)

    # ------------------------------------------------------------------ engine
    def advance(self, until_us: int) -> list[Completion]:
        if until_us < self.now_us:
            raise InvalidConfigurationError("cannot advance into the past")
        q = self._queue
        self._completions = []
        while q and q[0][0] <= until_us:
            t, rank, ch, _, kind, run, a, b = heapq.heappop(q)
            self.now_us = t
            if kind == _SEND:
                self._on_send(t, run, a, b)
            elif kind == _RECV:
                self._on_recv(t, run, a, b)
            elif kind == _DONE:
                st = run.ranks[rank]
                if not st.frozen:
                    self._complete(t, run, rank)
            elif kind == _ENTER:
                self._on_enter(t, run, rank)
            else:
                self._on_solo(t, run, rank, ch, a, b)
        self.now_us = until_us
        return self._completions

    def _on_enter(self, t, run: _RoundRun, rank: int) -> None:
        st = run.ranks[rank]
        st.entered_us = t
        st.frame.set_status(st.block, EXT_ENTERED)
        self._log(t, rank, 0, "enter", (run.comm.id, run.round))
        if self.observer is not None:
            self.observer.on_enter(rank, st.trace_id, t)
        if st.solo:
            self._start_solo(t, run, rank)
            return
        plan = run.plan
        st.pending = run.index.parts[rank]
        if st.freeze_limit == 0:
            self._freeze(t, run, rank)
            return
        if st.pending == 0:
            self._complete(t, run, rank)
            return
        for ch in range(plan.channels):
            self._try_start(t, run, rank, ch)
        for src, ch in run.senders_to[rank]:
            self._try_start(t, run, src, ch)

    def _ready(self, st: Optional[_RankState]) -> bool:
        return st is not None and st.entered_us is not None and not st.frozen and not st.solo

    def _try_start(self, t, run: _RoundRun, rank: int, ch: int) -> None:
        busy = run.busy[rank]
        if busy[ch]:
            return
        order = run.plan.send_order[rank][ch]
        ptr = run.ptr[rank][ch]
        if ptr >= len(order):
            return
        x = order[ptr]
        if run.deps_left[x]:
            return
        src = run.ranks.get(rank)
        tr = run.plan.transfers[x]
        dst = run.ranks.get(tr.dst)
        # a frozen receiver still accepts writes up to its buffer credits
        if not (self._ready(src) and dst is not None and dst.entered_us is not None and not dst.solo):
            return
        bw = min(self._bw[rank][ch] * src.bw_factor, self._bw[tr.dst][ch] * dst.bw_factor)
        per_unit = unit_wire_bytes(src.descriptor.protocol) / bw
        batch = max(1, int(self.config.batch_us // per_unit))
        busy[ch] = True
        run.ptr[rank][ch] = ptr + 1
        run.started[x] = (t, per_unit, batch)
        self._schedule_batch(run, x, src)

    def _schedule_batch(self, run: _RoundRun, x: int, src: _RankState) -> None:
        tr = run.plan.transfers[x]
        t0, per_unit, batch = run.started[x]
        done = run.sent[x]
        k = min(batch, tr.units - done)
        if src.freeze_limit is not None:
            k = min(k, src.freeze_limit - src.sent_units)
        end = t0 + math.ceil((done + k) * per_unit)
        self._push(end, tr.src, tr.channel, _SEND, run, x, k)

    def _freeze(self, t, run: _RoundRun, rank: int) -> None:
        run.ranks[rank].frozen = True
        self._log(t, rank, 0, "freeze", (run.comm.id, run.round))

    def _on_send(self, t, run: _RoundRun, x: int, k: int) -> None:
        tr = run.plan.transfers[x]
        src = run.ranks[tr.src]
        dst = run.ranks[tr.dst]
        if src.frozen:
            return
        # writes into a frozen peer still land in its buffer; it never consumes them
        if k > 0:
            if self.observer is not None:
                self.observer.before_write(tr.src, src.trace_id, t)
            src.frame.record(src.block, tr.channel, SEND, k)
            self._log(t, tr.src, tr.channel, "send", (k, tr.dst))
            run.sent[x] += k
            src.sent_units += k
            self._push(t + self.config.hop_us, tr.dst, tr.channel, _RECV, run, x, k)
        if src.freeze_limit is not None and src.sent_units >= src.freeze_limit:
            self._freeze(t, run, tr.src)
            return
        if run.sent[x] < tr.units:
            self._schedule_batch(run, x, src)
        else:
            run.busy[tr.src][tr.channel] = False
            self._try_start(t, run, tr.src, tr.channel)
            self._release(t, run, run.creditors[x])

    def _release(self, t, run: _RoundRun, waiting: list[int]) -> None:
        for d in waiting:
            run.deps_left[d] -= 1
            if run.deps_left[d] == 0:
                nxt = run.plan.transfers[d]
                self._try_start(t, run, nxt.src, nxt.channel)

    def _on_recv(self, t, run: _RoundRun, x: int, k: int) -> None:
        tr = run.plan.transfers[x]
        dst = run.ranks[tr.dst]
        if dst.frozen:
            return
        if self.observer is not None:
            self.observer.before_write(tr.dst, dst.trace_id, t)
        dst.frame.record(dst.block, tr.channel, RECV, k)
        self._log(t, tr.dst, tr.channel, "recv", (k, tr.src))
        run.recvd[x] += k
        if run.recvd[x] != tr.units:
            return
        self._release(t, run, run.dependents[x])
        # the sender learns of delivery one hop later; an acknowledgement is never free
        self._finish_part(t + self.config.hop_us, run, tr.src)
        self._finish_part(t, run, tr.dst)

    def _finish_part(self, t, run: _RoundRun, rank: int) -> None:
        """One send or receive of ``rank`` is done as of time ``t`` (maybe future)."""
        st = run.ranks[rank]
        st.pending -= 1
        if t > st.done_us:
            st.done_us = t
        if st.pending == 0 and not st.frozen:
            if st.done_us <= self.now_us:
                self._complete(st.done_us, run, rank)
            else:
                self._push(st.done_us, rank, 0, _DONE, run)

    def _complete(self, t, run: _RoundRun, rank: int) -> None:
        st = run.ranks[rank]
        st.complete_us = t
        st.frame.set_status(st.block, EXT_COMPLETE)
        self._log(t, rank, 0, "complete", (run.comm.id, run.round))
        if self.observer is not None:
            self.observer.on_complete(rank, st.trace_id, t)
        self._completions.append(Completion(t, rank, run.comm.id, run.round))
        stream = self._streams[(rank, run.comm.id)]
        stream[0] = None
        if stream[1]:
            nxt = stream[1].popleft()
            stream[0] = nxt
            self._push(max(t, nxt.ranks[rank].ready_us), rank, 0, _ENTER, nxt)
        if stream[2]:
            self._begin(stream[2].popleft(), rank, t)
        if all(s.complete_us is not None for s in run.ranks.values()) and len(run.ranks) == len(run.comm.members):
            self.active_runs.pop((run.comm.id, run.round), None)

    # ------------------------------------------------------------ solo kernels
    def _start_solo(self, t, run: _RoundRun, rank: int) -> None:
        """Run a mismatched kernel on its own: it completes without its peers."""
        st = run.ranks[rank]
        plan = decompose_op(st.descriptor, run.comm.members, run.comm.algorithm, self.config.channels_per_rank)
        counts = plan.unit_counts(rank)
        run.solo_left[rank] = [list(c) for c in counts]
        st.pending = 0
        per_unit = unit_wire_bytes(st.descriptor.protocol) / self.config.bandwidth(rank, 0)
        batch = max(1, int(self.config.batch_us // per_unit))
        for ch, (s, r) in enumerate(counts):
            if s or r:
                st.pending += 1
                self._push(t + math.ceil(batch * per_unit), rank, ch, _SOLO, run, batch, math.ceil(batch * per_unit))
        if st.pending == 0:
            self._complete(t, run, rank)

    def _on_solo(self, t, run: _RoundRun, rank: int, ch: int, batch: int, step_us: int) -> None:
        st = run.ranks[rank]
        left = run.solo_left[rank][ch]
        if self.observer is not None:
            self.observer.before_write(rank, st.trace_id, t)
        ks, kr = min(batch, left[0]), min(batch, left[1])
        frame = st.frame
        if ks:
            frame.record(st.block, ch, SEND, ks)
        if kr:
            frame.record(st.block, ch, RECV, kr)
        self._log(t, rank, ch, "solo", (ks, kr))
        left[0] -= ks
        left[1] -= kr
        if left[0] or left[1]:
            self._push(t + step_us, rank, ch, _SOLO, run, batch, step_us)
        else:
            st.pending -= 1
            if st.pending == 0:
                self._complete(t, run, rank)

    # ------------------------------------------------------------------ views
    def format_trace(self) -> list[str]:
        return [f"{t} {rank} {ch} {event} {' '.join(str(d) for d in detail)}"
                for t, rank, ch, event, detail in self.trace]


def build_cluster(config: ClusterConfig) -> Cluster:
    return Cluster(config)


def create_communicator(cluster: Cluster, members, algorithm: Algorithm, comm_id: Optional[int] = None) -> Communicator:
    return cluster.create_communicator(members, algorithm, comm_id)


def post_collective(cluster: Cluster, comm: Communicator, descriptor: OperationDescriptor, round_: int) -> None:
    cluster.post_collective(comm, descriptor, round_)


def advance(cluster: Cluster, until_us: int) -> list[Completion]:
    return cluster.advance(until_us)
