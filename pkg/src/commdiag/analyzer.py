"""Decision analyzer: detect hang and slow anomalies and locate root-cause ranks.

Detection runs on evaluation ticks of simulated time:

* hang: a rank has been inside one (non-barrier) round for longer than the
  hang threshold;
* slow: per fixed window, the round with the widest duration spread is
  compared against a baseline; a streak of flagged windows longer than the
  repetition threshold raises an alert.

Location follows a decision tree. A hang is attributed to ranks that never
posted the round, else to ranks that are not hung, else to the ranks that
moved the fewest units. A slowdown is split by the share of the extra time
explained by late entry: mostly late entry blames the shortest-running rank,
mostly slow transfer blames the slowest-progressing rank, and a mix blames
both.

All ratios are exact fractions so evidence re-derives its verdict exactly.
"""

from __future__ import annotations

import statistics
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Sequence

from .errors import (
    DiagError,
    InsufficientDataError,
    InsufficientEvidenceError,
    InvalidBaselineError,
    InvalidConfigurationError,
    InvalidInvocationError,
    NoDataError,
    OrderingError,
    UnknownCommunicatorError,
)
from .sim.plan import Plan, binary_tree_layers, decompose_op
from .sim.scenario import CommDecl, CommRelease
from .trace_model import Algorithm, MetricSnapshot, OperationDescriptor

CONFIGURED = "configured"
LEARNED = "learned"


@dataclass(frozen=True)
class AnalyzerConfig:
    hang_threshold_us: int = 300_000_000
    slow_window_us: int = 60_000_000
    theta_slow: float = 3.0
    alpha: float = 0.4
    beta: float = 0.6
    repetition_threshold: int = 3
    initial_baseline_us: int = 1_000_000
    m_rounds_cap: int = 100
    m_time_cap_us: int = 120_000_000
    barrier_size_bytes: int = 4
    tick_us: int = 1_000_000
    # replace theta_slow with a statistical estimate once enough clean windows are seen
    auto_theta: bool = True
    theta_history: int = 30

    def __post_init__(self):
        if not 0 < self.alpha < self.beta < 1:
            raise InvalidConfigurationError("need 0 < alpha < beta < 1")
        if self.theta_slow <= 0:
            raise InvalidConfigurationError("theta_slow must be positive")
        if self.hang_threshold_us <= self.slow_window_us:
            raise InvalidConfigurationError("hang_threshold_us must exceed slow_window_us")
        if min(self.slow_window_us, self.tick_us, self.initial_baseline_us,
               self.repetition_threshold, self.m_rounds_cap, self.m_time_cap_us) <= 0:
            raise InvalidConfigurationError("windows, ticks, caps and baseline must be positive")
        if self.slow_window_us % self.tick_us:
            raise InvalidConfigurationError("slow_window_us must be a multiple of tick_us")

    @classmethod
    def from_overrides(cls, overrides: dict[str, str]) -> "AnalyzerConfig":
        kwargs = {}
        fields_ = cls.__dataclass_fields__
        for key, raw in overrides.items():
            key = key.replace("-", "_")
            if key not in fields_:
                continue
            kind = fields_[key].type
            if kind in ("bool", bool):
                kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
            elif kind in ("float", float):
                kwargs[key] = float(Fraction(raw))
            else:
                kwargs[key] = int(raw.replace("_", ""))
        # an explicit threshold is meant to stick
        if "theta_slow" in kwargs and "auto_theta" not in kwargs:
            kwargs["auto_theta"] = False
        return cls(**kwargs)


# ------------------------------------------------------------ pure functions
@dataclass
class BaselineState:
    value_us: Fraction
    source: str = CONFIGURED
    round_maxima: list = field(default_factory=list)
    # resolved learning length; None while still open
    m: Optional[int] = None
    last_round: int = 0


def update_baseline(state: BaselineState, r: int, t_max) -> BaselineState:
    """Feed round ``r`` (1-based) with its maximum duration.

    While ``r <= m`` the configured value stands and maxima accumulate; the
    first round past ``m`` switches to their mean, which then stays frozen.
    """
    if r != state.last_round + 1:
        raise OrderingError(f"expected round {state.last_round + 1}, got {r}")
    state.last_round = r
    if state.source == LEARNED:
        return state
    if state.m is not None and r > state.m:
        state.value_us = Fraction(sum(state.round_maxima), len(state.round_maxima))
        state.source = LEARNED
        return state
    state.round_maxima.append(Fraction(t_max))
    return state


def select_extreme_round(window: dict) -> tuple:
    """(round, T_max, T_min) of the round with the widest spread; ties go to the earliest."""
    if not window:
        raise NoDataError("empty window")
    best = None
    for rnd in sorted(window):
        t_max, t_min = window[rnd]
        if best is None or t_max - t_min > best[1] - best[2]:
            best = (rnd, t_max, t_min)
    return best


def slow_ratio(t_max, t_base) -> Fraction:
    t_base = Fraction(t_base)
    if t_base == 0:
        raise InvalidBaselineError("baseline is zero")
    return (Fraction(t_max) - t_base) / t_base


def p_ratio(t_max, t_min, t_base) -> Fraction:
    """Share of the slowdown explained by the duration spread, clamped to [0, 1]."""
    t_max, t_min, t_base = Fraction(t_max), Fraction(t_min), Fraction(t_base)
    if t_max <= t_base:
        raise InvalidInvocationError("location needs T_max > T_base")
    p = (t_max - t_min) / (t_max - t_base)
    return min(Fraction(1), max(Fraction(0), p))


def estimate_theta(history: Sequence[float], minimum: int = 30) -> float:
    """max(mean + 3 sigma, 1), capped at 10 (population sigma)."""
    if len(history) < minimum:
        raise InsufficientDataError(f"need {minimum} window ratios, have {len(history)}")
    values = [float(x) for x in history]
    theta = statistics.fmean(values) + 3 * statistics.pstdev(values)
    return min(10.0, max(1.0, theta))


def comparison_groups(comm: CommDecl) -> list[tuple[int, ...]]:
    if comm.algorithm == Algorithm.RING:
        return [tuple(comm.members)]
    layers = binary_tree_layers(comm.members)
    out: dict[int, list[int]] = {}
    for rank in comm.members:
        out.setdefault(layers[rank], []).append(rank)
    return [tuple(out[k]) for k in sorted(out)]


# ------------------------------------------------------------------ reports
KINDS = ("H1", "H2", "H3", "S1_comp", "S2_comm", "S3_mixed")


def fmt_value(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, Fraction):
        return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
    return str(v)


@dataclass(frozen=True)
class AnomalyReport:
    kind: str
    comm_id: int
    round: int
    root_cause_ranks: tuple[int, ...]
    detected_at_us: int
    located_at_us: int
    # hang: earliest entry into the stalled round; slow: end of the first flagged window
    onset_us: int
    R: Optional[Fraction] = None
    P: Optional[Fraction] = None
    T_base: Optional[Fraction] = None
    T_max: Optional[Fraction] = None
    T_min: Optional[Fraction] = None
    evidence: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown report kind {self.kind!r}")
        if not self.root_cause_ranks:
            raise ValueError("a report needs at least one root-cause rank")

    @property
    def detection_latency_us(self) -> int:
        return self.detected_at_us - self.onset_us

    def format(self) -> str:
        roots = ",".join(str(r) for r in self.root_cause_ranks)
        parts = [f"kind={self.kind}", f"comm={self.comm_id}", f"round={self.round}", f"roots={roots}",
                 f"R={fmt_value(self.R)}", f"P={fmt_value(self.P)}", f"T_base={fmt_value(self.T_base)}",
                 f"T_max={fmt_value(self.T_max)}", f"T_min={fmt_value(self.T_min)}",
                 f"detected_us={self.detected_at_us}", f"located_us={self.located_at_us}",
                 f"onset_us={self.onset_us}"]
        for key in sorted(self.evidence):
            parts.append(f"{key}={_fmt_evidence(self.evidence[key])}")
        return " ".join(parts)


def _fmt_evidence(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_evidence(x) for x in v) or "-"
    if isinstance(v, dict):
        return ";".join(f"{k}:{_fmt_evidence(x)}" for k, x in sorted(v.items())) or "-"
    return fmt_value(v).replace(" ", "_")


# ------------------------------------------------------------------ location
def _argmin_all(ranks: Iterable[int], key) -> list[int]:
    best, out = None, []
    for r in ranks:
        k = key(r)
        if best is None or k < best:
            best, out = k, [r]
        elif k == best:
            out.append(r)
    return sorted(out)


def descriptor_mode(snaps: Iterable[MetricSnapshot]) -> Optional[OperationDescriptor]:
    counts = Counter(s.descriptor for s in snaps)
    if not counts:
        return None
    return min(counts, key=lambda d: (-counts[d], str(d)))


def stall_sources(plan: Plan, counts: dict[int, Sequence[tuple[int, int]]],
                  stalled: Optional[Iterable[int]] = None) -> list[int]:
    """Ranks a quiescent stall originates from, read off the schedule.

    ``counts`` holds the per-channel (send, recv) totals of every member;
    only ``stalled`` ranks (default: all) are candidates. A rank is a source
    when peers wrote units to it that it never recorded, or when its next
    send has all inputs and buffer credits yet was not issued. Every other
    stalled rank is waiting on someone.
    """
    candidates = set(counts if stalled is None else stalled)
    sent = [0] * len(plan.transfers)
    for rank, per_ch in counts.items():
        for ch, order in enumerate(plan.send_order.get(rank, ())):
            left = per_ch[ch][0] if ch < len(per_ch) else 0
            for x in order:
                take = min(plan.transfers[x].units, left)
                sent[x] = take
                left -= take
    inbound: dict[tuple[int, int], int] = {}
    for t in plan.transfers:
        inbound[(t.dst, t.channel)] = inbound.get((t.dst, t.channel), 0) + sent[t.index]
    sources = set()
    for rank, per_ch in counts.items():
        if rank not in candidates:
            continue
        for ch in range(min(plan.channels, len(per_ch))):
            if per_ch[ch][1] < inbound.get((rank, ch), 0):
                sources.add(rank)
    for rank in sorted(candidates & set(counts)):
        if rank in sources:
            continue
        for order in plan.send_order.get(rank, ()):
            nxt = next((x for x in order if sent[x] < plan.transfers[x].units), None)
            if nxt is None:
                continue
            t = plan.transfers[nxt]
            # inputs count as delivered when their receiver consumed all that was sent
            inputs = all(sent[d] == plan.transfers[d].units for d in t.deps)
            credits = all(sent[c] == plan.transfers[c].units for c in t.credits)
            if inputs and credits:
                sources.add(rank)
                break
    return sorted(sources)


def locate_hang(group: Sequence[int], round_snaps: dict[int, MetricSnapshot],
                latest_round: dict[int, int], alerted_round: int,
                layer_groups: Optional[Sequence[Sequence[int]]] = None,
                plan: Optional[Plan] = None) -> tuple[str, list[int], dict]:
    """Decision tree for a stalled round; returns (kind, roots, evidence).

    ``round_snaps`` maps rank to its latest snapshot of the alerted round and
    ``latest_round`` maps rank to the newest round it has reported at all.
    ``layer_groups`` marks a tree communicator; ``plan`` is its schedule.
    """
    if not round_snaps:
        raise InsufficientEvidenceError("hang alert without snapshots")
    stale = [r for r in group if r not in round_snaps and latest_round.get(r, -1) < alerted_round]
    if stale:
        return "H1", sorted(stale), {"latest_round": {r: latest_round.get(r, -1) for r in stale}}
    mode = descriptor_mode(round_snaps.values())
    mismatch = {r: str(round_snaps[r].descriptor) for r in group
                if r in round_snaps and round_snaps[r].descriptor != mode}
    if layer_groups is None:
        alive = [r for r in group if r in round_snaps and (round_snaps[r].completed or r in mismatch)]
    else:
        # whole subtrees finish while another branch is stuck, so only a
        # mismatching descriptor marks a rank as running something else
        alive = sorted(mismatch)
    if alive:
        return "H2", sorted(alive), {"mode": str(mode), "mismatch": mismatch}
    members = set(group)
    hung = {r: s for r, s in round_snaps.items() if not s.completed and r in members}
    totals = {r: s.total_count for r, s in hung.items()}
    evidence: dict = {"counts": totals}
    roots: list[int] = []
    if layer_groups is not None and plan is not None:
        everyone = {r: s.per_channel_counts for r, s in round_snaps.items() if r in members}
        roots = stall_sources(plan, everyone, hung)
        evidence["stall_sources"] = roots
    if not roots and layer_groups:
        best_score = None
        for layer in layer_groups:
            members = [r for r in layer if r in totals]
            if len(members) < 2:
                continue
            low = min(totals[r] for r in members)
            high = max(totals[r] for r in members)
            # how far the weakest rank lags its own layer
            score = Fraction(low, high) if high else Fraction(1)
            if best_score is None or score < best_score:
                best_score, roots = score, [r for r in members if totals[r] == low]
    if not roots:
        low = min(totals.values())
        roots = [r for r in totals if totals[r] == low]
    evidence["channel_min"] = {r: min(s + rr for s, rr in hung[r].per_channel_counts) for r in roots}
    return "H3", sorted(roots), evidence


def locate_slow(group: Sequence[int], round_snaps: dict[int, MetricSnapshot], baseline: BaselineState,
                config: AnalyzerConfig) -> tuple[str, list[int], dict]:
    """Classify a slowed round by the share of late entry; returns (kind, roots, evidence)."""
    missing = [r for r in group if r not in round_snaps]
    if missing:
        raise InsufficientEvidenceError(f"no snapshots for ranks {missing}")
    durations = {r: round_snaps[r].duration_us for r in group}
    t_max, t_min = max(durations.values()), min(durations.values())
    p = p_ratio(t_max, t_min, baseline.value_us)
    shortest = _argmin_all(group, durations.__getitem__)

    def rate_key(r):
        s = round_snaps[r]
        return (min(s.send_rate, s.recv_rate), max(s.send_rate, s.recv_rate))

    slowest = _argmin_all(group, rate_key)
    evidence = {
        "phase": "slow_at_start" if baseline.source == CONFIGURED else "in_communication",
        "baseline_source": baseline.source,
        "min_duration_ranks": shortest,
        "min_rate_ranks": slowest,
        "durations": {r: durations[r] for r in sorted(set(shortest) | set(slowest))},
        "rates": {r: f"{fmt_value(round_snaps[r].send_rate)}|{fmt_value(round_snaps[r].recv_rate)}"
                  for r in sorted(set(shortest) | set(slowest))},
    }
    if p > Fraction(config.beta):
        return "S1_comp", shortest, evidence
    if p < Fraction(config.alpha):
        return "S2_comm", slowest, evidence
    return "S3_mixed", sorted(set(shortest) | set(slowest)), evidence


# ------------------------------------------------------------------ pipeline
@dataclass
class _Round:
    snaps: dict = field(default_factory=dict)  # rank -> latest snapshot
    completed: set = field(default_factory=set)
    done_at: Optional[int] = None


@dataclass
class SlowCounter:
    comm_id: int
    count: int = 0
    streak_start_us: Optional[int] = None
    latched: bool = False


class _CommState:
    def __init__(self, decl: CommDecl, config: AnalyzerConfig):
        self.decl = decl
        self.members = tuple(decl.members)
        self.member_set = set(self.members)
        self.groups = comparison_groups(decl)
        self.group_of = {r: i for i, g in enumerate(self.groups) for r in g}
        self.rounds: dict[int, _Round] = {}
        self.latest_round: dict[int, int] = {}
        self.baselines: dict[tuple[int, OperationDescriptor], BaselineState] = {}
        self.first_done: dict[tuple[int, OperationDescriptor], int] = {}
        self.windows: dict[int, list[int]] = {}
        self.counter = SlowCounter(decl.comm_id)
        self.hang_reported: Optional[int] = None
        self.config = config

    def baseline(self, gi: int, desc: OperationDescriptor) -> BaselineState:
        key = (gi, desc)
        st = self.baselines.get(key)
        if st is None:
            st = self.baselines[key] = BaselineState(Fraction(self.config.initial_baseline_us))
        return st


class Analyzer:
    """Stateful pipeline; feed items with :meth:`ingest` and drive :meth:`tick`."""

    def __init__(self, config: Optional[AnalyzerConfig] = None):
        self.config = config or AnalyzerConfig()
        self.comms: dict[int, _CommState] = {}
        self.skipped = 0
        self.theta = self.config.theta_slow
        self.theta_history: list[float] = []
        self._next_tick = self.config.tick_us

    # -------------------------------------------------------------- ingest
    def declare(self, decl: CommDecl) -> None:
        self.comms[decl.comm_id] = _CommState(decl, self.config)

    def groups(self, comm_id: int) -> list[tuple[int, ...]]:
        st = self.comms.get(comm_id)
        if st is None:
            raise UnknownCommunicatorError(f"unknown communicator {comm_id}")
        return st.groups

    def relearn(self, comm_id: int) -> None:
        """Forget learned baselines so the next rounds are learned afresh."""
        self.groups(comm_id)
        self.comms[comm_id].baselines.clear()
        self.comms[comm_id].first_done.clear()

    def ingest(self, item) -> None:
        if isinstance(item, CommDecl):
            self.declare(item)
            return
        if isinstance(item, CommRelease):
            self.comms.pop(item.comm_id, None)
            return
        if not isinstance(item, MetricSnapshot):
            self.skipped += 1
            return
        st = self.comms.get(item.trace_id.comm_id)
        if st is None or item.rank not in st.member_set:
            self.skipped += 1
            return
        rnd_id = item.trace_id.op_counter
        rnd = st.rounds.get(rnd_id)
        if rnd is None:
            rnd = st.rounds[rnd_id] = _Round()
        if item.rank in rnd.completed:
            # a late heartbeat must not mask the completion record
            return
        rnd.snaps[item.rank] = item
        if st.latest_round.get(item.rank, -1) < rnd_id:
            st.latest_round[item.rank] = rnd_id
        if item.completed:
            rnd.completed.add(item.rank)
            if len(rnd.completed) == len(st.members):
                rnd.done_at = max(s.complete_time_us for s in rnd.snaps.values())
                self._round_done(st, rnd_id, rnd)

    def _round_done(self, st: _CommState, rnd_id: int, rnd: _Round) -> None:
        cfg = self.config
        st.windows.setdefault(rnd.done_at // cfg.slow_window_us, []).append(rnd_id)
        for gi, group in enumerate(st.groups):
            desc = descriptor_mode(rnd.snaps[r] for r in group)
            if desc is None or desc.is_barrier(cfg.barrier_size_bytes):
                continue
            t_max = max(rnd.snaps[r].duration_us for r in group)
            done = max(rnd.snaps[r].complete_time_us for r in group)
            key = (gi, desc)
            base = st.baseline(gi, desc)
            first = st.first_done.setdefault(key, done)
            r = base.last_round + 1
            if base.m is None and (len(base.round_maxima) >= cfg.m_rounds_cap
                                   or done > first + cfg.m_time_cap_us):
                base.m = len(base.round_maxima)
            update_baseline(base, r, t_max)

    # ---------------------------------------------------------------- ticks
    def advance_to(self, now_us: int) -> list[AnomalyReport]:
        """Run every evaluation tick at or before ``now_us``."""
        out: list[AnomalyReport] = []
        while self._next_tick <= now_us:
            out.extend(self.tick(self._next_tick))
            self._next_tick += self.config.tick_us
        return out

    def tick(self, now_us: int) -> list[AnomalyReport]:
        out = []
        for comm_id in sorted(self.comms):
            st = self.comms[comm_id]
            rep = self._check_hang(st, now_us)
            if rep is not None:
                out.append(rep)
            if now_us % self.config.slow_window_us == 0:
                rep = self._check_slow(st, now_us // self.config.slow_window_us - 1, now_us)
                if rep is not None:
                    out.append(rep)
        return out

    @staticmethod
    def _plan_for(st: _CommState, mode, snaps) -> Optional[Plan]:
        channels = max((len(s.per_channel_counts) for s in snaps), default=0)
        if mode is None or not channels:
            return None
        try:
            return decompose_op(mode, st.decl.members, st.decl.algorithm, channels)
        except DiagError:
            return None

    def _check_hang(self, st: _CommState, now_us: int) -> Optional[AnomalyReport]:
        cfg = self.config
        for rnd_id in sorted(st.rounds):
            rnd = st.rounds[rnd_id]
            if rnd.done_at is not None:
                continue
            if st.hang_reported is not None and rnd_id >= st.hang_reported:
                return None
            inflight = [s for s in rnd.snaps.values() if not s.completed]
            if not inflight:
                continue
            mode = descriptor_mode(rnd.snaps.values())
            if mode is not None and mode.is_barrier(cfg.barrier_size_bytes):
                continue
            onset = min(s.enter_time_us for s in inflight)
            if now_us - onset <= cfg.hang_threshold_us:
                continue
            layer_groups = plan = None
            if st.decl.algorithm == Algorithm.TREE:
                layer_groups = st.groups
                plan = self._plan_for(st, mode, rnd.snaps.values())
            kind, roots, evidence = locate_hang(st.members, rnd.snaps, st.latest_round, rnd_id,
                                                layer_groups, plan)
            st.hang_reported = rnd_id
            evidence = dict(evidence)
            evidence["elapsed_us"] = now_us - onset
            return AnomalyReport(kind, st.decl.comm_id, rnd_id, tuple(roots), now_us, now_us, onset,
                                 evidence=evidence)
        return None

    def _check_slow(self, st: _CommState, window: int, now_us: int) -> Optional[AnomalyReport]:
        cfg = self.config
        rounds = st.windows.pop(window, [])
        best = None  # (R, group index, round, t_max, t_min, baseline)
        for gi, group in enumerate(st.groups):
            spans = {}
            descs = {}
            for rnd_id in rounds:
                rnd = st.rounds[rnd_id]
                desc = descriptor_mode(rnd.snaps[r] for r in group)
                if desc.is_barrier(cfg.barrier_size_bytes):
                    continue
                d = [rnd.snaps[r].duration_us for r in group]
                spans[rnd_id] = (max(d), min(d))
                descs[rnd_id] = desc
            if not spans:
                continue
            rnd_id, t_max, t_min = select_extreme_round(spans)
            base = st.baseline(gi, descs[rnd_id])
            r = slow_ratio(t_max, base.value_us)
            if best is None or r > best[0]:
                best = (r, gi, rnd_id, t_max, t_min, base)
        closed = {rid: st.rounds.pop(rid) for rid in rounds}
        if best is None:
            return None
        r, gi, rnd_id, t_max, t_min, base = best
        counter = st.counter
        if r > Fraction(self.theta):
            counter.count += 1
            if counter.count == 1:
                counter.streak_start_us = now_us
        else:
            counter.count = 0
            counter.streak_start_us = None
            counter.latched = False
            if cfg.auto_theta and base.source == LEARNED:
                self.theta_history.append(float(r))
                if len(self.theta_history) >= cfg.theta_history:
                    self.theta = estimate_theta(self.theta_history, cfg.theta_history)
            return None
        if counter.count <= cfg.repetition_threshold or counter.latched:
            return None
        counter.latched = True
        group = st.groups[gi]
        snaps = {r: closed[rnd_id].snaps[r] for r in group if r in closed[rnd_id].snaps}
        kind, roots, evidence = locate_slow(group, snaps, base, cfg)
        p = p_ratio(t_max, t_min, base.value_us)
        evidence["theta"] = Fraction(self.theta).limit_denominator(10**6)
        evidence["streak"] = counter.count
        return AnomalyReport(kind, st.decl.comm_id, rnd_id, tuple(roots), now_us, now_us,
                             counter.streak_start_us, R=r, P=p, T_base=base.value_us,
                             T_max=Fraction(t_max), T_min=Fraction(t_min), evidence=evidence)


def _item_time(item) -> int:
    if isinstance(item, CommDecl):
        return item.created_us
    if isinstance(item, CommRelease):
        return item.at_us
    return item.emitted_at_us


def diagnose(stream: Iterable, config: Optional[AnalyzerConfig] = None,
             end_us: Optional[int] = None, analyzer: Optional[Analyzer] = None) -> Iterator[AnomalyReport]:
    """Run the full pipeline over a time-ordered stream of items.

    Ticks at time T run before items emitted at T are ingested.
    """
    an = analyzer or Analyzer(config)
    for item in stream:
        try:
            t = _item_time(item)
        except AttributeError:
            an.skipped += 1
            continue
        yield from an.advance_to(t)
        an.ingest(item)
    if end_us is not None:
        yield from an.advance_to(end_us)
