import random
import statistics
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from commdiag.analyzer import (
    CONFIGURED,
    LEARNED,
    Analyzer,
    AnalyzerConfig,
    BaselineState,
    comparison_groups,
    diagnose,
    estimate_theta,
    locate_hang,
    locate_slow,
    p_ratio,
    select_extreme_round,
    slow_ratio,
    update_baseline,
)
from commdiag.errors import (
    InsufficientDataError,
    InsufficientEvidenceError,
    InvalidBaselineError,
    InvalidConfigurationError,
    InvalidInvocationError,
    NoDataError,
    OrderingError,
    UnknownCommunicatorError,
)
from commdiag.sim.scenario import CommDecl
from commdiag.trace_model import Algorithm, MetricSnapshot, OperationDescriptor, OpName, Protocol, make_trace_id

S = 1_000_000
W = 60 * S
DESC = OperationDescriptor(OpName.ALL_REDUCE, Algorithm.RING, Protocol.SIMPLE, 16 << 20)
BARRIER = OperationDescriptor(OpName.ALL_REDUCE, Algorithm.RING, Protocol.LL, 4)

fracs = st.fractions(min_value=Fraction(1, 1000), max_value=1000, max_denominator=1000)


# ------------------------------------------------------------------ oracles
def baseline_oracle(init, m, maxima, r):
    """T_base after round r, straight from the two-branch definition."""
    if r <= m:
        return Fraction(init)
    first = maxima[:m]
    return Fraction(sum(first)) / len(first)


def extreme_oracle(window):
    ranges = {k: v[0] - v[1] for k, v in window.items()}
    widest = max(ranges.values())
    rnd = min(k for k, v in ranges.items() if v == widest)
    return rnd, window[rnd][0], window[rnd][1]


def snap(rank, rnd, enter, dur, desc=DESC, comm=1, done=True, counts=((10, 10),), rates=(Fraction(1, 4),) * 2):
    return MetricSnapshot(rank, make_trace_id(comm, rnd), desc, counts, rates[0], rates[1], enter,
                          enter + dur if done else None, dur, "completion" if done else "heartbeat")


def ring(n=4, comm=1):
    return CommDecl(comm, Algorithm.RING, tuple(range(n)), 0)


def round_of(rnd, enter, durations, desc=DESC, rates=None):
    rates = rates or {}
    return [snap(r, rnd, enter, d, desc, rates=rates.get(r, (Fraction(1, 4),) * 2)) for r, d in enumerate(durations)]


def time_sorted(items):
    return sorted(items, key=lambda x: x.emitted_at_us if isinstance(x, MetricSnapshot) else -1)


def cfg(**kw):
    base = dict(initial_baseline_us=10 * S, m_rounds_cap=3, auto_theta=False)
    base.update(kw)
    return AnalyzerConfig(**base)


def learning_rounds(n=4, count=3, dur=10 * S):
    out = []
    for i in range(count):
        out += round_of(i, i * dur, [dur] * n)
    return out


# ------------------------------------------------------------------ baseline
def test_baseline_constant_maxima():
    st_ = BaselineState(Fraction(10), m=3)
    for r in range(1, 4):
        update_baseline(st_, r, 8)
        assert st_.value_us == 10 and st_.source == CONFIGURED
    update_baseline(st_, 4, 99)
    assert st_.value_us == 8 and st_.source == LEARNED


def test_baseline_mean_of_mixed_maxima():
    st_ = BaselineState(Fraction(10), m=3)
    for r, t in enumerate([6, 10, 8], 1):
        update_baseline(st_, r, t)
    update_baseline(st_, 4, 1)
    assert st_.value_us == 8


def test_baseline_frozen_after_learning():
    st_ = BaselineState(Fraction(10), m=1)
    update_baseline(st_, 1, 4)
    update_baseline(st_, 2, 100)
    update_baseline(st_, 3, 100)
    assert st_.value_us == 4


def test_baseline_out_of_order():
    st_ = BaselineState(Fraction(10), m=3)
    update_baseline(st_, 1, 5)
    with pytest.raises(OrderingError):
        update_baseline(st_, 3, 5)


@settings(max_examples=300)
@given(fracs, st.integers(1, 10), st.lists(fracs, min_size=1, max_size=25))
def test_baseline_matches_oracle(init, m, maxima):
    st_ = BaselineState(Fraction(init), m=m)
    for r, t in enumerate(maxima, 1):
        update_baseline(st_, r, t)
        assert st_.value_us == baseline_oracle(init, m, maxima, r)
        assert st_.source == (CONFIGURED if r <= m else LEARNED)


# ------------------------------------------------------------ extreme round
def test_extreme_prefers_range_over_absolute_max():
    assert select_extreme_round({"A": (40, 10), "B": (50, 45)}) == ("A", 40, 10)


def test_extreme_single_round():
    assert select_extreme_round({7: (3, 2)}) == (7, 3, 2)


def test_extreme_tie_goes_to_earliest():
    assert select_extreme_round({5: (20, 10), 2: (30, 20), 9: (11, 1)}) == (2, 30, 20)


def test_extreme_empty_window():
    with pytest.raises(NoDataError):
        select_extreme_round({})


@settings(max_examples=300)
@given(st.dictionaries(st.integers(0, 1000), st.tuples(fracs, fracs).map(lambda p: (max(p), min(p))),
                       min_size=1, max_size=20))
def test_extreme_matches_oracle(window):
    assert select_extreme_round(window) == extreme_oracle(window)


# ------------------------------------------------------------------- ratios
@pytest.mark.parametrize("t_max,t_base,want", [(40, 10, 3), (10, 10, 0), (50, 10, 4), (5, 10, Fraction(-1, 2))])
def test_slow_ratio_examples(t_max, t_base, want):
    assert slow_ratio(t_max, t_base) == want


def test_slow_ratio_zero_baseline():
    with pytest.raises(InvalidBaselineError):
        slow_ratio(10, 0)


@pytest.mark.parametrize("args,want", [((20, 10, 10), 1), ((20, 20, 10), 0), ((30, 20, 10), Fraction(1, 2))])
def test_p_ratio_examples(args, want):
    assert p_ratio(*args) == want


@pytest.mark.parametrize("t_max", [10, 9])
def test_p_ratio_needs_slowdown(t_max):
    with pytest.raises(InvalidInvocationError):
        p_ratio(t_max, 5, 10)


def test_p_ratio_clamps_jitter():
    # T_min below a learned baseline would push P past 1
    assert p_ratio(20, 8, 10) == 1


@settings(max_examples=500)
@given(fracs, fracs, fracs)
def test_p_ratio_bounds(a, b, c):
    t_base, t_min, t_max = sorted([a, b, c])
    assume(t_max > t_base)
    p = p_ratio(t_max, t_min, t_base)
    assert 0 <= p <= 1
    assert p == (t_max - t_min) / (t_max - t_base)


@settings(max_examples=300)
@given(fracs, fracs)
def test_slow_ratio_matches_definition(t_max, t_base):
    assert slow_ratio(t_max, t_base) == t_max / t_base - 1


# -------------------------------------------------------------------- theta
def test_theta_degenerate_history():
    assert estimate_theta([0.0] * 30) == 1.0


def test_theta_small_noise_floored():
    rng = random.Random(4)
    history = [rng.gauss(0.2, 0.05) for _ in range(200)]
    raw = statistics.fmean(history) + 3 * statistics.pstdev(history)
    assert 0.3 < raw < 0.4
    assert estimate_theta(history) == 1.0


def test_theta_practical_value():
    assert estimate_theta([1.0, 2.0] * 20) == pytest.approx(3.0, abs=1e-12)


def test_theta_capped():
    assert estimate_theta([0.0, 20.0] * 20) == 10.0


def test_theta_needs_history():
    with pytest.raises(InsufficientDataError):
        estimate_theta([0.1] * 29)


# ------------------------------------------------------------------- config
@pytest.mark.parametrize("kw", [
    {"alpha": 0.6, "beta": 0.4},
    {"alpha": 0.0},
    {"beta": 1.0},
    {"theta_slow": 0},
    {"hang_threshold_us": 60_000_000},
    {"repetition_threshold": 0},
    {"tick_us": 7_000_000},
])
def test_config_validation(kw):
    with pytest.raises(InvalidConfigurationError):
        AnalyzerConfig(**kw)


def test_explicit_theta_disables_estimation():
    c = AnalyzerConfig.from_overrides({"theta_slow": "1000"})
    assert c.theta_slow == 1000 and not c.auto_theta
    assert AnalyzerConfig.from_overrides({"theta_slow": "5", "auto_theta": "yes"}).auto_theta


# ------------------------------------------------------------------- groups
def test_ring_single_group():
    assert comparison_groups(ring(4)) == [(0, 1, 2, 3)]


def test_tree_layers_of_seven():
    decl = CommDecl(3, Algorithm.TREE, (8, 9, 10, 11, 12, 13, 14), 0)
    assert comparison_groups(decl) == [(8,), (9, 10), (11, 12, 13, 14)]


def test_unknown_communicator():
    an = Analyzer()
    an.declare(ring())
    assert an.groups(1) == [(0, 1, 2, 3)]
    with pytest.raises(UnknownCommunicatorError):
        an.groups(99)


@given(st.integers(1, 200))
def test_tree_layers_partition_members(n):
    groups = comparison_groups(CommDecl(1, Algorithm.TREE, tuple(range(n)), 0))
    assert sorted(r for g in groups for r in g) == list(range(n))
    assert all(len(g) == 2 ** i for i, g in enumerate(groups[:-1]))
    assert 1 <= len(groups[-1]) <= 2 ** (len(groups) - 1)


# --------------------------------------------------------------- hang path
def run(items, config=None, end_us=None):
    return list(diagnose(time_sorted(items), config or cfg(), end_us=end_us))


def stalled(n, rnd=0, enter=0, at=S, counts=None, desc=DESC):
    counts = counts or {}
    return [snap(r, rnd, enter, at - enter, desc, done=False, counts=counts.get(r, ((10, 10),)),
                 rates=(Fraction(0), Fraction(0))) for r in range(n)]


def test_hang_alert_first_tick_past_threshold():
    counts = {0: ((3, 3),), 1: ((5, 5),), 2: ((5, 6),), 3: ((5, 5),)}
    items = [ring()] + stalled(4, counts=counts)
    for t in (100 * S, 299 * S, 300 * S):
        items += stalled(4, at=t, counts=counts)
    reps = run(items, end_us=310 * S)
    assert len(reps) == 1
    rep = reps[0]
    assert (rep.kind, rep.root_cause_ranks) == ("H3", (0,))
    assert rep.detected_at_us == 301 * S and rep.onset_us == 0
    assert rep.evidence["counts"][0] == 6 == min(rep.evidence["counts"].values())


def test_hang_not_reported_at_threshold():
    assert run([ring()] + stalled(4), end_us=300 * S) == []


def test_barrier_stall_never_alerts():
    assert run([ring()] + stalled(4, desc=BARRIER), end_us=400 * S) == []


def test_fast_rounds_never_alert():
    items = [ring()]
    for i in range(200):
        items += round_of(i, i * 10_000, [2000 + r for r in range(4)])
    assert run(items, end_us=1000 * S) == []


def test_hang_reported_once_per_round():
    items = [ring()] + stalled(4) + stalled(4, at=400 * S)
    assert len(run(items, end_us=900 * S)) == 1


def test_locate_hang_not_entered():
    snaps = {r: snap(r, 5, 0, 10, done=False) for r in (0, 1, 3)}
    latest = {0: 5, 1: 5, 2: 4, 3: 5}
    kind, roots, ev = locate_hang([0, 1, 2, 3], snaps, latest, 5)
    assert (kind, roots) == ("H1", [2])
    assert ev["latest_round"] == {2: 4}


def test_locate_hang_inconsistent():
    sub = DESC._replace(data_size_bytes=8 << 20)
    snaps = {r: snap(r, 1, 0, 10, done=False) for r in (0, 2, 3)}
    snaps[1] = snap(1, 1, 0, 10, desc=sub, done=True)
    kind, roots, ev = locate_hang([0, 1, 2, 3], snaps, {r: 1 for r in range(4)}, 1)
    assert (kind, roots) == ("H2", [1])
    assert ev["mismatch"] == {1: str(sub)}


def test_locate_hang_hardware_ties_reported():
    snaps = {r: snap(r, 0, 0, 10, done=False, counts=((c, c),)) for r, c in enumerate([4, 9, 4, 9])}
    kind, roots, _ = locate_hang([0, 1, 2, 3], snaps, {r: 0 for r in range(4)}, 0)
    assert (kind, roots) == ("H3", [0, 2])


def test_locate_hang_without_snapshots():
    with pytest.raises(InsufficientEvidenceError):
        locate_hang([0, 1], {}, {}, 0)


# --------------------------------------------------------------- slow path
def slow_stream(windows, t_max=45 * S, t_min=44 * S, n=4):
    """Three 10 s learning rounds, then one slowed round in each listed window."""
    items = [ring(n)] + learning_rounds(n)
    rnd = 3
    for k in windows:
        items += round_of(rnd, k * W + S, [t_max] + [t_min] * (n - 1))
        rnd += 1
    return items


def test_slow_alert_on_fourth_window():
    reps = run(slow_stream([1, 2, 3, 4]), end_us=10 * W)
    assert len(reps) == 1
    rep = reps[0]
    assert rep.kind == "S2_comm"
    assert rep.detected_at_us == 5 * W
    assert rep.onset_us == 2 * W
    assert rep.R == Fraction(7, 2) and rep.T_base == 10 * S


def test_slow_three_windows_not_enough():
    assert run(slow_stream([1, 2, 3]), end_us=10 * W) == []


def test_slow_streak_reset_by_clean_window():
    items = slow_stream([1, 2, 3])
    items += round_of(10, 4 * W + S, [10 * S] * 4)
    items += round_of(11, 5 * W + S, [45 * S] + [44 * S] * 3)
    assert run(items, end_us=10 * W) == []


def test_slow_single_window_then_clean():
    items = slow_stream([1])
    for i, k in enumerate(range(2, 8)):
        items += round_of(10 + i, k * W + S, [10 * S] * 4)
    an = Analyzer(cfg())
    assert list(diagnose(time_sorted(items), end_us=10 * W, analyzer=an)) == []
    assert an.comms[1].counter.count == 0


def test_ratio_at_threshold_never_alerts():
    assert run(slow_stream(range(1, 9), t_max=40 * S, t_min=39 * S), end_us=12 * W) == []


def test_slow_at_start_uses_configured_baseline():
    items = [ring()]
    for k in range(1, 5):
        items += round_of(k, k * W + S, [45 * S] + [44 * S] * 3)
    rep, = run(items, cfg(m_rounds_cap=100, m_time_cap_us=20 * W), end_us=10 * W)
    assert rep.evidence["phase"] == "slow_at_start" and rep.T_base == 10 * S


def test_estimated_theta_takes_over():
    # near-constant clean history pins theta at its floor of 1; R = 1.5 then alerts
    items = [ring()] + learning_rounds()
    for k in range(1, 31):
        items += round_of(k + 3, k * W + S, [10 * S, 10 * S + k % 3, 10 * S, 10 * S])
    for k in range(31, 35):
        items += round_of(k + 3, k * W + S, [25 * S] + [24 * S] * 3)
    an = Analyzer(cfg(auto_theta=True))
    reps = list(diagnose(time_sorted(items), end_us=40 * W, analyzer=an))
    assert an.theta == 1.0
    assert [r.kind for r in reps] == ["S2_comm"]


def locate(durations, rates, base=10):
    snaps = {r: snap(r, 1, 0, d, rates=rates[r]) for r, d in enumerate(durations)}
    return locate_slow(range(len(durations)), snaps, BaselineState(Fraction(base), LEARNED), cfg())


def test_locate_comp_slow_blames_shortest():
    q = (Fraction(1, 4),) * 2
    kind, roots, ev = locate([50, 50, 50, 11], [q] * 4)
    assert (kind, roots) == ("S1_comp", [3])
    assert ev["phase"] == "in_communication"


def test_locate_comm_slow_blames_min_rate():
    q, slow = (Fraction(1, 4),) * 2, (Fraction(1, 40), Fraction(1, 38))
    kind, roots, _ = locate([50, 49, 48, 48], [q, slow, q, q])
    assert (kind, roots) == ("S2_comm", [1])


def test_locate_comm_slow_rate_tiebreak():
    # the victim is slow in both directions, its neighbours in one
    q = Fraction(1, 4)
    kind, roots, _ = locate([50, 49, 48, 48], [(Fraction(1, 40), q), (Fraction(1, 40), Fraction(1, 40)),
                                                 (q, Fraction(1, 40)), (q, q)])
    assert (kind, roots) == ("S2_comm", [1])


def test_locate_mixed_reports_both():
    q, slow = (Fraction(1, 4),) * 2, (Fraction(1, 40),) * 2
    kind, roots, _ = locate([50, 50, 30, 50], [q, q, q, slow])
    assert kind == "S3_mixed" and roots == [2, 3]


def test_locate_slow_missing_member():
    snaps = {0: snap(0, 1, 0, 50)}
    with pytest.raises(InsufficientEvidenceError):
        locate_slow([0, 1], snaps, BaselineState(Fraction(10), LEARNED), cfg())


# --------------------------------------------------------------- properties
durations_st = st.lists(st.integers(1, 10**6), min_size=2, max_size=12)


@settings(max_examples=300)
@given(durations_st, st.integers(1, 10**6), st.integers(1, 1000), st.data())
def test_location_scale_invariant(durations, base, scale, data):
    assume(max(durations) > base)
    rates = [data.draw(st.tuples(st.integers(1, 50), st.integers(1, 50))) for _ in durations]
    rates = [(Fraction(1, a), Fraction(1, b)) for a, b in rates]
    k1, r1, _ = locate(durations, rates, base)
    k2, r2, _ = locate([d * scale for d in durations], rates, base * scale)
    assert (k1, r1) == (k2, r2)
    window = {i: (d, d // 2) for i, d in enumerate(durations)}
    scaled = {i: (d * scale, d // 2 * scale) for i, d in enumerate(durations)}
    assert select_extreme_round(window)[0] == select_extreme_round(scaled)[0]
    assert slow_ratio(max(durations), base) == slow_ratio(max(durations) * scale, base * scale)


def scripted_history(rng, n=4, rounds=40):
    """Mostly clean rounds with an occasional slowdown streak or stall."""
    items = [ring(n)] + learning_rounds(n)
    rnd, k = 3, 1
    while rnd < rounds:
        if rng.random() < 0.2:
            dur = [45 * S] + [44 * S] * (n - 1)
        elif rng.random() < 0.1:
            dur = [50 * S] * (n - 1) + [12 * S]
        else:
            dur = [10 * S + rng.randrange(S) for _ in range(n)]
        items += round_of(rnd, k * W + rng.randrange(S), dur)
        rnd, k = rnd + 1, k + 1
    if rng.random() < 0.5:
        items += stalled(n, rnd, k * W, k * W + S)
    return items, (k + 10) * W


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.data())
def test_barrier_rounds_change_no_verdict(seed, data):
    items, end = scripted_history(random.Random(seed))
    plain = [(r.kind, r.root_cause_ranks, r.R, r.P) for r in run(items, end_us=end)]
    extra = []
    for i in range(data.draw(st.integers(1, 8))):
        rnd = 10_000 + i
        start = data.draw(st.integers(0, end // 2))
        if data.draw(st.booleans()):
            dur = data.draw(st.integers(1, 1000 * S))
            extra += round_of(rnd, start, [dur] * 4, desc=BARRIER)
        else:
            extra += stalled(4, rnd, start, start + 500 * S, desc=BARRIER)
    with_barriers = [(r.kind, r.root_cause_ranks, r.R, r.P) for r in run(items + extra, end_us=end)]
    assert with_barriers == plain


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_identical_streams_identical_reports(seed):
    items, end = scripted_history(random.Random(seed))
    a = [r.format() for r in run(items, end_us=end)]
    b = [r.format() for r in run(list(items), end_us=end)]
    assert a == b


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_evidence_rederives_verdict(seed):
    items, end = scripted_history(random.Random(seed), rounds=60)
    c = cfg()
    for rep in run(items, c, end_us=end):
        if rep.kind.startswith("S"):
            assert slow_ratio(rep.T_max, rep.T_base) == rep.R
            assert p_ratio(rep.T_max, rep.T_min, rep.T_base) == rep.P
            assert rep.R > Fraction(rep.evidence["theta"])
            want = "S1_comp" if rep.P > Fraction(c.beta) else "S2_comm" if rep.P < Fraction(c.alpha) else "S3_mixed"
            assert rep.kind == want
        else:
            counts = rep.evidence["counts"]
            assert all(counts[r] == min(counts.values()) for r in rep.root_cause_ranks)


def test_unknown_items_are_skipped():
    an = Analyzer(cfg())
    items = [ring(), "garbage", snap(7, 0, 0, 5), snap(0, 0, 0, 5, comm=42)]
    assert list(diagnose(items, analyzer=an, end_us=S)) == []
    assert an.skipped == 3


def test_release_forgets_communicator():
    from commdiag.sim.scenario import CommRelease
    an = Analyzer(cfg())
    an.ingest(ring())
    an.ingest(CommRelease(1, 5))
    with pytest.raises(UnknownCommunicatorError):
        an.groups(1)
