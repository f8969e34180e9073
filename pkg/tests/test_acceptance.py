"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible in
``pytest -v`` output even without ``-s``) before asserting.
"""

import random
import struct
import time
from fractions import Fraction

import pytest

import test_analyzer
import test_collective_sim
import test_collector
import test_probe
import test_trace_model
from commdiag import scenarios
from commdiag.analyzer import (
    AnalyzerConfig,
    BaselineState,
    diagnose,
    locate_hang,
    locate_slow,
    p_ratio,
    select_extreme_round,
    slow_ratio,
    update_baseline,
)
from commdiag.collector import Collector, StreamEnd, TraceConfig, load_collector
from commdiag.probe import Probe, ProbeConfig
from commdiag.sim.scenario import REPORT_KINDS, generate_scenario, run_scenario
from commdiag.trace_model import (
    FRAME_SIZE,
    Algorithm,
    Direction,
    MetricSnapshot,
    OperationDescriptor,
    OpName,
    ProbingFrame,
    Protocol,
    TraceId,
    decode_frame,
    encode_frame,
    make_trace_id,
)

SEEDS = 50
KINDS = ("H1", "H2", "H3", "S1", "S2", "S3")


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def diagnose_scenario(text, seed=None):
    result = run_scenario(text, seed=seed, record_trace=False)
    config = AnalyzerConfig.from_overrides(result.config)
    return result, list(diagnose(result.stream, config, end_us=result.end_us))


# -------------------------------------------------------- 1: soundness
@pytest.fixture(scope="module")
def single_fault_runs():
    runs = []
    start = time.perf_counter()
    for kind in KINDS:
        for seed in range(SEEDS):
            result, reports = diagnose_scenario(generate_scenario(kind, seed))
            runs.append((kind, seed, result, reports))
    return runs, time.perf_counter() - start


def test_criterion_1_six_way_soundness(single_fault_runs, verdict):
    runs, wall = single_fault_runs
    wrong = []
    for kind, seed, result, reports in runs:
        want, = result.expectations
        ok = (len(reports) == 1 and reports[0].kind == want.kind and want.victim in reports[0].root_cause_ranks
              and result.cluster.config.num_ranks == 16)
        if not ok:
            wrong.append((kind, seed, [r.format()[:120] for r in reports]))
    per_kind = {k: sum(1 for r in runs if r[0] == k and (r[0], r[1]) not in {(w[0], w[1]) for w in wrong})
                for k in KINDS}
    detail = (f"{len(runs) - len(wrong)}/{len(runs)} correct "
              f"({', '.join(f'{k} {v}/{SEEDS}' for k, v in per_kind.items())}), wall {wall:.1f} s")
    verdict(1, not wrong and wall < 60, detail + (f" failures {wrong[:3]}" if wrong else ""))


def test_bundled_single_fault_scenarios():
    for kind, name in scenarios.SINGLE_FAULT.items():
        result, reports = diagnose_scenario(scenarios.read(name))
        want, = result.expectations
        assert [r.kind for r in reports] == [want.kind]
        assert want.victim in reports[0].root_cause_ranks


# ------------------------------------------------- 2: no false positives
def test_criterion_2_zero_false_positives(verdict):
    result, reports = diagnose_scenario(scenarios.read("fault_free_mixed"))
    snaps = [s for s in result.stream if isinstance(s, MetricSnapshot)]
    rounds = {(s.trace_id.comm_id, s.trace_id.op_counter) for s in snaps if s.completed}
    descs = {s.descriptor for s in snaps}
    coverage = ({d.algorithm for d in descs} == set(Algorithm) and {d.protocol for d in descs} == set(Protocol)
                and any(d.data_size_bytes <= 4 for d in descs) and len({d.data_size_bytes for d in descs}) >= 4)
    ok = not reports and result.rounds_posted == 1000 and len(rounds) == 1000 and coverage
    verdict(2, ok, f"{len(reports)} reports over {len(rounds)} completed rounds "
                   f"({len(descs)} descriptors, ring+tree, 3 protocols, barriers included)")


# ---------------------------------------------------- 3: rate arithmetic
def scripted_rate(writes, end_us):
    frame = ProbingFrame(num_channels=1)
    probe = Probe(0, ProbeConfig(sample_interval_us=1000))
    tid = make_trace_id(1, 0)
    h = frame.begin_round(tid)
    desc = OperationDescriptor(OpName.ALL_REDUCE, Algorithm.RING, Protocol.SIMPLE, 1 << 20)
    probe.begin(frame, tid, desc, h.block, 0)
    probe.enter(tid, 0)
    for t, delta in writes:
        probe.before_write(tid, t)
        frame.record(h.block, 0, Direction.SEND, delta)
    return probe.emit_for(tid, "completion", end_us)


def test_criterion_3_rate_arithmetic(verdict):
    normal = scripted_rate([(500, 4), (2500, 4)], 3000)
    slow = scripted_rate([(500, 2)] + [(k * 1000 + 500, 1) for k in range(1, 7)], 7000)
    ok = (normal.send_rate == Fraction(1, 2) and slow.send_rate == Fraction(1, 7)
          and normal.send_total == slow.send_total == 8)
    verdict(3, ok, f"normal {normal.send_rate}, slow {slow.send_rate} (8 sends each, 1 ms sampling)")


# -------------------------------------------------- 4: formula conformance
def test_criterion_4_formula_oracles(verdict):
    rng = random.Random(2024)
    n = 10_000

    def q():
        return Fraction(rng.randint(1, 10**6), rng.randint(1, 1000))

    bad = {"update_baseline": 0, "select_extreme_round": 0, "slow_ratio": 0, "p_ratio": 0}
    for _ in range(n):
        init, m = q(), rng.randint(1, 12)
        maxima = [q() for _ in range(rng.randint(1, 20))]
        st = BaselineState(init, m=m)
        for r, t in enumerate(maxima, 1):
            update_baseline(st, r, t)
            if st.value_us != test_analyzer.baseline_oracle(init, m, maxima, r):
                bad["update_baseline"] += 1
                break
    for _ in range(n):
        window = {}
        for rnd in rng.sample(range(10_000), rng.randint(1, 15)):
            a, b = q(), q()
            window[rnd] = (max(a, b), min(a, b))
        if select_extreme_round(window) != test_analyzer.extreme_oracle(window):
            bad["select_extreme_round"] += 1
    for _ in range(n):
        t_max, t_base = q(), q()
        if slow_ratio(t_max, t_base) != (t_max - t_base) / t_base:
            bad["slow_ratio"] += 1
    for _ in range(n):
        t_base, t_min, t_max = sorted([q(), q(), q()])
        if t_max == t_base:
            t_max += 1
        want = min(Fraction(1), max(Fraction(0), (t_max - t_min) / (t_max - t_base)))
        if p_ratio(t_max, t_min, t_base) != want:
            bad["p_ratio"] += 1
    verdict(4, not any(bad.values()),
            f"{n} randomized inputs per function, exact rational mismatches {bad}")


# ---------------------------------------------------- 5: latency envelope
def test_criterion_5_latency_envelope(single_fault_runs, verdict):
    runs, _ = single_fault_runs
    cfg = AnalyzerConfig()
    slow_bound = cfg.repetition_threshold * cfg.slow_window_us + cfg.tick_us
    worst = {"hang": 0, "slow": 0, "end_to_end": 0}
    bad = []
    for kind, seed, result, reports in runs:
        for rep in reports:
            lat = rep.detection_latency_us
            entered = min(s.enter_time_us for s in result.stream
                          if isinstance(s, MetricSnapshot) and s.trace_id.comm_id == rep.comm_id
                          and s.trace_id.op_counter == rep.round)
            e2e = rep.located_at_us - entered
            if rep.kind.startswith("H"):
                ok = cfg.hang_threshold_us < lat <= cfg.hang_threshold_us + cfg.tick_us
                worst["hang"] = max(worst["hang"], lat)
            else:
                ok = lat <= slow_bound
                worst["slow"] = max(worst["slow"], lat)
            worst["end_to_end"] = max(worst["end_to_end"], e2e)
            if not ok or e2e > 6 * cfg.slow_window_us or rep.located_at_us < rep.detected_at_us:
                bad.append((kind, seed, lat, e2e))
    detail = (f"worst hang {worst['hang'] / 1e6:.0f} s (bound 300+1), worst slow {worst['slow'] / 1e6:.0f} s "
              f"(bound {slow_bound / 1e6:.0f}), worst fault-to-location {worst['end_to_end'] / 1e6:.0f} s "
              f"(bound 360) over {len(runs)} runs")
    verdict(5, not bad, detail + (f" violations {bad[:3]}" if bad else ""))


# ------------------------------------------------------- 6: frame layout
def test_criterion_6_frame_layout(verdict):
    rng = random.Random(6)
    f = ProbingFrame(num_channels=3)
    blocks = [(TraceId(0, 0, 0), [])] * 8
    for r in range(3):
        h = f.begin_round(make_trace_id(9, r))
        f.record(h.block, 0, Direction.SEND, 10 + r)
        f.record(h.block, 2, Direction.RECV, 20 + r)
        blocks[r] = (TraceId(9, r, 0), [(10 + r, 0), (0, 0), (0, 20 + r)])
    layout_ok = encode_frame(f) == test_trace_model.layout_oracle((3, 1, 3, 3), blocks)
    header_ok = struct.unpack_from("<Q", encode_frame(f), 0)[0] == 3
    failures = 0
    for _ in range(10_000):
        g = ProbingFrame(num_channels=rng.randint(1, 8), enabled=rng.random() > 0.05)
        comm = rng.getrandbits(64)
        for r in range(rng.randint(0, 12)):
            h = g.begin_round(make_trace_id(comm, r, rng.randint(0, 3)))
            for _ in range(rng.randint(0, 3)):
                g.record(h.block, rng.randrange(g.num_channels), rng.choice(list(Direction)),
                         rng.randint(1, 2**32))
        raw = encode_frame(g)
        back = decode_frame(raw)
        if len(raw) != FRAME_SIZE or back != g or encode_frame(back) != raw:
            failures += 1
    ok = FRAME_SIZE == 1184 and layout_ok and header_ok and not failures
    verdict(6, ok, f"{FRAME_SIZE} bytes, offsets match field-by-field layout, "
                   f"{10_000 - failures}/10000 randomized frames round-trip bit-exactly")


# -------------------------------------------------------- 7: scalability
DESC = OperationDescriptor(OpName.ALL_REDUCE, Algorithm.RING, Protocol.SIMPLE, 16 << 20)


def synthetic_group(n):
    rng = random.Random(n)
    hung, done = {}, {}
    for r in range(n):
        c = rng.randint(100, 200) if r != n // 3 else 10
        hung[r] = MetricSnapshot(r, TraceId(1, 5, 0), DESC, ((c, c),), Fraction(0), Fraction(0), 0, None,
                                 400_000_000, "heartbeat")
        d = rng.randint(40_000_000, 45_000_000)
        rate = Fraction(1, rng.randint(10, 40))
        done[r] = MetricSnapshot(r, TraceId(1, 6, 0), DESC, ((c, c),), rate, rate, 0, d, d)
    return hung, done, {r: 5 for r in range(n)}


def location_time(n, repeat=7):
    hung, done, latest = synthetic_group(n)
    members = list(range(n))
    base = BaselineState(Fraction(10_000_000), "learned")
    cfg = AnalyzerConfig()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        locate_hang(members, hung, latest, 5)
        locate_slow(members, done, base, cfg)
        best = min(best, time.perf_counter() - t)
    return best


def test_criterion_7_scalability(verdict):
    sizes = [16, 256, 1024, 4096]
    times = [location_time(n) for n in sizes]
    mx, my = sum(sizes) / 4, sum(times) / 4
    sxx = sum((x - mx) ** 2 for x in sizes)
    slope = sum((x - mx) * (y - my) for x, y in zip(sizes, times)) / sxx
    icpt = my - slope * mx
    ss_res = sum((y - (icpt + slope * x)) ** 2 for x, y in zip(sizes, times))
    ss_tot = sum((y - my) ** 2 for y in times)
    r2 = 1 - ss_res / ss_tot
    ok = r2 >= 0.95 and times[-1] < 1.0
    verdict(7, ok, "location wall time " + ", ".join(f"{n}: {t * 1e3:.2f} ms" for n, t in zip(sizes, times))
            + f"; linear fit R^2 = {r2:.4f}")


def test_large_communicator_single_report():
    n = 512
    script = "\n".join([
        f"cluster {n} 1 1 bw=2000 lat=5 batch=1000",
        f"comm 1 ring 0-{n - 1}",
        f"fault HardwareFault {n // 2} 0 fraction=1/2",
        "round 1 AllReduce Ring LL 262144",
        "advance 302000000",
    ])
    result, reports = diagnose_scenario(script)
    assert [(r.kind, r.root_cause_ranks) for r in reports] == [("H3", (n // 2,))]


# ------------------------------------------------------ 8: replay equality
def test_criterion_8_replay_equivalence(tmp_path, verdict):
    checked, bad = [], []
    for name in scenarios.names():
        result = run_scenario(scenarios.read(name), record_trace=False)
        live = Collector()
        live.ingest(TraceConfig.of(result.config))
        live.ingest_all(result.stream)
        live.ingest(StreamEnd(result.end_us))
        path = tmp_path / f"{name}.trace"
        live.persist(path)
        loaded = load_collector(path)
        a = [r.format() for r in diagnose(result.stream, AnalyzerConfig.from_overrides(result.config),
                                          end_us=result.end_us)]
        b = [r.format() for r in diagnose(loaded.stream(), AnalyzerConfig.from_overrides(loaded.config),
                                          end_us=loaded.end_us)]
        checked.append(f"{name}:{len(a)}")
        if a != b or loaded.records() != live.records():
            bad.append(name)
    verdict(8, not bad, f"{len(checked)} bundled scenarios replay report-for-report ({', '.join(checked)})"
            + (f"; differing {bad}" if bad else ""))


# ------------------------------------------------------ 9: invariant suite
INVARIANTS = [
    ("trace id round trip", test_trace_model.test_trace_id_round_trip),
    ("frame round trip", test_trace_model.test_frame_round_trip),
    ("arbitrary bytes round trip", test_trace_model.test_arbitrary_bytes_round_trip),
    ("block index period", test_trace_model.test_block_index_period_eight),
    ("channel counters independent", test_trace_model.test_interleaved_channels_independent),
    ("concurrent reader monotone", test_trace_model.test_concurrent_reader_sees_monotone_counts),
    ("ring plan enumerator", test_collective_sim.test_ring_plan_matches_enumerator),
    ("conservation", test_collective_sim.test_conservation_per_channel),
    ("ring uniformity", test_collective_sim.test_fault_free_ring_uniform_counts),
    ("tree role uniformity", test_collective_sim.test_fault_free_tree_role_uniformity),
    ("frozen rank fewest counts", test_collective_sim.test_hardware_fault_victim_has_fewest_counts),
    ("slowed rank finishes last", test_collective_sim.test_comm_slow_victim_finishes_last),
    ("simulator determinism", test_collective_sim.test_hundred_rounds_deterministic),
    ("rate bounds", test_probe.test_rate_bounds),
    ("lazy sampling equals polling", test_probe.test_lazy_sampler_matches_polling),
    ("sampled values monotone", test_probe.test_sampled_values_non_decreasing),
    ("heartbeat liveness", test_probe.test_heartbeat_liveness),
    ("P bounds", test_analyzer.test_p_ratio_bounds),
    ("scale invariance", test_analyzer.test_location_scale_invariant),
    ("barrier exclusion", test_analyzer.test_barrier_rounds_change_no_verdict),
    ("analyzer determinism", test_analyzer.test_identical_streams_identical_reports),
    ("evidence re-derivation", test_analyzer.test_evidence_rederives_verdict),
    ("ingest lossless", test_collector.test_ingest_lossless_for_well_formed),
    ("snapshot line round trip", test_collector.test_snapshot_line_round_trip),
]


def test_criterion_9_invariant_suite(tmp_path_factory, verdict):
    failed = []
    for name, fn in INVARIANTS:
        try:
            fn()
        except Exception as e:  # report every failing property, not just the first
            failed.append(f"{name}: {type(e).__name__}")
    try:
        test_collector.test_persist_load_round_trip(tmp_path_factory)
    except Exception as e:
        failed.append(f"persist/load round trip: {type(e).__name__}")
    total = len(INVARIANTS) + 1
    verdict(9, not failed, f"{total - len(failed)}/{total} property checks hold"
            + (f"; failing {failed}" if failed else ""))
