"""Scenario scripts: parse, run through simulator and probes, and generate.

A script is line oriented; ``#`` starts a comment::

    cluster 16 1 7 bw=2000 lat=5 jitter=100 batch=1000
    config initial_baseline_us=100000
    comm 1 ring 0-15
    fault CommSlow 3 12 factor=0.2
    repeat 40
      round 1 AllReduce Ring Simple 16777216
      advance 25000000
    end
    expect S2 3

``round`` posts the communicator's next round; ``advance`` moves the clock
forward by the given number of microseconds.
"""

from __future__ import annotations

import random
import shlex
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

from ..errors import DiagError, ScenarioSyntaxError
from ..probe import ProbeConfig, attach_probes
from ..trace_model import Algorithm, MetricSnapshot, OperationDescriptor, OpName, Protocol, parse_enum
from .cluster import Cluster, ClusterConfig, FaultKind, FaultSpec

REPORT_KINDS = ("H1", "H2", "H3", "S1_comp", "S2_comm", "S3_mixed")

FAULT_TO_REPORT = {
    FaultKind.NOT_ENTERED_HANG: "H1",
    FaultKind.INCONSISTENT_HANG: "H2",
    FaultKind.HARDWARE_FAULT: "H3",
    FaultKind.COMP_SLOW: "S1_comp",
    FaultKind.COMM_SLOW: "S2_comm",
    FaultKind.MIXED_SLOW: "S3_mixed",
}

PROBE_KEYS = {"sample_interval_us", "heartbeat_interval_us", "rate_window_samples"}


def canonical_kind(text: str) -> str:
    """Map H1/S2/S2_comm/CommSlow/... to a report kind name."""
    for kind in REPORT_KINDS:
        if text.lower() in (kind.lower(), kind.split("_")[0].lower()):
            return kind
    for fk, kind in FAULT_TO_REPORT.items():
        if text.lower() == fk.value.lower():
            return kind
    raise ValueError(f"unknown anomaly kind {text!r}")


@dataclass(frozen=True)
class CommDecl:
    comm_id: int
    algorithm: Algorithm
    members: tuple[int, ...]
    created_us: int


@dataclass(frozen=True)
class CommRelease:
    comm_id: int
    at_us: int


StreamItem = Union[CommDecl, CommRelease, MetricSnapshot]


@dataclass(frozen=True)
class Expectation:
    kind: str
    victim: int


@dataclass
class ScenarioResult:
    trace: list = field(default_factory=list)
    stream: list = field(default_factory=list)
    expectations: list[Expectation] = field(default_factory=list)
    config: dict[str, str] = field(default_factory=dict)
    end_us: int = 0
    rounds_posted: int = 0
    cluster: Optional[Cluster] = None

    @property
    def snapshots(self) -> list[MetricSnapshot]:
        return [s for s in self.stream if isinstance(s, MetricSnapshot)]

    def trace_lines(self) -> list[str]:
        return self.cluster.format_trace() if self.cluster is not None else []


# ---------------------------------------------------------------- parsing
@dataclass(frozen=True)
class Command:
    lineno: int
    verb: str
    args: tuple[str, ...]


_ARITY = {"cluster": 3, "comm": 3, "round": 5, "fault": 3, "advance": 1,
          "config": 1, "expect": 2, "release": 1, "repeat": 1, "end": 0}


def _kv(lineno: int, items) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ScenarioSyntaxError(lineno, f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _int(lineno: int, text: str, what: str) -> int:
    try:
        return int(text.replace("_", ""))
    except ValueError:
        raise ScenarioSyntaxError(lineno, f"{what} must be an integer, got {text!r}") from None


def parse_members(lineno: int, text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(_int(lineno, lo, "rank"), _int(lineno, hi, "rank") + 1))
        elif part:
            out.append(_int(lineno, part, "rank"))
    return tuple(out)


def parse_descriptor(lineno: int, op: str, algo: str, proto: str, size: str) -> OperationDescriptor:
    try:
        return OperationDescriptor(parse_enum(OpName, op), parse_enum(Algorithm, algo),
                                   parse_enum(Protocol, proto), _int(lineno, size, "BYTES"))
    except ValueError as e:
        raise ScenarioSyntaxError(lineno, str(e)) from None


def parse_script(script: str) -> list[Command]:
    """Tokenize and expand ``repeat`` blocks; check arity and keywords."""
    stack: list[tuple[int, int, list[Command]]] = []
    out: list[Command] = []
    for lineno, raw in enumerate(script.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            words = shlex.split(line)
        except ValueError as e:
            raise ScenarioSyntaxError(lineno, str(e)) from None
        verb, args = words[0].lower(), tuple(words[1:])
        if verb not in _ARITY:
            raise ScenarioSyntaxError(lineno, f"unknown command {words[0]!r}")
        if len(args) < _ARITY[verb] or (verb in ("advance", "release", "repeat", "end", "expect") and len(args) != _ARITY[verb]):
            raise ScenarioSyntaxError(lineno, f"{verb} expects {_ARITY[verb]} argument(s)")
        if verb == "repeat":
            stack.append((lineno, _int(lineno, args[0], "repeat count"), out))
            out = []
            continue
        if verb == "end":
            if not stack:
                raise ScenarioSyntaxError(lineno, "end without repeat")
            _, count, outer = stack.pop()
            outer.extend(out * count)
            out = outer
            continue
        if verb == "fault":
            try:
                FaultKind(_fault_name(args[0]))
            except ValueError:
                raise ScenarioSyntaxError(lineno, f"unknown fault kind {args[0]!r}") from None
        if verb == "expect":
            try:
                canonical_kind(args[0])
            except ValueError as e:
                raise ScenarioSyntaxError(lineno, str(e)) from None
        out.append(Command(lineno, verb, args))
    if stack:
        raise ScenarioSyntaxError(stack[-1][0], "repeat without end")
    return out


def _fault_name(text: str) -> str:
    for fk in FaultKind:
        if fk.value.lower() == text.lower():
            return fk.value
    return text


def _fault(cmd: Command) -> FaultSpec:
    ln = cmd.lineno
    kind = FaultKind(_fault_name(cmd.args[0]))
    victim = _int(ln, cmd.args[1], "victim")
    trigger = _int(ln, cmd.args[2], "round")
    kv = _kv(ln, cmd.args[3:])
    params: dict = {}
    known = {"delay", "factor", "fraction", "substitute", "comm", "until"}
    for k in kv:
        if k not in known:
            raise ScenarioSyntaxError(ln, f"unknown fault parameter {k!r}")
    try:
        if "delay" in kv:
            params["entry_delay_us"] = _int(ln, kv["delay"], "delay")
        if "factor" in kv:
            params["bandwidth_factor"] = float(Fraction(kv["factor"]))
        if "fraction" in kv:
            params["freeze_after_fraction"] = float(Fraction(kv["fraction"]))
        if "substitute" in kv:
            parts = kv["substitute"].split("/")
            if len(parts) != 4:
                raise ScenarioSyntaxError(ln, "substitute is OP/ALGO/PROTO/BYTES")
            params["substitute"] = parse_descriptor(ln, *parts)
        if "comm" in kv:
            params["comm_id"] = _int(ln, kv["comm"], "comm")
        if "until" in kv:
            params["until_round"] = _int(ln, kv["until"], "until")
        return FaultSpec(kind, victim, trigger, **params)
    except (ValueError, DiagError) as e:
        if isinstance(e, ScenarioSyntaxError):
            raise
        raise ScenarioSyntaxError(ln, str(e)) from None


def _cluster_config(cmd: Command, seed: Optional[int], record_trace: bool) -> ClusterConfig:
    ln = cmd.lineno
    n, ch, sd = (_int(ln, a, w) for a, w in zip(cmd.args[:3], ("N", "CHANNELS", "SEED")))
    kv = _kv(ln, cmd.args[3:])
    names = {"bw": "link_bandwidth_bytes_per_us", "lat": "base_latency_us",
             "jitter": "dispatch_jitter_us", "batch": "batch_us", "mode": "measurement_enabled"}
    params: dict = {}
    for k, v in kv.items():
        if k not in names:
            raise ScenarioSyntaxError(ln, f"unknown cluster parameter {k!r}")
        if k == "bw":
            params[names[k]] = float(Fraction(v))
        elif k == "mode":
            params[names[k]] = bool(_int(ln, v, k))
        else:
            params[names[k]] = _int(ln, v, k)
    return ClusterConfig(n, ch, seed=sd if seed is None else seed, record_trace=record_trace, **params)


def script_config(script: str) -> dict[str, str]:
    """The ``config KEY=VAL`` overrides embedded in a script."""
    out: dict[str, str] = {}
    for cmd in parse_script(script):
        if cmd.verb == "config":
            out.update(_kv(cmd.lineno, cmd.args))
    return out


# ---------------------------------------------------------------- running
def run_scenario(script: str, seed: Optional[int] = None, probe_config: Optional[ProbeConfig] = None,
                 overrides: Optional[dict[str, str]] = None, record_trace: bool = True) -> ScenarioResult:
    """Execute a script; return the event trace plus every emitted snapshot."""
    commands = parse_script(script)
    result = ScenarioResult()
    for cmd in commands:
        if cmd.verb == "config":
            result.config.update(_kv(cmd.lineno, cmd.args))
    if overrides:
        result.config.update(overrides)
    if probe_config is None:
        try:
            probe_config = ProbeConfig(**{k: int(v) for k, v in result.config.items() if k in PROBE_KEYS})
        except (ValueError, DiagError) as e:
            raise ScenarioSyntaxError(0, f"bad probe configuration: {e}") from None
    cluster: Optional[Cluster] = None
    hub = None
    comms = {}
    for cmd in commands:
        ln, verb, args = cmd.lineno, cmd.verb, cmd.args
        if verb in ("config",):
            continue
        if verb == "expect":
            result.expectations.append(Expectation(canonical_kind(args[0]), _int(ln, args[1], "victim")))
            continue
        if verb == "cluster":
            if cluster is not None:
                raise ScenarioSyntaxError(ln, "cluster declared twice")
            try:
                cluster = Cluster(_cluster_config(cmd, seed, record_trace))
            except DiagError as e:
                if isinstance(e, ScenarioSyntaxError):
                    raise
                raise ScenarioSyntaxError(ln, str(e)) from None
            result.cluster = cluster
            result.trace = cluster.trace
            hub = attach_probes(cluster, result.stream.append, probe_config)
            continue
        if cluster is None:
            raise ScenarioSyntaxError(ln, f"{verb} before cluster")
        try:
            if verb == "comm":
                comm_id = _int(ln, args[0], "ID")
                algo = parse_enum(Algorithm, args[1])
                comm = cluster.create_communicator(parse_members(ln, args[2]), algo, comm_id)
                comms[comm_id] = comm
                result.stream.append(CommDecl(comm_id, algo, comm.members, cluster.now_us))
            elif verb == "round":
                comm = comms.get(_int(ln, args[0], "COMM"))
                if comm is None:
                    raise ScenarioSyntaxError(ln, f"unknown communicator {args[0]}")
                desc = parse_descriptor(ln, *args[1:5])
                cluster.post_collective(comm, desc, comm.next_round)
                result.rounds_posted += 1
            elif verb == "fault":
                cluster.add_fault(_fault(cmd))
            elif verb == "advance":
                _advance(cluster, hub, cluster.now_us + _int(ln, args[0], "USEC"))
            elif verb == "release":
                comm_id = _int(ln, args[0], "COMM")
                hub.release(comm_id)
                cluster.destroy_communicator(comm_id)
                comms.pop(comm_id, None)
                result.stream.append(CommRelease(comm_id, cluster.now_us))
        except ScenarioSyntaxError:
            raise
        except (DiagError, ValueError) as e:
            raise ScenarioSyntaxError(ln, str(e)) from None
    result.end_us = cluster.now_us if cluster is not None else 0
    return result


def _advance(cluster: Cluster, hub, target: int) -> None:
    hb = hub.config.heartbeat_interval_us
    h = (cluster.now_us // hb + 1) * hb
    while h <= target:
        cluster.advance(h)
        hub.heartbeat(h)
        h += hb
    cluster.advance(target)


# ---------------------------------------------------------------- generation
@dataclass(frozen=True)
class Workload:
    """Shape of a generated single-communicator training loop."""

    ranks: int = 16
    channels: int = 1
    bandwidth: int = 2000
    latency_us: int = 5
    jitter_us: int = 100
    batch_us: int = 1000
    data_bytes: int = 16 * 1024 * 1024
    period_us: int = 45_000_000
    # first round that may be slowed; the baseline is learned by then
    learning_rounds: int = 4
    initial_baseline_us: int = 1_000_000

    @property
    def descriptor(self) -> OperationDescriptor:
        return OperationDescriptor(OpName.ALL_REDUCE, Algorithm.RING, Protocol.SIMPLE, self.data_bytes)


def _one_round_durations(w: Workload, seed: int, faults: list[FaultSpec]) -> dict[int, int]:
    c = Cluster(ClusterConfig(w.ranks, w.channels, w.bandwidth, w.latency_us, seed,
                              w.jitter_us, w.batch_us, record_trace=True))
    comm = c.create_communicator(range(w.ranks), Algorithm.RING, 1)
    for f in faults:
        c.add_fault(f)
    c.post_collective(comm, w.descriptor, 0)
    c.advance(10 * w.period_us)
    enter, done = {}, {}
    for t, rank, _, event, _ in c.trace:
        if event == "enter":
            enter[rank] = t
        elif event == "complete":
            done[rank] = t
    return {r: done[r] - enter[r] for r in done}


def mixed_p(w: Workload, victim: int, factor: float, delay_us: int, seed: int = 0,
            base_us: Optional[int] = None) -> float:
    """Duration-spread share of the slowdown of one mixed-fault round."""
    if base_us is None:
        base_us = max(_one_round_durations(w, seed, []).values())
    d = _one_round_durations(w, seed, [FaultSpec(FaultKind.MIXED_SLOW, victim, 0, entry_delay_us=delay_us,
                                                 bandwidth_factor=factor)])
    tmax, tmin = max(d.values()), min(d.values())
    return (tmax - tmin) / (tmax - base_us)


def calibrate_mixed_delay(w: Workload, victim: int, factor: float, seed: int = 0, target: float = 0.5) -> int:
    """Entry delay that, combined with ``factor``, puts the mixed ratio near ``target``.

    Starts from the closed form (delay equal to the extra time the throttle
    costs) and refines with a few secant steps against the simulator.
    """
    base = max(_one_round_durations(w, seed, []).values())
    slow = max(_one_round_durations(w, seed, [FaultSpec(FaultKind.COMM_SLOW, victim, 0,
                                                        bandwidth_factor=factor)]).values())
    d0 = max(1, slow - base)
    p0 = mixed_p(w, victim, factor, d0, seed, base)
    for _ in range(4):
        if abs(p0 - target) < 0.02 or not 0 < p0 < 1:
            break
        # P behaves like d / (d + c); solve that model for the target
        d1 = max(1, round(d0 * target * (1 - p0) / (p0 * (1 - target))))
        if d1 == d0:
            break
        d0, p0 = d1, mixed_p(w, victim, factor, d1, seed, base)
    return d0


def generate_scenario(kind: str, seed: int, workload: Optional[Workload] = None) -> str:
    """A single-fault scenario on one ring communicator with randomized victim,
    trigger round and fault strength, plus its ``expect`` line."""
    w = workload or Workload()
    rng = random.Random(seed)
    kind = canonical_kind(kind)
    victim = rng.randrange(w.ranks)
    desc = w.descriptor
    lines = [
        f"# generated {kind} scenario, seed {seed}",
        f"cluster {w.ranks} {w.channels} {seed} bw={w.bandwidth} lat={w.latency_us} "
        f"jitter={w.jitter_us} batch={w.batch_us}",
        f"config initial_baseline_us={w.initial_baseline_us}",
        f"comm 1 ring 0-{w.ranks - 1}",
    ]
    post = f"round 1 {desc.op_name.value} {desc.algorithm.value} {desc.protocol.value} {desc.data_size_bytes}"
    if kind.startswith("H"):
        trigger = rng.randrange(1, 4)
        if kind == "H1":
            fault = f"fault NotEnteredHang {victim} {trigger}"
        elif kind == "H2":
            fault = f"fault InconsistentHang {victim} {trigger} substitute=AllReduce/Ring/Simple/{desc.data_size_bytes // 2}"
        else:
            fault = f"fault HardwareFault {victim} {trigger} fraction={rng.choice(['1/4', '1/2', '3/4'])}"
        lines += [fault, f"repeat {trigger + 1}", f"  {post}", f"  advance {w.period_us}", "end",
                  "advance 300000000"]
    else:
        trigger = w.learning_rounds + rng.randrange(0, 3)
        factor = Fraction(rng.randrange(10, 21), 100)
        if kind == "S1_comp":
            fault = f"fault CompSlow {victim} {trigger} delay={rng.randrange(1_000_000, 10_000_001)}"
        elif kind == "S2_comm":
            fault = f"fault CommSlow {victim} {trigger} factor={factor}"
        else:
            delay = calibrate_mixed_delay(w, victim, float(factor), seed)
            fault = f"fault MixedSlow {victim} {trigger} delay={delay} factor={factor}"
        # enough rounds to fill the streak of flagged windows
        total = trigger + -(-4 * 60_000_000 // w.period_us) + 2
        lines += [fault, f"repeat {total}", f"  {post}", f"  advance {w.period_us}", "end"]
    lines.append(f"expect {kind.split('_')[0]} {victim}")
    return "\n".join(lines) + "\n"
