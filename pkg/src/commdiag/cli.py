"""Command line entry point.

    commdiag run SCENARIO [--config KEY=VAL]... [--seed N] [--out PATH] [--trace PATH]
    commdiag replay TRACE [--config KEY=VAL]... [--out PATH]
    commdiag report SUMMARY... [--csv] [--out PATH]

Exit codes: 0 success (for ``run``, every ``expect`` line met and no other
reports), 1 expectation mismatch, 2 usage, parse or input errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import scenarios
from .analyzer import Analyzer, AnalyzerConfig, AnomalyReport, diagnose
from .collector import Collector, StreamEnd, TraceConfig, load_collector
from .errors import DiagError
from .sim.scenario import PROBE_KEYS, Expectation, canonical_kind, run_scenario

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunSummary:
    scenario: str
    rounds: int = 0
    snapshots: int = 0
    sim_us: int = 0
    wall_s: float = 0.0
    expectations: list[Expectation] = field(default_factory=list)
    # formatted report lines; the text form is what gets persisted and compared
    reports: list[str] = field(default_factory=list)

    def to_text(self, wall: bool = True) -> str:
        lines = [f"scenario {self.scenario}", f"rounds {self.rounds}", f"snapshots {self.snapshots}",
                 f"sim_us {self.sim_us}"]
        if wall:
            lines.append(f"wall_s {self.wall_s:.3f}")
        lines += [f"expect {e.kind} {e.victim}" for e in self.expectations]
        lines += [f"report {r}" for r in self.reports]
        for row in rows_for(self):
            if row.report is not None:
                lines.append(f"latency {row.reported} detect_us={row.detect_latency_us} "
                             f"locate_us={row.locate_latency_us}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunSummary":
        s = cls("")
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            try:
                if key == "scenario":
                    s.scenario = rest
                elif key in ("rounds", "snapshots", "sim_us"):
                    setattr(s, key, int(rest))
                elif key == "wall_s":
                    s.wall_s = float(rest)
                elif key == "expect":
                    kind, victim = rest.split()
                    s.expectations.append(Expectation(canonical_kind(kind), int(victim)))
                elif key == "report":
                    s.reports.append(rest)
                elif key != "latency":
                    raise ValueError(f"unknown field {key!r}")
            except ValueError as e:
                raise UsageError(f"summary line {lineno}: {e}") from None
        if not s.scenario:
            raise UsageError("summary has no scenario line")
        return s


def parse_report(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line.split() if "=" in tok)


# ------------------------------------------------------------------ matching
@dataclass
class Row:
    scenario: str
    expected: str
    victim: Optional[int]
    reported: str
    report: Optional[dict]

    @property
    def detected(self) -> bool:
        return self.report is not None

    @property
    def located(self) -> bool:
        return self.report is not None and self.reported == self.expected

    @property
    def root_correct(self) -> bool:
        return self.located and self.victim in _roots(self.report)

    @property
    def detect_latency_us(self) -> Optional[int]:
        if self.report is None:
            return None
        return int(self.report["detected_us"]) - int(self.report["onset_us"])

    @property
    def locate_latency_us(self) -> Optional[int]:
        if self.report is None:
            return None
        return int(self.report["located_us"]) - int(self.report["detected_us"])

    @property
    def correct(self) -> bool:
        return self.root_correct if self.expected != "-" else not self.detected


def _roots(rep: dict) -> set[int]:
    text = rep.get("roots", "")
    return {int(x) for x in text.split(",") if x and x != "-"}


def rows_for(s: RunSummary) -> list[Row]:
    """Pair expectations with reports: exact kind and victim first, then kind, then family."""
    reports = [parse_report(r) for r in s.reports]
    free = list(range(len(reports)))
    rows: list[Optional[Row]] = [None] * len(s.expectations)
    tests = [
        lambda e, r: r["kind"] == e.kind and e.victim in _roots(r),
        lambda e, r: r["kind"] == e.kind,
        lambda e, r: r["kind"][0] == e.kind[0],
    ]
    for test in tests:
        for i, e in enumerate(s.expectations):
            if rows[i] is not None:
                continue
            for j in free:
                if test(e, reports[j]):
                    rows[i] = Row(s.scenario, e.kind, e.victim, reports[j]["kind"], reports[j])
                    free.remove(j)
                    break
    out = [r if r is not None else Row(s.scenario, e.kind, e.victim, "-", None)
           for r, e in zip(rows, s.expectations)]
    out += [Row(s.scenario, "-", None, reports[j]["kind"], reports[j]) for j in free]
    if not out:
        out.append(Row(s.scenario, "-", None, "-", None))
    return out


def expectations_met(s: RunSummary) -> bool:
    return all(r.correct for r in rows_for(s))


# ------------------------------------------------------------------ commands
def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    allowed = set(AnalyzerConfig.__dataclass_fields__) | PROBE_KEYS
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not value:
            raise UsageError(f"--config expects KEY=VAL, got {pair!r}")
        if key not in allowed:
            raise UsageError(f"unknown configuration key {key!r}")
        out[key] = value.strip()
    return out


def _analyzer_config(config: dict[str, str]) -> AnalyzerConfig:
    try:
        return AnalyzerConfig.from_overrides(config)
    except (DiagError, ValueError, ZeroDivisionError) as e:
        raise UsageError(f"bad analyzer configuration: {e}") from None


def _scenario_text(ref: str) -> tuple[str, str]:
    if os.path.isfile(ref):
        with open(ref, encoding="utf-8") as f:
            return os.path.splitext(os.path.basename(ref))[0], f.read()
    try:
        return ref.removesuffix(scenarios.SUFFIX), scenarios.read(ref)
    except KeyError:
        raise UsageError(f"no scenario file or bundled scenario named {ref!r} "
                         f"(bundled: {', '.join(scenarios.names())})") from None


def _reports_of(stream, config: AnalyzerConfig, end_us: Optional[int]) -> list[AnomalyReport]:
    return list(diagnose(stream, config, end_us=end_us, analyzer=Analyzer(config)))


def cmd_run(args, out) -> int:
    name, text = _scenario_text(args.scenario)
    overrides = _overrides(args.config)
    if args.theta_slow is not None:
        overrides["theta_slow"] = args.theta_slow
    start = time.perf_counter()
    try:
        result = run_scenario(text, seed=args.seed, overrides=overrides, record_trace=False)
    except DiagError as e:
        raise UsageError(f"{name}: {e}") from None
    config = _analyzer_config(result.config)
    collector = Collector()
    collector.ingest(TraceConfig.of(result.config))
    collector.ingest_all(result.stream)
    collector.ingest(StreamEnd(result.end_us))
    reports = _reports_of(collector.stream(), config, result.end_us)
    summary = RunSummary(name, result.rounds_posted, len(result.snapshots), result.end_us,
                         time.perf_counter() - start, list(result.expectations),
                         [r.format() for r in reports])
    if args.trace:
        collector.persist(args.trace)
    return _finish(summary, args, out, EXIT_OK if expectations_met(summary) else EXIT_MISMATCH)


def cmd_replay(args, out) -> int:
    start = time.perf_counter()
    try:
        collector = load_collector(args.trace)
    except (OSError, DiagError, UnicodeDecodeError) as e:
        raise UsageError(f"cannot replay {args.trace}: {e}") from None
    config = collector.config
    config.update(_overrides(args.config))
    reports = _reports_of(collector.stream(), _analyzer_config(config), collector.end_us)
    snaps = [s for s in collector.stream() if hasattr(s, "trace_id")]
    rounds = {(s.trace_id.comm_id, s.trace_id.op_counter) for s in snaps}
    summary = RunSummary(os.path.basename(args.trace), len(rounds), len(snaps), collector.end_us or 0,
                         time.perf_counter() - start, [], [r.format() for r in reports])
    # a replay has nothing to check against; it succeeds once it produced its reports
    return _finish(summary, args, out, EXIT_OK)


def _finish(summary: RunSummary, args, out, code: int) -> int:
    out.write(summary.to_text(wall=False))
    out.write(f"result {'pass' if code == EXIT_OK else 'mismatch'}\n")
    print(f"wall_s {summary.wall_s:.3f}", file=sys.stderr)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(summary.to_text())
    return code


COLUMNS = ["scenario", "expected", "victim", "reported", "detected", "located", "root_correct",
           "detect_latency_us", "locate_latency_us"]


def table_rows(summaries: Sequence[RunSummary]) -> list[list[str]]:
    def mark(b: bool) -> str:
        return "yes" if b else "no"

    def num(v) -> str:
        return "-" if v is None else str(v)

    out = []
    for s in summaries:
        for r in rows_for(s):
            out.append([r.scenario, r.expected, num(r.victim), r.reported, mark(r.detected), mark(r.located),
                        mark(r.root_correct), num(r.detect_latency_us), num(r.locate_latency_us)])
    return out


def format_table(rows: list[list[str]], as_csv: bool = False) -> str:
    if as_csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args, out) -> int:
    summaries = []
    for path in args.summaries:
        try:
            with open(path, encoding="utf-8") as f:
                summaries.append(RunSummary.from_text(f.read()))
        except (OSError, UnicodeDecodeError) as e:
            raise UsageError(f"cannot read summary {path}: {e}") from None
    text = format_table(table_rows(summaries), args.csv)
    out.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- main
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="commdiag", description="Diagnose hangs and slowdowns in simulated collective communication.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate a scenario script and diagnose it")
    run.add_argument("scenario", help=f"script path or bundled name ({', '.join(scenarios.names())})")
    run.add_argument("--config", action="append", default=[], metavar="KEY=VAL",
                     help="analyzer or probe setting; repeatable")
    run.add_argument("--theta-slow", dest="theta_slow", metavar="X", help="shorthand for --config theta_slow=X")
    run.add_argument("--seed", type=int, help="override the cluster seed")
    run.add_argument("--out", help="write the run summary here")
    run.add_argument("--trace", help="persist the snapshot trace here")

    rep = sub.add_parser("replay", help="diagnose a persisted snapshot trace")
    rep.add_argument("trace")
    rep.add_argument("--config", action="append", default=[], metavar="KEY=VAL")
    rep.add_argument("--out", help="write the run summary here")

    tab = sub.add_parser("report", help="tabulate run summaries")
    tab.add_argument("summaries", nargs="+")
    tab.add_argument("--csv", action="store_true", help="comma-separated output")
    tab.add_argument("--out", help="also write the table here")
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        handler = {"run": cmd_run, "replay": cmd_replay, "report": cmd_report}[args.command]
        return handler(args, out)
    except UsageError as e:
        print(f"commdiag: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help exits 0; anything else argparse raises is a usage error
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except OSError as e:
        print(f"commdiag: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
