"""
printers.py

Report formatting for benchmark and simulation runs, for two audiences:
- people at a terminal, who get rich tables on stderr
- scripts and plotting, which get line-delimited JSON records on stdout

Latency CDFs are exported as (milliseconds, percentile) pairs, one record per profile.
"""

import json
import math
from collections.abc import Iterator, Mapping, Sequence
from typing import TextIO

from rich.console import Console
from rich.table import Table

from src.harness import Metrics, SearchResult, Violation
from src.history import Cycle, Ok

type Record = Mapping[str, object]

CDF_POINTS = 100


def latency_cdf(samples_us: Sequence[int], points: int = CDF_POINTS) -> list[tuple[float, float]]:
    """
    (ms, percentile) pairs at `points` evenly spaced percentiles: the latency below which that
    percentage of the samples fall. Fewer samples than points gives one pair per sample.
    """

    if not samples_us:
        return []
    ordered = sorted(samples_us)
    n = len(ordered)
    steps = min(points, n)
    pairs: list[tuple[float, float]] = []
    for q in range(1, steps + 1):
        idx = math.ceil(q * n / steps) - 1
        pairs.append((ordered[idx] / 1000, round(100 * q / steps, 3)))
    return pairs


def percentile(samples_us: Sequence[int], pct: float) -> float:
    """Nearest-rank percentile, in milliseconds."""

    if not samples_us:
        return 0.0
    ordered = sorted(samples_us)
    idx = max(0, math.ceil(pct / 100 * len(ordered)) - 1)
    return ordered[idx] / 1000


# JSON lines


def metrics_records(name: str, metrics: Metrics, **extra: object) -> Iterator[Record]:
    yield {"record": "summary", "run": name, **metrics.summary(), **extra}
    if metrics.abort_reasons:
        yield {"record": "aborts", "run": name, "reasons": dict(sorted(metrics.abort_reasons.items()))}
    if metrics.commit_hops:
        hops = sorted(set(metrics.commit_hops))
        yield {"record": "hops", "run": name, "per_clean_commit": hops}
    for profile, samples in sorted(metrics.latencies_us.items()):
        yield {"record": "latency_cdf", "run": name, "profile": profile, "cdf": latency_cdf(samples)}


def search_record(name: str, result: SearchResult) -> Record:
    record: dict[str, object] = {
        "record": "search",
        "run": name,
        "schedules": result.schedules,
        "all_committed": result.all_committed,
        "exhausted": result.exhausted,
    }
    match result.outcome:
        case Violation(trace=trace, reason=reason):
            record |= {"outcome": "violation", "reason": reason, "trace": [list(link) for link in trace]}
        case Ok():
            record |= {"outcome": "ok"}
    return record


def comparison_record(name: str, chains: Metrics, baseline: Metrics) -> Record:
    """Chains against the baseline on the same workload and seed. Ratios are null when undefined."""

    throughput = chains.throughput / baseline.throughput if baseline.throughput else None
    aborts = chains.abort_rate / baseline.abort_rate if baseline.abort_rate else None
    return {
        "record": "comparison",
        "run": name,
        "throughput": {"chains": round(chains.throughput, 3), "baseline": round(baseline.throughput, 3)},
        "abort_rate": {"chains": round(chains.abort_rate, 6), "baseline": round(baseline.abort_rate, 6)},
        "throughput_ratio": None if throughput is None else round(throughput, 3),
        "abort_rate_ratio": None if aborts is None else round(aborts, 6),
    }


def check_record(path: str, verdict: Ok | Cycle, transactions: int) -> Record:
    record: dict[str, object] = {"record": "check", "history": path, "transactions": transactions}
    match verdict:
        case Cycle(witness=witness):
            record |= {"outcome": "cycle", "witness": [f"{t:#x}" for t in witness]}
        case Ok():
            record |= {"outcome": "ok"}
    return record


def write_records(records: Iterator[Record] | Sequence[Record], out: TextIO) -> None:
    for record in records:
        out.write(json.dumps(record, sort_keys=True) + "\n")


# Tables


def summary_table(name: str, metrics: Metrics) -> Table:
    """
    One run at a glance:

        ┏━━━━━━━━━━━━━━┳━━━━━━━━━━━━━━┓
        ┃ Metric       ┃        Value ┃
        ┡━━━━━━━━━━━━━━╇━━━━━━━━━━━━━━┩
        │ committed    │         4981 │
        │ abort_rate   │     0.002341 │
        └──────────────┴──────────────┘
    """

    table = Table(title=name)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in metrics.summary().items():
        table.add_row(key, str(value))
    return table


def latency_table(metrics: Metrics) -> Table:
    table = Table(title="Latency (ms)")
    table.add_column("Profile", style="cyan")
    for column in ("count", "p50", "p90", "p99", "max"):
        table.add_column(column, justify="right")

    for profile, samples in sorted(metrics.latencies_us.items()):
        table.add_row(
            profile,
            str(len(samples)),
            *(f"{percentile(samples, p):.2f}" for p in (50, 90, 99, 100)),
        )
    return table


def print_report(name: str, metrics: Metrics, console: Console | None = None) -> None:
    console = console or Console(stderr=True)
    console.print(summary_table(name, metrics))
    if metrics.latencies_us:
        console.print(latency_table(metrics))
    if metrics.abort_reasons:
        reasons = ", ".join(f"{reason}: {count}" for reason, count in sorted(metrics.abort_reasons.items()))
        console.print(f"Aborted attempts by reason: {reasons}")
