"""Throughput benchmark: one workload timed at several batch sizes."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

from .context import ExecutionContext, LLMConfig
from .backends import MockBackend
from .engine import transduce
from .schema import REAL, TEXT, Slot, TypeSchema

BENCH_TARGET = TypeSchema("Answer", (
    Slot("answer", TEXT, optional=True),
    Slot("justification", TEXT, optional=True),
    Slot("confidence", REAL, optional=True),
))


@dataclass
class BenchRow:
    batch_size: int
    n: int
    latency: float
    wall: float

    @property
    def per_item(self) -> float:
        return self.wall / self.n

    @property
    def expected_per_item(self) -> float:
        return math.ceil(self.n / self.batch_size) * self.latency / self.n


def run_bench(batch_sizes, n: int = 64, latency: float = 0.5, seed: int = 0) -> list[BenchRow]:
    """Time ``n`` questions through a mock model with fixed per-call latency."""
    sources = [f"Question {i}: what is {i} + {i}?" for i in range(n)]
    rows = []
    for b in batch_sizes:
        ctx = ExecutionContext(batch_size=b, llm=LLMConfig(seed=seed),
                               backend=MockBackend(latency=latency))
        t0 = time.perf_counter()
        _, report = transduce(BENCH_TARGET, sources, ctx)
        wall = time.perf_counter() - t0
        assert report.failed == 0
        rows.append(BenchRow(b, n, latency, wall))
    return rows


def speedups(rows: list[BenchRow]) -> dict[int, float]:
    base = rows[0].per_item
    return {r.batch_size: base / r.per_item for r in rows}


def format_table(rows: list[BenchRow]) -> str:
    sp = speedups(rows)
    lines = [f"{'batch':>6} {'wall_s':>9} {'per_item_s':>11} {'expected_s':>11} {'speedup':>8}"]
    for r in rows:
        lines.append(f"{r.batch_size:>6} {r.wall:>9.3f} {r.per_item:>11.4f} "
                     f"{r.expected_per_item:>11.4f} {sp[r.batch_size]:>7.2f}x")
    return "\n".join(lines)


def to_csv(rows: list[BenchRow]) -> str:
    sp = speedups(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch_size", "n", "latency_s", "wall_s", "per_item_s", "expected_per_item_s", "speedup"])
    for r in rows:
        w.writerow([r.batch_size, r.n, r.latency, f"{r.wall:.6f}", f"{r.per_item:.6f}",
                    f"{r.expected_per_item:.6f}", f"{sp[r.batch_size]:.4f}"])
    return buf.getvalue()
