"""Trace collection and evaluation outputs: completion times, throughput, window growth."""
from __future__ import annotations

import csv
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_WARMUP_US = 1_000_000
DEFAULT_BIN_WIDTH_US = 100_000
MIN_GROWTH_WINDOWS = 20

MCT_COLUMNS = ["source_id", "message_id", "generated_at_us", "mct_us",
               "loss_involved", "duplicated"]
CCDF_COLUMNS = ["mct_us", "ccdf"]
THROUGHPUT_COLUMNS = ["bin_start_us", "total_bytes", "priority_bytes"]
GROWTH_COLUMNS = ["path_id", "scheduler", "mean_growth_bytes_per_rtt"]


class InsufficientSamplesError(ValueError):
    """Raised instead of reporting a growth figure from too little data."""


@dataclass(slots=True)
class ThroughputBin:
    bin_start: int
    bin_width: int
    total_bytes: int = 0
    priority_bytes: int = 0


@dataclass(slots=True)
class CwndGrowthRecord:
    path_id: int
    scheduler: str
    mean_growth: float
    windows: int
    sample_window: tuple[int, int]


def ccdf(samples: Sequence[int]) -> list[tuple[int, float]]:
    """Fraction of samples strictly greater than each distinct value.

    Output is sorted by value, monotone nonincreasing, and ends at 0.
    """
    if not samples:
        return []
    ordered = sorted(samples)
    n = len(ordered)
    out = []
    i = 0
    while i < n:
        value = ordered[i]
        j = i
        while j < n and ordered[j] == value:
            j += 1
        out.append((value, (n - j) / n))
        i = j
    return out


def ccdf_at(curve: list[tuple[int, float]], x: int) -> float:
    """Evaluate a ccdf step curve at x (fraction of samples strictly above x)."""
    if not curve:
        return 0.0
    values = [v for v, _ in curve]
    idx = bisect_right(values, x)
    if idx == 0:
        return 1.0
    return curve[idx - 1][1]


def max_ccdf_gap(a: list[tuple[int, float]], b: list[tuple[int, float]]) -> float:
    """Largest pointwise distance between two ccdf curves over both supports."""
    gap = 0.0
    for x in sorted({v for v, _ in a} | {v for v, _ in b}):
        gap = max(gap, abs(ccdf_at(a, x) - ccdf_at(b, x)))
    return gap


def throughput_series(deliveries: Iterable[tuple[int, int, int, bool, bool]],
                      horizon_us: int,
                      bin_width_us: int = DEFAULT_BIN_WIDTH_US) -> list[ThroughputBin]:
    """Bin delivered transport-layer bytes; duplicates count, priority tracked.

    Each delivery is (time, path_id, size_bytes, priority, is_duplicate).
    Every bin covering [0, horizon) is present even when empty.
    """
    n_bins = -(-horizon_us // bin_width_us) if horizon_us > 0 else 0
    bins = [ThroughputBin(i * bin_width_us, bin_width_us) for i in range(n_bins)]
    for when, _path, size, priority, _dup in deliveries:
        if when >= horizon_us:
            continue
        b = bins[when // bin_width_us]
        b.total_bytes += size
        if priority:
            b.priority_bytes += size
    return bins


def cwnd_growth(samples: list[tuple[int, int]], ca_since: int | None,
                decreases: list[int], rtt_us: int, start_us: int,
                end_us: int) -> tuple[float, int]:
    """Mean cwnd increase per rtt over CA-phase windows in [start, end).

    Windows containing a multiplicative decrease are excluded. Returns
    (mean, window_count); raises InsufficientSamplesError below the minimum.
    """
    if ca_since is None:
        raise InsufficientSamplesError("path never reached congestion avoidance")
    t0 = max(start_us, ca_since)
    times = [t for t, _ in samples]
    values = [v for _, v in samples]

    def cwnd_at(t: int) -> int:
        idx = bisect_right(times, t)
        if idx == 0:
            raise InsufficientSamplesError("no cwnd samples before window start")
        return values[idx - 1]

    growths = []
    t = t0
    while t + rtt_us <= end_us:
        # decreases in the half-open window [t, t+rtt) disqualify it
        lo = bisect_left(decreases, t)
        hi = bisect_left(decreases, t + rtt_us)
        if lo == hi:
            growths.append(cwnd_at(t + rtt_us) - cwnd_at(t))
        t += rtt_us
    if len(growths) < MIN_GROWTH_WINDOWS:
        raise InsufficientSamplesError(
            f"only {len(growths)} usable CA windows, need {MIN_GROWTH_WINDOWS}"
        )
    return sum(growths) / len(growths), len(growths)


CWND_SAMPLE_INTERVAL_US = 250


class MetricsCollector:
    """Run traces plus derived outputs; throughput is binned incrementally."""

    def __init__(self, horizon_us: int, warmup_us: int = DEFAULT_WARMUP_US,
                 bin_width_us: int = DEFAULT_BIN_WIDTH_US,
                 record_delivery_trace: bool = False):
        self.horizon_us = horizon_us
        self.warmup_us = warmup_us
        self.bin_width_us = bin_width_us
        n_bins = -(-horizon_us // bin_width_us) if horizon_us > 0 else 0
        self._bins = [ThroughputBin(i * bin_width_us, bin_width_us)
                      for i in range(n_bins)]
        # optional raw (time, path_id, size, priority, is_duplicate) trace
        self.deliveries: list[tuple[int, int, int, bool, bool]] | None = (
            [] if record_delivery_trace else None)
        self.goodput_unique_bytes = 0
        self.delivered_bytes = 0
        self.cwnd_samples: dict[int, list[tuple[int, int]]] = {}
        self.ca_since: dict[int, int] = {}
        self.decreases: dict[int, list[int]] = {}
        self.counters: dict[str, int] = {}

    def register_path(self, path_id: int, initial_cwnd: int) -> None:
        self.cwnd_samples[path_id] = [(0, initial_cwnd)]
        self.decreases[path_id] = []

    def on_delivery(self, when: int, path_id: int, size: int, priority: bool,
                    is_duplicate: bool, new_bytes: int) -> None:
        self.goodput_unique_bytes += new_bytes
        self.delivered_bytes += size
        if self.deliveries is not None:
            self.deliveries.append((when, path_id, size, priority, is_duplicate))
        if when >= self.horizon_us:
            return
        b = self._bins[when // self.bin_width_us]
        b.total_bytes += size
        if priority:
            b.priority_bytes += size

    def on_cwnd(self, path_id: int, when: int, cwnd: int,
                force: bool = False) -> None:
        samples = self.cwnd_samples[path_id]
        last_t = samples[-1][0]
        if when == last_t:
            samples[-1] = (when, cwnd)
        elif force or when - last_t >= CWND_SAMPLE_INTERVAL_US:
            samples.append((when, cwnd))

    def on_ca_entered(self, path_id: int, when: int) -> None:
        self.ca_since.setdefault(path_id, when)

    def on_decrease(self, path_id: int, when: int) -> None:
        self.decreases[path_id].append(when)

    def bump(self, name: str, amount: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + amount

    def throughput(self) -> list[ThroughputBin]:
        return self._bins

    def growth_record(self, path_id: int, scheduler: str,
                      rtt_us: int) -> CwndGrowthRecord:
        mean, windows = cwnd_growth(
            self.cwnd_samples[path_id], self.ca_since.get(path_id),
            self.decreases[path_id], rtt_us, self.warmup_us, self.horizon_us)
        return CwndGrowthRecord(path_id, scheduler, mean, windows,
                                (self.warmup_us, self.horizon_us))


def post_warmup_mcts(messages, warmup_us: int = DEFAULT_WARMUP_US,
                     priority_only: bool = True) -> list[int]:
    """Completion times of messages generated after warm-up."""
    out = []
    for m in messages:
        if m.generated_at < warmup_us or m.completed_at is None:
            continue
        if priority_only and not m.priority:
            continue
        out.append(m.mct)
    return out


def write_mct_csv(path: Path, messages) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MCT_COLUMNS)
        for m in messages:
            if m.completed_at is None:
                continue
            w.writerow([m.source_id, m.message_id, m.generated_at, m.mct,
                        int(m.loss_involved), int(m.duplicated)])


def write_ccdf_csv(path: Path, curve: list[tuple[int, float]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CCDF_COLUMNS)
        for value, frac in curve:
            w.writerow([value, f"{frac:.9f}"])


def write_throughput_csv(path: Path, bins: list[ThroughputBin]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(THROUGHPUT_COLUMNS)
        for b in bins:
            w.writerow([b.bin_start, b.total_bytes, b.priority_bytes])


def write_growth_csv(path: Path, records: list[CwndGrowthRecord]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GROWTH_COLUMNS)
        for r in records:
            w.writerow([r.path_id, r.scheduler, f"{r.mean_growth:.3f}"])
