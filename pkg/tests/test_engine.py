"""Event queue ordering, cancellation, clock semantics, and RNG streams."""
from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from cwrsim.engine import EventQueue, InvariantError, RngStream, RngStreams


def collect(queue, t_end):
    fired = []
    queue.run_until(t_end)
    return fired


def test_events_fire_in_time_order():
    q = EventQueue()
    fired = []
    q.schedule(25_108, lambda: fired.append("late"))
    q.schedule(10, lambda: fired.append("early"))
    q.schedule(500, lambda: fired.append("mid"))
    q.run_until(1_000_000)
    assert fired == ["early", "mid", "late"]


def test_same_time_events_fire_in_insertion_order():
    q = EventQueue()
    fired = []
    for tag in ("a", "b", "c"):
        q.schedule(42, lambda t=tag: fired.append(t))
    q.run_until(100)
    assert fired == ["a", "b", "c"]


def test_cancel_prevents_dispatch():
    q = EventQueue()
    fired = []
    handle = q.schedule(10, lambda: fired.append("nope"))
    q.schedule(20, lambda: fired.append("yes"))
    q.cancel(handle)
    assert q.run_until(100) == 1
    assert fired == ["yes"]


def test_scheduling_in_the_past_is_fatal():
    q = EventQueue()
    q.schedule(10, lambda: None)
    q.run_until(10)
    with pytest.raises(InvariantError):
        q.schedule(5, lambda: None)


def test_run_until_empty_queue():
    q = EventQueue()
    assert q.run_until(10_000_000) == 0
    assert q.now == 0


def test_run_until_boundary_inclusive_and_count():
    q = EventQueue()
    for t in (1_000_000, 2_000_000, 3_000_000):
        q.schedule(t, lambda: None)
    assert q.run_until(2_000_000) == 2
    assert q.now == 2_000_000


def test_clock_stays_at_last_event_when_queue_drains():
    q = EventQueue()
    q.schedule(1_500, lambda: None)
    q.run_until(9_999)
    assert q.now == 1_500


def test_events_scheduled_during_dispatch_run_in_same_window():
    q = EventQueue()
    fired = []
    q.schedule(10, lambda: (fired.append("first"),
                            q.schedule(20, lambda: fired.append("child"))))
    q.run_until(100)
    assert fired == ["first", "child"]


@given(st.lists(st.integers(min_value=0, max_value=10_000), min_size=1,
                max_size=50))
def test_dispatch_order_is_sorted_by_time_then_insertion(times):
    q = EventQueue(record_dispatch=True)
    for t in times:
        q.schedule(t, lambda: None)
    q.run_until(10_001)
    log = [(t, seq) for t, seq, _ in q.dispatch_log]
    assert log == sorted(log)
    assert sorted(t for t, _ in log) == sorted(times)


def test_bernoulli_edge_probabilities():
    s = RngStream(1, 0)
    assert all(not s.bernoulli(0.0) for _ in range(100))
    assert all(s.bernoulli(1.0) for _ in range(100))
    with pytest.raises(ValueError):
        s.bernoulli(1.5)
    with pytest.raises(ValueError):
        s.bernoulli(-0.1)


def test_bernoulli_rate_matches_probability():
    # binomial(1e6, 5e-4): mean 500, the interval is ~6.7 sigma wide
    s = RngStream(12345, 0)
    hits = sum(s.bernoulli(0.0005) for _ in range(1_000_000))
    assert 350 <= hits <= 650


def test_same_seed_same_draws():
    a = [RngStream(99, 3).bernoulli(0.5) for _ in range(1000)]
    b = [RngStream(99, 3).bernoulli(0.5) for _ in range(1000)]
    assert a == b


def test_streams_are_independent():
    # drawing from one stream must not shift another stream's sequence
    streams = RngStreams(7)
    reference = RngStream(7, 1)
    baseline = [reference.bernoulli(0.5) for _ in range(100)]
    s0 = streams.stream(0)
    s1 = streams.stream(1)
    out = []
    for i in range(100):
        s0.bernoulli(0.5)
        if i % 2 == 0:
            s0.bernoulli(0.3)  # extra draws on stream 0
        out.append(s1.bernoulli(0.5))
    assert out == baseline
