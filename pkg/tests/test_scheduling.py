"""Stream schedulers, reservation ledger, and path scheduler admission rules."""
from __future__ import annotations

import pytest

from cwrsim.scheduling import (LowRttScheduler, PriorityFifoStreams,
                               RedundantScheduler, ReservationScheduler,
                               ReservationLedger, RoundRobinStreams,
                               SendStream, make_path_scheduler,
                               make_stream_scheduler, reservation_bytes)
from cwrsim.transport import Frame, PathSendState, packetize


def path(path_id=1, cwnd=13_500, srtt=None, rtt=50_000):
    ps = PathSendState(path_id, rtt)
    ps.cwnd = cwnd
    ps.srtt = srtt
    return ps


def stream_with(frames, stream_id=1, priority=True, now=0):
    s = SendStream(stream_id, priority)
    s.load_message(frames, frames[0].message_id, now)
    return s


def bg_frame(offset=0):
    return Frame(0, 0, offset, 1300, False, False)


def pri_frame(offset=0, stream=1, epoch=0, length=1300):
    return Frame(stream, epoch, offset, length, False, True, message_id=1)


def drain(scheduler, stream, now=0):
    """Admit and mark sent until blocked; returns path ids per packet."""
    sent = []
    while stream.has_pending():
        frame = stream.peek_pending()
        targets = scheduler.admit(stream, frame, False, now)
        if not targets:
            break
        stream.pop_pending()
        for i, ps in enumerate(targets):
            ps.register_sent(frame, now, is_duplicate=i > 0)
            if frame.priority:
                scheduler.on_priority_sent(ps.path_id, frame.packet_bytes, now)
        sent.append(tuple(p.path_id for p in targets))
    return sent


# -- stream schedulers -------------------------------------------------------

def new_stream(stream_id, priority, enqueue_time=0, rtx_time=None):
    s = SendStream(stream_id, priority)
    s.load_message(packetize(stream_id, 0, 2_600, priority), None, enqueue_time)
    if rtx_time is not None:
        s.enqueue_rtx(Frame(stream_id, 0, 0, 1300, False, priority), rtx_time, 1)
    return s


def test_round_robin_cycles_ignoring_priority():
    rr = RoundRobinStreams()
    streams = [new_stream(1, False), new_stream(2, True), new_stream(3, False)]
    served = []
    for _ in range(6):
        pick = rr.order(streams, 0)[0]
        served.append(pick.stream_id)
        rr.note_sent(pick)
    assert served == [1, 2, 3, 1, 2, 3]


def test_round_robin_skips_drained_stream():
    rr = RoundRobinStreams()
    streams = [new_stream(1, False), new_stream(3, False)]
    served = []
    for _ in range(4):
        pick = rr.order(streams, 0)[0]
        served.append(pick.stream_id)
        rr.note_sent(pick)
    assert served == [1, 3, 1, 3]


def test_pfifo_retransmissions_first_regardless_of_priority():
    pf = PriorityFifoStreams()
    background_rtx = new_stream(9, False, enqueue_time=5, rtx_time=30)
    fresh_priority = new_stream(2, True, enqueue_time=10)
    order = pf.order([fresh_priority, background_rtx], 40)
    assert [s.stream_id for s in order] == [9, 2]


def test_pfifo_priority_fifo_by_enqueue_time():
    pf = PriorityFifoStreams()
    early = new_stream(4, True, enqueue_time=10)
    late = new_stream(2, True, enqueue_time=20)
    bg = new_stream(1, False, enqueue_time=0)
    order = pf.order([late, bg, early], 40)
    assert [s.stream_id for s in order] == [4, 2, 1]


def test_pfifo_background_fifo_among_themselves():
    pf = PriorityFifoStreams()
    a = new_stream(3, False, enqueue_time=7)
    b = new_stream(8, False, enqueue_time=3)
    assert [s.stream_id for s in pf.order([a, b], 10)] == [8, 3]


def test_make_stream_scheduler_names():
    assert make_stream_scheduler("rr").name == "rr"
    assert make_stream_scheduler("pfifo").name == "pfifo"
    with pytest.raises(ValueError):
        make_stream_scheduler("fifo")


# -- reservation ledger ------------------------------------------------------

def test_reservation_bytes_counts_full_packets():
    assert reservation_bytes(10_000) == 8 * 1350  # 10 800
    assert reservation_bytes(7_000) == 6 * 1350
    assert reservation_bytes(5_000) == 4 * 1350
    assert reservation_bytes(1) == 1350


def test_install_and_consume():
    ledger = ReservationLedger([1])
    p = path(cwnd=20_000)
    ledger.install(1, p, 10_800, due_time=100_000)
    assert ledger.active_bytes(1) == 10_800
    ledger.consume(1, 1350, now=100_000)
    assert ledger.active_bytes(1) == 9_450


def test_consume_ignores_future_reservations():
    ledger = ReservationLedger([1])
    p = path(cwnd=30_000)
    ledger.install(1, p, 10_800, due_time=200_000)
    ledger.consume(1, 1350, now=100_000)  # not due yet
    assert ledger.active_bytes(1) == 10_800


def test_consume_without_reservation_is_noop():
    ledger = ReservationLedger([1])
    ledger.consume(1, 1350, now=0)
    assert ledger.active_bytes(1) == 0


def test_clamp_when_window_cannot_hold_reservation():
    ledger = ReservationLedger([1])
    p = path(cwnd=13_500)
    ledger.install(1, p, 10_800, due_time=50_000)
    res = ledger.install(2, p, 10_800, due_time=60_000)
    assert res.bytes_total == 2_700  # clamped to remaining window
    assert ledger.clamped == 1


def test_drop_path_marks_active_dropped():
    ledger = ReservationLedger([1, 2])
    ledger.install(1, path(1, cwnd=20_000), 10_800, 50_000)
    ledger.install(1, path(2, cwnd=20_000), 10_800, 50_000)
    ledger.drop_path(1)
    assert ledger.active_bytes(1) == 0
    assert ledger.active_bytes(2) == 10_800
    assert ledger.drop_events == 1


def test_renewal_replaces_previous_reservation():
    paths = [path(1, cwnd=50_000)]
    sched = ReservationScheduler(paths)
    sched.register_reservation(1, 10_800, 100_000)
    sched.register_reservation(1, 10_800, 200_000)
    active = sched.ledger.active(1)
    assert len(active) == 1 and active[0].due_time == 200_000


def test_reservations_pool_across_sources():
    paths = [path(1, cwnd=50_000)]
    sched = ReservationScheduler(paths)
    sched.register_reservation(1, 10_800, 100_000)
    sched.register_reservation(2, 8_100, 100_000)
    # either source's priority packets may consume the pooled space
    sched.on_priority_sent(1, 13_500, now=100_000)
    assert sched.ledger.active_bytes(1) == 5_400


# -- at-risk prediction ------------------------------------------------------

def test_not_at_risk_when_candidate_acked_before_due():
    ledger = ReservationLedger([1])
    p = path(cwnd=13_500, srtt=50_000)
    ledger.install(1, p, 10_800, due_time=60_000)  # due in 60 ms
    assert not ledger.at_risk(p, 1_350, now=0)


def test_at_risk_when_send_would_still_occupy_window_at_due_time():
    ledger = ReservationLedger([1])
    p = path(cwnd=12_150, srtt=50_000)
    ledger.install(1, p, 10_800, due_time=30_000)  # due in 30 ms
    # one packet sent 10 ms ago is still unacked at the due time
    p.register_sent(bg_frame(), now=-10_000)
    assert ledger.at_risk(p, 1_350, now=0)


def test_not_at_risk_without_reservations():
    ledger = ReservationLedger([1])
    assert not ledger.at_risk(path(), 1_350, now=0)


def test_at_risk_cumulative_requirement_over_pooled_reservations():
    ledger = ReservationLedger([1])
    p = path(cwnd=13_500, srtt=50_000)
    ledger.install(1, p, 8_100, due_time=20_000)
    ledger.install(2, p, 5_400, due_time=25_000)
    # 13 500 < 8 100 + 5 400 + candidate at the later due time
    assert ledger.at_risk(p, 1_350, now=0)


# -- path schedulers ---------------------------------------------------------

def test_lowrtt_picks_lowest_srtt():
    p1, p2 = path(1, srtt=50_000), path(2, srtt=100_000)
    sched = LowRttScheduler([p1, p2])
    assert sched.admit(None, bg_frame(), False, 0) == (p1,)


def test_lowrtt_falls_back_when_best_is_full():
    p1, p2 = path(1, srtt=50_000, cwnd=2_700), path(2, srtt=100_000)
    p1.in_flight = 2_700
    sched = LowRttScheduler([p1, p2])
    assert sched.admit(None, bg_frame(), False, 0) == (p2,)


def test_lowrtt_blocked_when_all_full():
    p1, p2 = path(1, cwnd=2_700), path(2, cwnd=2_700)
    p1.in_flight = p2.in_flight = 2_700
    sched = LowRttScheduler([p1, p2])
    assert sched.admit(None, bg_frame(), False, 0) == ()


def test_lowrtt_tie_breaks_by_path_id():
    p2, p1 = path(2, srtt=50_000), path(1, srtt=50_000)
    sched = LowRttScheduler([p2, p1])
    assert sched.admit(None, bg_frame(), False, 0) == (p1,)


def test_cwr_window_reservation_walkthrough():
    # window of 4 packets, 5 background packets pending, a 3-packet priority
    # message expected shortly: exactly one background packet goes out, the
    # rest of the window stays reserved, and the message sends immediately
    # when it arrives
    p1 = path(1, cwnd=4 * 1350, srtt=50_000)
    sched = ReservationScheduler([p1])
    sched.register_reservation(1, 3 * 1350, due_time=30_000)

    background = SendStream(0, False, background=True)
    background.epoch = 0
    sent = 0
    while True:
        frame = background.peek_pending()
        if not sched.admit(background, frame, False, 0):
            break
        background.pop_pending()
        p1.register_sent(frame, 0)
        sent += 1
    assert sent == 1  # 5400 - 4050 reserved leaves room for exactly one

    msg = stream_with(packetize(2, 0, 3 * 1300, True, message_id=9), stream_id=2)
    assert drain(sched, msg, now=30_000) == [(1,), (1,), (1,)]


def test_cwr_priority_uses_raw_free_window():
    p1 = path(1, cwnd=11_000, srtt=50_000)
    sched = ReservationScheduler([p1])
    sched.register_reservation(1, 10_800, due_time=50_000)
    # 11 000 - 10 800 = 200 blocks background; priority checks raw free window
    assert sched.admit(SendStream(0, False, True), bg_frame(), False, 0) == ()
    msg = stream_with([pri_frame()])
    assert sched.admit(msg, msg.peek_pending(), False, 0) == (p1,)


def test_cwr_without_reservations_behaves_like_lowrtt():
    p1, p2 = path(1, srtt=50_000), path(2, srtt=100_000)
    sched = ReservationScheduler([p1, p2])
    assert sched.admit(SendStream(0, False, True), bg_frame(), False, 0) == (p1,)


def test_cwr_priority_falls_back_across_paths():
    p1, p2 = path(1, srtt=50_000, cwnd=2_700), path(2, srtt=100_000)
    p1.in_flight = 2_700
    sched = ReservationScheduler([p1, p2])
    msg = stream_with([pri_frame()])
    assert sched.admit(msg, msg.peek_pending(), False, 0) == (p2,)


def test_cwr_red_duplicates_on_all_paths_when_room_everywhere():
    p1, p2 = path(1, srtt=50_000, cwnd=27_000), path(2, srtt=100_000, cwnd=27_000)
    sched = RedundantScheduler([p1, p2])
    msg = stream_with(packetize(1, 0, 2_600, True, message_id=3))
    assert drain(sched, msg) == [(1, 2), (1, 2)]
    assert msg.dup_mode == "all"


def test_cwr_red_refrains_when_one_path_cannot_hold_whole_message():
    p1, p2 = path(1, srtt=50_000, cwnd=27_000), path(2, srtt=100_000, cwnd=2_700)
    p2.in_flight = 2_000
    sched = RedundantScheduler([p1, p2])
    msg = stream_with(packetize(1, 0, 2_600, True, message_id=3))
    assert drain(sched, msg) == [(1,), (1,)]
    assert msg.dup_mode == "off"
    assert sched.refrain_count == 2


def test_cwr_red_splits_across_paths_when_sum_suffices():
    # 8 packets, path 1 fits 5, path 2 fits 3: split, no duplicates
    p1 = path(1, srtt=50_000, cwnd=5 * 1350)
    p2 = path(2, srtt=100_000, cwnd=3 * 1350)
    sched = RedundantScheduler([p1, p2])
    msg = stream_with(packetize(1, 0, 10_000, True, message_id=3))
    plan = drain(sched, msg)
    assert plan == [(1,)] * 5 + [(2,)] * 3
    assert sched.refrain_count == 8


def test_cwr_red_sends_partially_when_sum_insufficient():
    # windows too small for the whole message: duplication is forfeited and
    # packets go out per-packet as space exists, never duplicated later
    p1 = path(1, srtt=50_000, cwnd=2_700)
    p2 = path(2, srtt=100_000, cwnd=2_700)
    p1.in_flight = p2.in_flight = 1_350
    sched = RedundantScheduler([p1, p2])
    msg = stream_with(packetize(1, 0, 10_000, True, message_id=3))
    assert drain(sched, msg) == [(1,), (2,)]
    assert msg.dup_mode == "off"
    p1.in_flight = p2.in_flight = 0
    p1.cwnd = p2.cwnd = 27_000
    plan = drain(sched, msg)
    assert all(t == (1,) or t == (2,) for t in plan)
    assert len(plan) == 6


def test_cwr_red_never_duplicates_retransmissions():
    p1, p2 = path(1, srtt=50_000, cwnd=27_000), path(2, srtt=100_000, cwnd=27_000)
    sched = RedundantScheduler([p1, p2])
    msg = stream_with([pri_frame()])
    assert sched.admit(msg, pri_frame(), True, 0) == (p1,)


def test_cwr_red_background_follows_reservation_rules_on_all_paths():
    p1, p2 = path(1, srtt=50_000), path(2, srtt=100_000)
    sched = RedundantScheduler([p1, p2])
    rows = sched.register_reservation(1, 10_800, 50_000)
    assert {r.path_id for r in rows} == {1, 2}
    bg = SendStream(0, False, True)
    # 13 500 - 10 800 = 2 700 leaves room for 2 background packets per path
    assert sched.admit(bg, bg_frame(), False, 0) == (p1,)


def test_make_path_scheduler_names():
    paths = [path(1)]
    assert make_path_scheduler("lowrtt", paths).name == "lowrtt"
    assert make_path_scheduler("cwr", paths).name == "cwr"
    assert make_path_scheduler("cwr_red", paths).name == "cwr_red"
    with pytest.raises(ValueError):
        make_path_scheduler("rtt", paths)
