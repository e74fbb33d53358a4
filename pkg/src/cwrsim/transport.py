"""Connection-layer building blocks: framing, per-path congestion state, reassembly."""
from __future__ import annotations

from typing import NamedTuple

from .engine import InvariantError

MAX_PACKET_BYTES = 1350
HEADER_BYTES = 50
MAX_PAYLOAD_BYTES = MAX_PACKET_BYTES - HEADER_BYTES
ACK_PACKET_BYTES = HEADER_BYTES
APP_ACK_BYTES = 1

INITIAL_CWND = 10 * MAX_PACKET_BYTES
INITIAL_SSTHRESH = 100 * MAX_PACKET_BYTES
MIN_CWND = 2 * MAX_PACKET_BYTES

# Loss alarm fires at sent_time + 9/8 * srtt, so a retransmission lands one
# OWD later: 1.125 RTT + 0.5 RTT = 1.625 RTT after the original send.
LOSS_ALARM_NUM = 9
LOSS_ALARM_DEN = 8
# A packet is also declared lost once this many higher numbers are acked.
GAP_LOSS_THRESHOLD = 3

SLOW_START = "slow_start"
CONGESTION_AVOIDANCE = "congestion_avoidance"

_NO_GAPS: list[int] = []


class Frame(NamedTuple):
    """One stream frame; a packet carries at most one of these."""

    stream_id: int
    epoch: int  # per-stream message counter; disambiguates stream reuse
    offset: int
    length: int
    fin: bool
    priority: bool
    message_id: int | None = None
    app_ack: bool = False

    @property
    def packet_bytes(self) -> int:
        return self.length + HEADER_BYTES

    def key(self) -> tuple[int, int, int]:
        return (self.stream_id, self.epoch, self.offset)


def packetize(stream_id: int, epoch: int, data_length: int, priority: bool,
              message_id: int | None = None, app_ack: bool = False) -> list[Frame]:
    """Split a message into per-packet frames with contiguous offsets.

    Produces ceil(data_length / MAX_PAYLOAD_BYTES) frames; the last one
    carries the remainder and the fin marker.
    """
    if data_length <= 0:
        raise ValueError("data_length must be positive")
    frames = []
    offset = 0
    while offset < data_length:
        length = min(MAX_PAYLOAD_BYTES, data_length - offset)
        fin = offset + length == data_length
        frames.append(Frame(stream_id, epoch, offset, length, fin, priority,
                            message_id, app_ack))
        offset += length
    return frames


class Packet(NamedTuple):
    """A sent data packet as seen by the receiver."""

    number: int
    path_id: int
    frame: Frame
    size: int
    sent_time: int
    is_duplicate: bool = False
    is_retransmission: bool = False


class AckRecord(NamedTuple):
    path_id: int
    numbers: tuple[int, ...]
    receive_time: int


class SentEntry(NamedTuple):
    number: int
    size: int
    frame: Frame
    sent_time: int
    deadline: int  # loss alarm instant, fixed from srtt at send time
    is_duplicate: bool
    is_retransmission: bool


class PathSendState:
    """Per-path congestion control and sent-packet ledger for one sender.

    Slow start adds every acked byte to cwnd until ssthresh; congestion
    avoidance adds one max packet per cwnd of acked bytes, with the
    fractional remainder carried exactly between acks. A loss halves cwnd
    (floor 2 packets) at most once per RTT round.
    """

    __slots__ = (
        "path_id", "nominal_rtt", "cwnd", "ssthresh", "in_flight", "phase",
        "srtt", "growth_carry", "last_decrease", "ledger", "gap_counts",
        "largest_acked", "next_number", "alarm_entry", "alarm_time",
        "sent_packets", "lost_packets", "retransmissions", "srtt_sum",
        "srtt_samples",
    )

    def __init__(self, path_id: int, nominal_rtt: int):
        self.path_id = path_id
        self.nominal_rtt = nominal_rtt
        self.cwnd = INITIAL_CWND
        self.ssthresh = INITIAL_SSTHRESH
        self.in_flight = 0
        self.phase = SLOW_START
        self.srtt: int | None = None
        self.growth_carry = 0
        self.last_decrease: int | None = None
        self.ledger: dict[int, SentEntry] = {}
        self.gap_counts: dict[int, int] = {}
        self.largest_acked = -1
        self.next_number = 0
        self.alarm_entry: list | None = None
        self.alarm_time = 0
        self.sent_packets = 0
        self.lost_packets = 0
        self.retransmissions = 0
        self.srtt_sum = 0
        self.srtt_samples = 0

    def effective_srtt(self) -> int:
        return self.srtt if self.srtt is not None else self.nominal_rtt

    def free_cwnd(self) -> int:
        free = self.cwnd - self.in_flight
        return free if free > 0 else 0

    def register_sent(self, frame: Frame, now: int, *, is_duplicate: bool = False,
                      is_retransmission: bool = False) -> SentEntry:
        size = frame.length + HEADER_BYTES
        if size > self.cwnd - self.in_flight:
            raise InvariantError(
                f"path {self.path_id}: send of {size} B exceeds free cwnd "
                f"({self.cwnd} - {self.in_flight})"
            )
        number = self.next_number
        self.next_number = number + 1
        srtt = self.srtt
        if srtt is None:
            srtt = self.nominal_rtt
        entry = SentEntry(number, size, frame,
                          now, now + LOSS_ALARM_NUM * srtt // LOSS_ALARM_DEN,
                          is_duplicate, is_retransmission)
        self.ledger[number] = entry
        self.in_flight += size
        self.sent_packets += 1
        if is_retransmission:
            self.retransmissions += 1
        return entry

    def ack_packet(self, number: int, now: int) -> tuple[SentEntry | None, list[int]]:
        """Process one acked number; returns its entry (None if unknown or
        already settled) and any packets the gap rule now declares lost."""
        ledger = self.ledger
        entry = ledger.pop(number, None)
        if entry is None:
            return None, _NO_GAPS
        self.in_flight -= entry.size
        if number > self.largest_acked:
            self.largest_acked = number
        sample = now - entry.sent_time
        srtt = self.srtt
        self.srtt = sample if srtt is None else (7 * srtt + sample) // 8
        self.srtt_sum += sample
        self.srtt_samples += 1
        self._grow(entry.size)
        gap_counts = self.gap_counts
        if gap_counts:
            gap_counts.pop(number, None)
        if ledger and next(iter(ledger)) < number:
            gap_lost = []
            for num in ledger:
                if num >= number:
                    break
                seen = gap_counts.get(num, 0) + 1
                if seen >= GAP_LOSS_THRESHOLD:
                    gap_lost.append(num)
                else:
                    gap_counts[num] = seen
            return entry, gap_lost
        return entry, _NO_GAPS

    def _grow(self, acked_bytes: int) -> None:
        if self.phase == SLOW_START:
            self.cwnd += acked_bytes
            if self.cwnd >= self.ssthresh:
                self.phase = CONGESTION_AVOIDANCE
        else:
            total = MAX_PACKET_BYTES * acked_bytes + self.growth_carry
            inc, self.growth_carry = divmod(total, self.cwnd)
            self.cwnd += inc

    def declare_lost(self, number: int, now: int) -> tuple[SentEntry | None, bool]:
        """Remove a packet from the ledger as lost; returns (entry, decreased)."""
        entry = self.ledger.pop(number, None)
        if entry is None:
            return None, False
        self.gap_counts.pop(number, None)
        self.in_flight -= entry.size
        self.lost_packets += 1
        decreased = False
        if (self.last_decrease is None
                or now - self.last_decrease >= self.effective_srtt()):
            self.ssthresh = max(self.cwnd // 2, MIN_CWND)
            self.cwnd = self.ssthresh
            self.phase = CONGESTION_AVOIDANCE
            self.last_decrease = now
            decreased = True
        return entry, decreased

    def mean_srtt(self) -> int | None:
        if self.srtt_samples == 0:
            return None
        return self.srtt_sum // self.srtt_samples


class StreamReassembly:
    """Receiver-side state for one stream: dedup, completion, path bookkeeping."""

    __slots__ = ("stream_id", "epoch", "got", "got_bytes", "total",
                 "completed", "paths_seen")

    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self.epoch = 0
        self.got: set[int] = set()
        self.got_bytes = 0
        self.total: int | None = None
        self.completed = False
        self.paths_seen: set[int] = set()

    def accept(self, frame: Frame, path_id: int) -> tuple[str, bool]:
        """Place a frame; returns (disposition, completed_now).

        Disposition is 'new' for first-seen bytes, 'dup' for a second copy of
        an offset, 'stale' for frames of an already finished message.
        """
        if frame.epoch < self.epoch or (frame.epoch == self.epoch and self.completed):
            return "stale", False
        if frame.epoch > self.epoch:
            if frame.epoch != self.epoch + 1 or not self.completed:
                raise InvariantError(
                    f"stream {self.stream_id}: message {frame.epoch} arrived "
                    f"while message {self.epoch} is incomplete"
                )
            self.epoch = frame.epoch
            self.got.clear()
            self.got_bytes = 0
            self.total = None
            self.completed = False
            self.paths_seen.clear()
        if frame.offset in self.got:
            return "dup", False
        self.got.add(frame.offset)
        self.got_bytes += frame.length
        self.paths_seen.add(path_id)
        if frame.fin:
            self.total = frame.offset + frame.length
        if self.total is not None and self.got_bytes == self.total:
            self.completed = True
            return "new", True
        return "new", False
