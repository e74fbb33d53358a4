"""Per-path link emulation: line-rate serialization, fixed one-way delay, random drop."""
from __future__ import annotations

from dataclasses import dataclass, field

from .engine import RngStream

MICROS_PER_SECOND = 1_000_000


@dataclass(slots=True)
class PathConfig:
    """Static description of one bidirectional path."""

    path_id: int
    owd_us: int
    rate_bps: int = 100_000_000
    loss_rate: float = 0.0
    ack_loss_enabled: bool = False
    # Test hook: indices of data transmissions (per direction, 0-based) that
    # are dropped regardless of the random draw. The draw is still consumed
    # so matched-seed comparisons stay aligned.
    forced_data_losses: tuple[int, ...] = field(default=())

    def validate(self) -> None:
        if self.owd_us <= 0:
            raise ValueError(f"path {self.path_id}: owd_us must be > 0")
        if self.rate_bps <= 0:
            raise ValueError(f"path {self.path_id}: rate_bps must be > 0")
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError(f"path {self.path_id}: loss_rate must be in [0, 1)")


def nominal_rtt_us(cfg: PathConfig) -> int:
    """Configured round-trip time; forward and reverse delay are equal."""
    return 2 * cfg.owd_us


def serialization_us(size_bytes: int, rate_bps: int) -> int:
    """Time to clock size_bytes onto the wire, rounded up to whole microseconds."""
    bits = size_bytes * 8
    return -(-bits * MICROS_PER_SECOND // rate_bps)


@dataclass(slots=True)
class LinkTransmission:
    send_start: int
    send_end: int
    arrival: int | None  # None when the packet was dropped
    dropped: bool


class OneWayLink:
    """One direction of a path: a FIFO serializer feeding a fixed delay.

    Packets never reorder within a direction: serialization starts at
    max(now, previous transmission end). Drops apply to packets that carry
    stream data; pure acknowledgment packets are exempt unless the path is
    configured with ack_loss_enabled. A drop is silent (no arrival).
    """

    def __init__(self, cfg: PathConfig, rng: RngStream):
        cfg.validate()
        self.cfg = cfg
        self.rng = rng
        self._draw = rng._rng.random  # one draw per data packet, like bernoulli
        self.rate_bps = cfg.rate_bps
        self.owd_us = cfg.owd_us
        self.loss_rate = cfg.loss_rate
        self.busy_until = 0
        self.data_sent = 0
        self.data_dropped = 0
        self._forced = frozenset(cfg.forced_data_losses)

    def send(self, size_bytes: int, carries_data: bool, now: int) -> int | None:
        """Serialize a packet; returns its arrival time, or None when dropped."""
        busy = self.busy_until
        start = busy if busy > now else now
        bits = size_bytes * 8
        end = start + (-(-bits * MICROS_PER_SECOND // self.rate_bps))
        self.busy_until = end
        if carries_data:
            index = self.data_sent
            self.data_sent = index + 1
            if self._draw() < self.loss_rate or index in self._forced:
                self.data_dropped += 1
                return None
        elif self.cfg.ack_loss_enabled:
            if self._draw() < self.loss_rate:
                return None
        return end + self.owd_us

    def transmit(self, size_bytes: int, carries_data: bool, now: int) -> LinkTransmission:
        if size_bytes <= 0:
            raise ValueError("packet size must be positive")
        before = self.busy_until if self.busy_until > now else now
        arrival = self.send(size_bytes, carries_data, now)
        end = self.busy_until
        return LinkTransmission(before, end, arrival, arrival is None)
