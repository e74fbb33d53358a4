"""Wires engine, links, transport and schedulers into a runnable two-endpoint model."""
from __future__ import annotations

import json
from functools import partial
from pathlib import Path
from typing import Callable

from . import __version__
from .engine import EventQueue, InvariantError, RngStreams
from .link import OneWayLink, nominal_rtt_us, serialization_us
from .metrics import (CWND_SAMPLE_INTERVAL_US, MetricsCollector,
                      InsufficientSamplesError, ccdf, post_warmup_mcts,
                      write_ccdf_csv, write_growth_csv, write_mct_csv,
                      write_throughput_csv)
from .scheduling import SendStream, make_path_scheduler, make_stream_scheduler
from .traffic import TrafficManager
from .transport import (ACK_PACKET_BYTES, APP_ACK_BYTES, CONGESTION_AVOIDANCE,
                        Frame, HEADER_BYTES, MAX_PACKET_BYTES, Packet,
                        PathSendState, StreamReassembly, packetize)


class Node:
    """One connection endpoint: send streams, per-path congestion state, receiver."""

    def __init__(self, name: str, engine: EventQueue,
                 path_states: list[PathSendState],
                 links: dict[int, OneWayLink],
                 stream_scheduler: str, path_scheduler: str,
                 metrics: MetricsCollector | None = None,
                 record_deliveries: bool = False,
                 record_cwnd: bool = False):
        self.name = name
        self.engine = engine
        self.path_list = path_states
        self.path_states = {p.path_id: p for p in path_states}
        self.links = links
        self.stream_sched = make_stream_scheduler(stream_scheduler)
        self.path_sched = make_path_scheduler(path_scheduler, path_states)
        self.path_sched.link_ready = self._link_ready
        self.path_sched.gate_room = self._gate_room
        # background frames only enter a serializer with a short backlog
        # (six max packets); the retry wake waits for it to nearly drain so
        # sends batch instead of waking per packet. Priority bursts bypass this.
        self._gate_us = {pid: 6 * serialization_us(MAX_PACKET_BYTES, link.cfg.rate_bps)
                         for pid, link in links.items()}
        self._drain_us = {pid: serialization_us(MAX_PACKET_BYTES, link.cfg.rate_bps)
                          for pid, link in links.items()}
        self._wake_time = 0
        self._wake_entry: list | None = None
        self.metrics = metrics
        self.record_deliveries = record_deliveries
        self.record_cwnd = record_cwnd
        self._on_delivery = (metrics.on_delivery
                             if record_deliveries and metrics is not None
                             else None)
        self._next_cwnd_sample = {p.path_id: 0 for p in path_states}
        self.peer: Node | None = None
        self._peer_receive = None
        self._peer_receive_bg = None
        self._peer_ack = None
        self.streams: dict[int, SendStream] = {}
        self._bg_stream: SendStream | None = None
        self.reassembly: dict[int, StreamReassembly] = {}
        self._bg_seen: dict[int, set[int]] = {}
        self._dup_keys: set[tuple[int, int, int]] = set()
        self._delivered_dup: set[tuple[int, int, int]] = set()
        self._ca_noted: set[int] = set()
        self.blocked_count = 0
        self.verify_admissions = False
        self.on_message_complete: Callable[[Frame, int, int, bool], None] | None = None
        self.on_frame_lost: Callable[[int | None], None] | None = None
        self.on_duplicated: Callable[[int | None], None] | None = None
        self.send_log: list[tuple] | None = None
        self.decision_log: list[tuple] | None = None

    def set_peer(self, peer: "Node") -> None:
        self.peer = peer
        self._peer_receive = peer.receive_data
        self._peer_receive_bg = peer.receive_background
        self._peer_ack = peer.handle_ack_one

    # -- sender side ---------------------------------------------------

    def get_send_stream(self, stream_id: int, priority: bool) -> SendStream:
        stream = self.streams.get(stream_id)
        if stream is None:
            stream = SendStream(stream_id, priority)
            self.streams[stream_id] = stream
        return stream

    def ensure_background_stream(self, stream_id: int) -> SendStream:
        stream = self.streams.get(stream_id)
        if stream is None:
            stream = SendStream(stream_id, priority=False, background=True)
            stream.epoch = 0
            self.streams[stream_id] = stream
            self._bg_stream = stream
        return stream

    def enqueue_app_ack(self, stream_id: int, priority: bool, message_id: int,
                        now: int) -> None:
        """Queue the one-byte completion response on the same stream."""
        stream = self.get_send_stream(stream_id, priority)
        if stream.message_id is not None and not stream.pending:
            # previous response fully sent; app-level reuse is gated upstream
            stream.message_done()
        frames = packetize(stream_id, stream.epoch + 1, APP_ACK_BYTES, priority,
                           message_id, app_ack=True)
        stream.load_message(frames, message_id, now)
        self.try_send(now)

    def try_send(self, now: int) -> None:
        """Send as long as the stream scheduler offers a unit some path admits."""
        streams = self.streams
        sched = self.path_sched
        while True:
            candidates = [s for s in streams.values() if s.rtx or s.has_pending()]
            if not candidates:
                return
            if len(candidates) == 1 and candidates[0].background \
                    and not candidates[0].rtx and self.send_log is None \
                    and self.decision_log is None:
                return self._drain_background(candidates[0], now)
            candidates = self.stream_sched.order(candidates, now)
            sent = False
            for stream in candidates:
                frame = None
                is_rtx = False
                rtx_path = None
                while stream.rtx:
                    _t, head, pin = stream.rtx[0]
                    if (head.epoch < stream.epoch
                            or head.key() in self._delivered_dup):
                        stream.rtx.popleft()
                        continue
                    frame = head
                    is_rtx = True
                    rtx_path = pin
                    break
                if frame is None:
                    if not stream.has_pending():
                        continue
                    frame = stream.peek_pending()
                targets = sched.admit(stream, frame, is_rtx, now, rtx_path)
                if not targets:
                    self.blocked_count += 1
                    if sched.gated_wake is not None:
                        self._schedule_gate_wake(sched.gated_wake)
                    if self.decision_log is not None:
                        self.decision_log.append(
                            ("blocked", now, stream.stream_id, frame.priority,
                             is_rtx))
                    continue
                if is_rtx:
                    stream.rtx.popleft()
                else:
                    stream.pop_pending()
                self._send_frame(stream, frame, targets, is_rtx, now)
                self.stream_sched.note_sent(stream)
                sent = True
                break
            if not sent:
                return

    def _drain_background(self, stream: SendStream, now: int) -> None:
        """Tight loop for the common case: only the background stream can send.

        Admission is planned per path in one pass; the counts reproduce the
        per-packet guards exactly since nothing else runs between the sends.
        """
        sched = self.path_sched
        for ps, k in sched.background_plan(now):
            self._send_background_run(stream, ps, k, now)
        self.blocked_count += 1
        if sched.gated_wake is not None:
            self._schedule_gate_wake(sched.gated_wake)

    def _continue_background(self, ps: PathSendState, stream: SendStream,
                             now: int) -> None:
        """Resume background on one path after its window freed some room."""
        sched = self.path_sched
        k = (ps.cwnd - ps.in_flight
             - sched.background_reserved(ps.path_id)) // MAX_PACKET_BYTES
        if k <= 0:
            self.blocked_count += 1
            return
        room = self._gate_room(ps.path_id)
        if room <= 0:
            self.blocked_count += 1
            self._schedule_gate_wake(self._link_ready(ps.path_id))
            return
        self._send_background_run(stream, ps, room if room < k else k, now)

    def _send_background_run(self, stream: SendStream, ps: PathSendState,
                             k: int, now: int) -> None:
        engine = self.engine
        receive = self._peer_receive_bg
        link = self.links[ps.path_id]
        path_id = ps.path_id
        stream_id = stream.stream_id
        first = True
        for _ in range(k):
            frame = stream.next_background_frame()
            entry = ps.register_sent(frame, now)
            arrival = link.send(entry.size, True, now)
            if arrival is not None:
                engine.schedule(
                    arrival,
                    partial(receive, entry.number, path_id, stream_id,
                            frame.offset, entry.size),
                    "packet_arrival")
            if first:
                # within the batch deadlines are nondecreasing
                if ps.alarm_entry is None or entry.deadline < ps.alarm_time:
                    self._ensure_alarm(ps, entry.deadline)
                first = False

    def _link_ready(self, path_id: int) -> int | None:
        """None when the serializer can take a background frame, else retry time."""
        link = self.links[path_id]
        now = self.engine.now
        if link.busy_until - now < self._gate_us[path_id]:
            return None
        return link.busy_until - self._drain_us[path_id] + 1

    def _gate_room(self, path_id: int) -> int:
        """Background packets the serializer gate will accept back to back."""
        backlog = self.links[path_id].busy_until - self.engine.now
        if backlog < 0:
            backlog = 0
        room = (self._gate_us[path_id] - 1 - backlog) // self._drain_us[path_id] + 1
        return room if room > 0 else 0

    def _schedule_gate_wake(self, ready_at: int) -> None:
        # exactly one live wake per node; replace only with an earlier one
        if self._wake_entry is not None:
            if self.engine.now < self._wake_time <= ready_at:
                return
            self.engine.cancel(self._wake_entry)
        self._wake_entry = self.engine.schedule(ready_at, self._on_gate_wake,
                                                "link_ready")
        self._wake_time = ready_at

    def _on_gate_wake(self) -> None:
        self._wake_entry = None
        self.try_send(self.engine.now)

    def _send_frame(self, stream: SendStream, frame: Frame,
                    targets: tuple[PathSendState, ...], is_rtx: bool,
                    now: int) -> None:
        if len(targets) > 1:
            self._dup_keys.add(frame.key())
            if not frame.app_ack and self.on_duplicated is not None:
                self.on_duplicated(frame.message_id)
        engine = self.engine
        reserving = self.path_sched.reserving and frame.priority
        for i, ps in enumerate(targets):
            entry = ps.register_sent(frame, now, is_duplicate=i > 0,
                                     is_retransmission=is_rtx)
            if reserving:
                self.path_sched.on_priority_sent(ps.path_id, entry.size, now)
            elif self.verify_admissions and not frame.priority \
                    and self.path_sched.reserving:
                # admission invariant, evaluated on the full prediction
                # formula with the packet now counted in flight
                if self.path_sched.ledger.at_risk(ps, 0, now,
                                                  use_fast_path=False):
                    raise InvariantError(
                        f"background send at {now} on path {ps.path_id} "
                        f"breaks a reservation prediction")
            arrival = self.links[ps.path_id].send(entry.size, True, now)
            if arrival is not None:
                pkt = Packet(entry.number, ps.path_id, frame, entry.size, now,
                             i > 0, is_rtx)
                engine.schedule(
                    arrival, partial(self._peer_receive, pkt),
                    "app_ack_arrival" if frame.app_ack else "packet_arrival")
            if ps.alarm_entry is None or entry.deadline < ps.alarm_time:
                self._ensure_alarm(ps, entry.deadline)
            if self.send_log is not None:
                self.send_log.append((now, ps.path_id, entry.number,
                                      frame.stream_id, frame.epoch, frame.offset,
                                      frame.length, frame.priority, i > 0, is_rtx))
            if self.decision_log is not None:
                self.decision_log.append(("sent", now, stream.stream_id,
                                          frame.priority, is_rtx, ps.path_id))

    # -- acknowledgment and loss handling --------------------------------

    def handle_ack_one(self, path_id: int, number: int) -> None:
        """Hot path: process one acknowledged packet number."""
        now = self.engine.now
        ps = self.path_states[path_id]
        entry, gaps = ps.ack_packet(number, now)
        if entry is not None:
            frame = entry.frame
            if self._dup_keys and frame.key() in self._dup_keys:
                self._delivered_dup.add(frame.key())
            if frame.app_ack:
                stream = self.streams.get(frame.stream_id)
                if stream is not None and stream.message_id == frame.message_id \
                        and not stream.pending:
                    stream.message_done()
            if self.record_cwnd and now >= self._next_cwnd_sample[path_id]:
                self._next_cwnd_sample[path_id] = now + CWND_SAMPLE_INTERVAL_US
                self.metrics.on_cwnd(path_id, now, ps.cwnd, force=True)
                if ps.phase == CONGESTION_AVOIDANCE \
                        and path_id not in self._ca_noted:
                    self._ca_noted.add(path_id)
                    self.metrics.on_ca_entered(path_id, now)
        if gaps:
            for num in gaps:
                self._declare_loss(ps, num, now)
            return self.try_send(now)
        if not self._urgent_pending():
            # freed window cannot help while sends are only waiting on a
            # serializer drain; the pending wake will retry
            if self._wake_entry is not None:
                return
            bg = self._bg_stream
            if bg is not None and not bg.rtx and self.send_log is None \
                    and self.decision_log is None:
                # only the acked path gained room; continue background there
                return self._continue_background(ps, bg, now)
        self.try_send(now)

    def handle_ack(self, path_id: int, numbers: tuple[int, ...]) -> None:
        for number in numbers:
            self.handle_ack_one(path_id, number)

    def _urgent_pending(self) -> bool:
        for s in self.streams.values():
            if s.rtx or (s.pending and not s.background):
                return True
        return False

    def _declare_loss(self, ps: PathSendState, number: int, now: int) -> None:
        entry, decreased = ps.declare_lost(number, now)
        if entry is None:
            return
        if self.metrics is not None:
            self.metrics.bump(f"losses_declared_path_{ps.path_id}")
            if self.record_cwnd:
                if decreased:
                    self.metrics.on_decrease(ps.path_id, now)
                self.metrics.on_cwnd(ps.path_id, now, ps.cwnd, force=True)
                if ps.path_id not in self._ca_noted:
                    self._ca_noted.add(ps.path_id)
                    self.metrics.on_ca_entered(ps.path_id, now)
        self.path_sched.on_path_loss(ps.path_id)
        frame = entry.frame
        if self.on_frame_lost is not None:
            self.on_frame_lost(frame.message_id)
        if frame.key() in self._delivered_dup:
            return
        stream = self.streams.get(frame.stream_id)
        if stream is not None and frame.epoch == stream.epoch:
            stream.enqueue_rtx(frame, now, ps.path_id)

    def _ensure_alarm(self, ps: PathSendState, deadline: int) -> None:
        if ps.alarm_entry is None:
            ps.alarm_entry = self.engine.schedule(
                deadline, partial(self._on_alarm, ps), "loss_alarm")
            ps.alarm_time = deadline
        elif deadline < ps.alarm_time:
            self.engine.cancel(ps.alarm_entry)
            ps.alarm_entry = self.engine.schedule(
                deadline, partial(self._on_alarm, ps), "loss_alarm")
            ps.alarm_time = deadline

    def _on_alarm(self, ps: PathSendState) -> None:
        now = self.engine.now
        ps.alarm_entry = None
        expired = None
        nxt = None
        for num, e in ps.ledger.items():
            d = e.deadline
            if d <= now:
                if expired is None:
                    expired = [num]
                else:
                    expired.append(num)
            elif nxt is None or d < nxt:
                nxt = d
        if expired:
            for number in expired:
                self._declare_loss(ps, number, now)
            # losses may have repopulated or drained the ledger
            if ps.ledger:
                nxt = min(e.deadline for e in ps.ledger.values())
            else:
                nxt = None
        if nxt is not None:
            ps.alarm_entry = self.engine.schedule(
                nxt, partial(self._on_alarm, ps), "loss_alarm")
            ps.alarm_time = nxt
        if expired:
            self.try_send(now)

    # -- receiver side ---------------------------------------------------

    def receive_background(self, number: int, path_id: int, stream_id: int,
                           offset: int, size: int) -> None:
        """Hot path for background data: dedup for goodput, count, ack."""
        now = self.engine.now
        seen = self._bg_seen.get(stream_id)
        if seen is None:
            seen = self._bg_seen[stream_id] = set()
        if offset in seen:
            new_bytes = 0
        else:
            seen.add(offset)
            new_bytes = size - HEADER_BYTES
        record = self._on_delivery
        if record is not None:
            record(now, path_id, size, False, False, new_bytes)
        arrival = self.links[path_id].send(ACK_PACKET_BYTES, False, now)
        if arrival is not None:
            self.engine.schedule(
                arrival, partial(self._peer_ack, path_id, number), "ack_arrival")

    def receive_data(self, pkt: Packet) -> None:
        now = self.engine.now
        frame = pkt.frame
        path_id = pkt.path_id
        if frame.message_id is None and not frame.fin:
            # background frame: no completion, dedup only for the goodput count
            seen = self._bg_seen.setdefault(frame.stream_id, set())
            offset = frame.offset
            if offset in seen:
                new_bytes = 0
            else:
                seen.add(offset)
                new_bytes = frame.length
            completed = False
        else:
            reasm = self.reassembly.get(frame.stream_id)
            if reasm is None:
                reasm = StreamReassembly(frame.stream_id)
                self.reassembly[frame.stream_id] = reasm
            disposition, completed = reasm.accept(frame, path_id)
            new_bytes = frame.length if disposition == "new" else 0
        if self._on_delivery is not None:
            self._on_delivery(now, path_id, pkt.size, frame.priority,
                              pkt.is_duplicate, new_bytes)
        arrival = self.links[path_id].send(ACK_PACKET_BYTES, False, now)
        if arrival is not None:
            self.engine.schedule(
                arrival, partial(self._peer_ack, path_id, pkt.number),
                "ack_arrival")
        if completed and self.on_message_complete is not None:
            self.on_message_complete(frame, now, path_id, pkt.is_duplicate)


class Simulation:
    """A fully wired single run: one server, one client, n paths, one seed."""

    def __init__(self, config, *, record_send_log: bool = False,
                 record_decisions: bool = False, record_dispatch: bool = False,
                 record_delivery_trace: bool = False,
                 verify_admissions: bool = False, check_interval: int = 1024):
        config.validate()
        self.config = config
        self.engine = EventQueue(record_dispatch=record_dispatch,
                                 checker=self.verify_invariants,
                                 check_interval=check_interval)
        self.rngs = RngStreams(config.seed)
        self.metrics = MetricsCollector(config.duration_us, config.warmup_us,
                                        config.bin_width_us,
                                        record_delivery_trace=record_delivery_trace)
        fwd_links: dict[int, OneWayLink] = {}
        rev_links: dict[int, OneWayLink] = {}
        server_paths: list[PathSendState] = []
        client_paths: list[PathSendState] = []
        for idx, pcfg in enumerate(config.paths):
            pcfg.validate()
            rtt = nominal_rtt_us(pcfg)
            fwd_links[pcfg.path_id] = OneWayLink(pcfg, self.rngs.stream(2 * idx))
            rev_links[pcfg.path_id] = OneWayLink(pcfg, self.rngs.stream(2 * idx + 1))
            server_paths.append(PathSendState(pcfg.path_id, rtt))
            client_paths.append(PathSendState(pcfg.path_id, rtt))
            self.metrics.register_path(pcfg.path_id, server_paths[-1].cwnd)
        self.server = Node("server", self.engine, server_paths, fwd_links,
                           config.stream_scheduler, config.path_scheduler,
                           metrics=self.metrics, record_cwnd=True)
        self.client = Node("client", self.engine, client_paths, rev_links,
                           config.stream_scheduler, config.path_scheduler,
                           metrics=self.metrics, record_deliveries=True)
        self.server.set_peer(self.client)
        self.client.set_peer(self.server)
        self.traffic = TrafficManager(config.sources, self.server, self.engine,
                                      config.duration_us, config.background)
        self.server.on_frame_lost = self.traffic.on_frame_lost
        self.server.on_duplicated = self.traffic.on_duplicated
        self.client.on_message_complete = self._on_data_complete
        self.server.on_message_complete = self._on_app_ack_received
        if record_send_log:
            self.server.send_log = []
            self.client.send_log = []
        if record_decisions:
            self.server.decision_log = []
            self.client.decision_log = []
        if verify_admissions:
            self.server.verify_admissions = True
            self.client.verify_admissions = True

    def _on_data_complete(self, frame: Frame, now: int, path_id: int,
                          by_duplicate: bool) -> None:
        self.traffic.on_message_complete(frame.message_id, now, path_id,
                                         by_duplicate)
        self.client.enqueue_app_ack(frame.stream_id, frame.priority,
                                    frame.message_id, now)

    def _on_app_ack_received(self, frame: Frame, now: int, path_id: int,
                             by_duplicate: bool) -> None:
        if not frame.app_ack:
            raise InvariantError("server received a non-ack stream message")
        self.traffic.on_app_ack(frame.message_id, now)

    def verify_invariants(self) -> None:
        """Byte conservation and reservation bounds for both endpoints."""
        for node in (self.server, self.client):
            for ps in node.path_list:
                total = sum(e.size for e in ps.ledger.values())
                if total != ps.in_flight:
                    raise InvariantError(
                        f"{node.name} path {ps.path_id}: in_flight "
                        f"{ps.in_flight} != ledger sum {total}")
                if ps.in_flight < 0:
                    raise InvariantError(
                        f"{node.name} path {ps.path_id}: negative in_flight")
            if node.path_sched.reserving:
                for ps in node.path_list:
                    active = node.path_sched.ledger.active_bytes(ps.path_id)
                    if active > ps.cwnd:
                        raise InvariantError(
                            f"{node.name} path {ps.path_id}: reserved {active} "
                            f"exceeds cwnd {ps.cwnd}")

    def run(self) -> "RunResult":
        self.traffic.start()
        self.engine.run_until(self.config.duration_us)
        self.verify_invariants()
        return RunResult(self)


class RunResult:
    """Finished run plus derived outputs and the reproducibility manifest."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.config = sim.config
        self.messages = sim.traffic.messages
        self.metrics = sim.metrics

    def priority_mcts(self) -> list[int]:
        return post_warmup_mcts(self.messages, self.config.warmup_us)

    def ccdf_curve(self) -> list[tuple[int, float]]:
        return ccdf(self.priority_mcts())

    def growth_records(self) -> tuple[list, list[str]]:
        records = []
        skipped = []
        for pcfg in self.config.paths:
            try:
                records.append(self.metrics.growth_record(
                    pcfg.path_id, self.config.path_scheduler,
                    nominal_rtt_us(pcfg)))
            except InsufficientSamplesError as exc:
                skipped.append(f"path {pcfg.path_id}: {exc}")
        return records, skipped

    def manifest(self) -> dict:
        sim = self.sim
        paths = {}
        for pcfg in self.config.paths:
            ps = sim.server.path_states[pcfg.path_id]
            link = sim.server.links[pcfg.path_id]
            paths[str(pcfg.path_id)] = {
                "data_packets_sent": link.data_sent,
                "data_packets_dropped": link.data_dropped,
                "losses_declared": ps.lost_packets,
                "retransmissions": ps.retransmissions,
                "mean_srtt_us": ps.mean_srtt(),
                "final_cwnd": ps.cwnd,
            }
        sched = sim.server.path_sched
        diagnostics = {
            "refrain": getattr(sched, "refrain_count", 0),
            "blocked_decisions": sim.server.blocked_count,
            "reservations_dropped_events": (
                sched.ledger.drop_events if sched.reserving else 0),
            "reservations_clamped": (
                sched.ledger.clamped if sched.reserving else 0),
            "delivered_transport_bytes": sim.metrics.delivered_bytes,
            "goodput_unique_bytes": sim.metrics.goodput_unique_bytes,
        }
        completed = sum(1 for m in self.messages if m.completed_at is not None)
        return {
            "engine_version": __version__,
            "config": self.config.to_dict(),
            "events_dispatched": sim.engine.dispatched,
            "paths": paths,
            "messages": {
                "generated": len(self.messages),
                "completed": completed,
                "app_acked": sum(1 for m in self.messages
                                 if m.app_acked_at is not None),
            },
            "diagnostics": diagnostics,
        }

    def write_outputs(self, outdir: Path) -> list[str]:
        """Write the four CSVs and the manifest; returns diagnostics, if any."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_mct_csv(outdir / "mct.csv", self.messages)
        write_ccdf_csv(outdir / "ccdf.csv", self.ccdf_curve())
        write_throughput_csv(outdir / "throughput.csv", self.metrics.throughput())
        records, skipped = self.growth_records()
        write_growth_csv(outdir / "cwnd_growth.csv", records)
        with (outdir / "manifest.json").open("w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [f"cwnd_growth omitted: {s}" for s in skipped]
