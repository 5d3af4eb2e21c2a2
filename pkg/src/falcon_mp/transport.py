"""Multipath connection: per-path OLIA congestion control, loss recovery and
the scheduler invocation point.

A :class:`Connection` owns the transport state of one bulk transfer and drives
a :class:`~falcon_mp.netsim.Simulator` until every byte has been acknowledged.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

from .netsim import EventKind, Link, SimEvent, Simulator
from .sched_rules import PathView, Scheduler, SchedulerView

log = logging.getLogger(__name__)

PACKET_SIZE = 1250

INFLIGHT, ACKED, LOST = 0, 1, 2


class ProtocolStateError(RuntimeError):
    pass


class SchedulerContractError(RuntimeError):
    pass


class StallError(RuntimeError):
    pass


@dataclass
class TransportConfig:
    packet_size: int = PACKET_SIZE
    swnd: int = 1000
    initial_cwnd: float = 10.0
    initial_srtt_ms: float = 100.0
    reorder_threshold: int = 3
    min_rto_ms: float = 200.0
    stall_timeout: float = 30.0
    ewma_alpha: float = 1.0 / 8.0
    ewma_beta: float = 1.0 / 4.0


@dataclass(eq=False, slots=True)
class Packet:
    seq: int
    data_id: int
    path_id: int
    size: int
    sent_at: float
    path_index: int
    tag: Any
    state: int


class PathState:
    """Congestion and RTT state of one path.  Windows are in packets."""

    def __init__(self, path_id: int, cfg: TransportConfig):
        self.path_id = path_id
        self.cwnd = float(cfg.initial_cwnd)
        self.ssthresh = math.inf
        self.inflight = 0
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.loss_events = 0
        self.lost_packets = 0
        self.acked_bytes = 0
        self.sent_packets = 0
        # OLIA: bytes acked since the last loss and between the last two losses
        self.olia_l1 = 0.0
        self.olia_l2 = 0.0
        self.recovery_index = -1
        self.outstanding: deque = deque()
        self.timer_armed = False

    @property
    def headroom(self) -> bool:
        return self.inflight + 1 <= self.cwnd

    def srtt_or(self, default: float) -> float:
        return default if self.srtt is None else self.srtt


def olia_increase(paths: Sequence[PathState], r: int, rtt_default: float) -> float:
    """Per-ACK window increase (packets) on path ``r`` in congestion avoidance."""
    rtts = [max(p.srtt_or(rtt_default), 1e-3) / 1000.0 for p in paths]
    w = [p.cwnd for p in paths]
    denom = sum(wi / ri for wi, ri in zip(w, rtts)) ** 2
    coupled = (w[r] / rtts[r] ** 2) / denom
    n = len(paths)
    if n == 1:
        return coupled
    max_w = max(w)
    max_paths = {i for i in range(n) if w[i] == max_w}
    quality = [max(p.olia_l1, p.olia_l2) / ri for p, ri in zip(paths, rtts)]
    best_q = max(quality)
    best_paths = {i for i in range(n) if quality[i] == best_q}
    collected = best_paths - max_paths
    alpha = 0.0
    if collected:
        if r in collected:
            alpha = 1.0 / (n * len(collected))
        elif r in max_paths:
            alpha = -1.0 / (n * len(max_paths))
    return coupled + alpha / w[r]


class Connection:
    """Bulk-transfer sender over ``links`` using ``scheduler`` for path choice."""

    def __init__(self, sim: Simulator, links: Sequence[Link], scheduler: Scheduler,
                 config: Optional[TransportConfig] = None):
        self.sim = sim
        self.links = list(links)
        self.scheduler = scheduler
        self.cfg = config or TransportConfig()
        self.epoch = 0
        self.paths: List[PathState] = []
        self.done = True
        self.packets_sent = 0
        self.observers: list = []
        sim.on(EventKind.PACKET_ARRIVAL, self._on_arrival)
        sim.on(EventKind.ACK_ARRIVAL, self._on_ack_event)
        sim.on(EventKind.PACKET_LOST, self._on_lost_event)
        sim.on(EventKind.TIMER_EXPIRY, self._on_timer)
        self.reset(0)

    # -- state -----------------------------------------------------------
    def reset(self, size: int) -> None:
        cfg = self.cfg
        self.epoch += 1
        self.paths = [PathState(i, cfg) for i in range(len(self.links))]
        self.unacked: dict = {}
        self.next_seq = 0
        n_chunks = -(-size // cfg.packet_size) if size > 0 else 0
        self.chunk_sizes = [cfg.packet_size] * n_chunks
        if n_chunks and size % cfg.packet_size:
            self.chunk_sizes[-1] = size % cfg.packet_size
        self.chunk_acked = [False] * n_chunks
        self.send_queue: deque = deque(range(n_chunks))
        self.bytes_remaining = size
        self.total_inflight = 0
        self.done = size == 0
        self.last_progress = self.sim.now

    @property
    def swnd(self) -> int:
        return self.cfg.swnd

    def view(self) -> SchedulerView:
        srtt0 = self.cfg.initial_srtt_ms
        share = min(self.cfg.swnd - self.total_inflight, len(self.send_queue))
        pv = tuple(
            PathView(p.path_id, p.cwnd, p.inflight, share, p.srtt_or(srtt0),
                     p.rttvar if p.srtt is not None else srtt0 / 2.0, p.inflight + 1 <= p.cwnd)
            for p in self.paths)
        return SchedulerView(pv, self.bytes_remaining, self.sim.now)

    # -- sending ---------------------------------------------------------
    def try_send(self) -> int:
        """Send while windows allow and the scheduler does not defer."""
        sent = 0
        paths = self.paths
        swnd = self.cfg.swnd
        while self.send_queue and self.total_inflight < swnd:
            if not any(p.inflight + 1 <= p.cwnd for p in paths):
                break
            choice = self.scheduler.select(self.view())
            if choice is None:
                break
            if not 0 <= choice < len(paths):
                raise SchedulerContractError(f"scheduler chose unknown path {choice}")
            path = paths[choice]
            if path.inflight + 1 > path.cwnd:
                raise SchedulerContractError(
                    f"{self.scheduler.name} chose path {choice} without cwnd headroom")
            self._send_on(path)
            sent += 1
        return sent

    def _send_on(self, path: PathState) -> Packet:
        now = self.sim.now
        data_id = self.send_queue.popleft()
        pkt = Packet(self.next_seq, data_id, path.path_id, self.chunk_sizes[data_id], now,
                     path.sent_packets, None, INFLIGHT)
        self.next_seq += 1
        path.sent_packets += 1
        path.inflight += 1
        self.total_inflight += 1
        path.outstanding.append(pkt)
        self.unacked[pkt.seq] = pkt
        self.packets_sent += 1
        pkt.tag = self.scheduler.on_sent(pkt)
        ev = self.links[path.path_id].send(pkt.size, now, (self.epoch, pkt))
        self.sim.schedule(ev)
        if not path.timer_armed:
            self._arm_timer(path, now + self._rto(path))
        return pkt

    def _rto(self, path: PathState) -> float:
        srtt = path.srtt_or(self.cfg.initial_srtt_ms)
        return max(self.cfg.min_rto_ms, 2.0 * srtt) / 1000.0

    def _arm_timer(self, path: PathState, when: float) -> None:
        path.timer_armed = True
        self.sim.at(max(when, self.sim.now), EventKind.TIMER_EXPIRY, (self.epoch, path.path_id))

    # -- feedback --------------------------------------------------------
    def on_ack(self, path_id: int, seq: int, rtt_sample: float) -> None:
        """Process an ACK for ``seq`` carrying an RTT sample in ms."""
        pkt = self.unacked.get(seq)
        if pkt is None or pkt.path_id != path_id:
            raise ProtocolStateError(f"ACK for unknown sequence {seq} on path {path_id}")
        del self.unacked[seq]
        path = self.paths[path_id]
        spurious = pkt.state == LOST
        pkt.state = ACKED
        if not self.chunk_acked[pkt.data_id]:
            self.chunk_acked[pkt.data_id] = True
            self.bytes_remaining -= pkt.size
            self.last_progress = self.sim.now
            if self.bytes_remaining == 0:
                self.done = True
        # sequence numbers are never reused, so even the ACK of a packet
        # already declared lost is an unambiguous RTT sample; without it a
        # path whose RTT jumps past the RTO would time out forever
        a, b = self.cfg.ewma_alpha, self.cfg.ewma_beta
        if path.srtt is None:
            path.srtt = rtt_sample
            path.rttvar = rtt_sample / 2.0
        else:
            path.rttvar = (1 - b) * path.rttvar + b * abs(path.srtt - rtt_sample)
            path.srtt = (1 - a) * path.srtt + a * rtt_sample
        if spurious:
            return
        path.inflight -= 1
        self.total_inflight -= 1
        path.acked_bytes += pkt.size
        path.olia_l1 += pkt.size
        if path.cwnd < path.ssthresh:
            path.cwnd += 1.0
        else:
            path.cwnd += olia_increase(self.paths, path_id, self.cfg.initial_srtt_ms)
        path.cwnd = max(path.cwnd, 1.0)
        self.scheduler.on_ack(pkt, rtt_sample, self.sim.now)
        for obs in self.observers:
            obs.on_ack(pkt, rtt_sample, self.sim.now)
        # reordering-threshold loss detection on this path
        out = path.outstanding
        while out and out[0].state != INFLIGHT:
            out.popleft()
        limit = pkt.path_index - self.cfg.reorder_threshold
        while out and out[0].path_index <= limit:
            victim = out.popleft()
            if victim.state == INFLIGHT:
                self.on_loss(path_id, victim.seq)

    def on_loss(self, path_id: int, seq: int) -> None:
        pkt = self.unacked.get(seq)
        if pkt is None or pkt.path_id != path_id or pkt.state != INFLIGHT:
            raise ProtocolStateError(f"loss report for unknown sequence {seq} on path {path_id}")
        pkt.state = LOST
        path = self.paths[path_id]
        path.inflight -= 1
        self.total_inflight -= 1
        path.lost_packets += 1
        if pkt.path_index > path.recovery_index:
            path.cwnd = max(1.0, path.cwnd / 2.0)
            path.ssthresh = path.cwnd
            path.recovery_index = path.sent_packets - 1
            path.loss_events += 1
            path.olia_l2 = path.olia_l1
            path.olia_l1 = 0.0
        if not self.chunk_acked[pkt.data_id]:
            self.send_queue.appendleft(pkt.data_id)
        self.scheduler.on_loss(pkt, self.sim.now)
        for obs in self.observers:
            obs.on_loss(pkt, self.sim.now)

    # -- event handlers --------------------------------------------------
    def _on_arrival(self, ev: SimEvent) -> None:
        (epoch, pkt), ack_time = ev.payload
        if epoch == self.epoch:
            self.sim.at(ack_time, EventKind.ACK_ARRIVAL, (epoch, pkt))

    def _on_ack_event(self, ev: SimEvent) -> None:
        epoch, pkt = ev.payload
        if epoch != self.epoch or pkt.state == ACKED:
            return
        rtt = (self.sim.now - pkt.sent_at) * 1000.0
        self.on_ack(pkt.path_id, pkt.seq, rtt)
        if not self.done:
            self.try_send()

    def _on_lost_event(self, ev: SimEvent) -> None:
        # the sender only learns about losses through ACK gaps or timeouts
        return

    def _on_timer(self, ev: SimEvent) -> None:
        epoch, path_id = ev.payload
        if epoch != self.epoch:
            return
        path = self.paths[path_id]
        path.timer_armed = False
        now = self.sim.now
        if now - self.last_progress > self.cfg.stall_timeout:
            self.stalled = True
            return
        out = path.outstanding
        while out and out[0].state != INFLIGHT:
            out.popleft()
        if not out:
            return
        rto = self._rto(path)
        oldest = out[0]
        if now - oldest.sent_at >= rto - 1e-12:
            out.popleft()
            self.on_loss(path_id, oldest.seq)
            while out and out[0].state != INFLIGHT:
                out.popleft()
            if out:
                self._arm_timer(path, out[0].sent_at + rto)
            if not self.done:
                self.try_send()
        else:
            self._arm_timer(path, oldest.sent_at + rto)

    # -- driver ----------------------------------------------------------
    def transfer(self, size: int) -> float:
        """Reset transport state, move ``size`` bytes and return the elapsed time (s)."""
        if size <= 0:
            raise ValueError("transfer size must be positive")
        self.reset(size)
        self.stalled = False
        start = self.sim.now
        self.scheduler.on_transfer_start(start)
        self.try_send()
        self.sim.run_until(lambda: self.done or self.stalled)
        if not self.done:
            raise StallError(
                f"transfer stalled at t={self.sim.now:.3f}s with "
                f"{self.bytes_remaining} bytes outstanding")
        elapsed = self.sim.now - start
        self.scheduler.on_transfer_end(self.sim.now)
        return elapsed
