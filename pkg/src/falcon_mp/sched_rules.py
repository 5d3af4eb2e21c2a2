"""Scheduler interface and the rule-based baselines (minRTT, BLEST, round-robin)."""
from __future__ import annotations

from typing import NamedTuple, Optional, Tuple


class PathView(NamedTuple):
    path_id: int
    cwnd: float
    inflight: int
    swnd_share: int
    srtt: float
    rttvar: float
    headroom: bool


class SchedulerView(NamedTuple):
    """Read-only snapshot of the connection at one event boundary.

    ``swnd_share`` is the number of packets the connection could still put
    in flight right now: the free send window capped by the unsent data.
    """

    paths: Tuple[PathView, ...]
    bytes_remaining: int
    now: float


class Scheduler:
    """Base class.  ``select`` returns a path id, or ``None`` to defer.

    The feedback hooks are no-ops here; learning schedulers override them.
    """

    name = "base"

    def select(self, view: SchedulerView) -> Optional[int]:
        raise NotImplementedError

    def on_sent(self, packet):
        return None

    def on_ack(self, packet, rtt_ms: float, now: float) -> None:
        pass

    def on_loss(self, packet, now: float) -> None:
        pass

    def on_transfer_start(self, now: float) -> None:
        pass

    def on_transfer_end(self, now: float) -> None:
        pass


def minrtt_select(view: SchedulerView) -> Optional[int]:
    best = None
    for p in view.paths:
        if p.headroom and (best is None or p.srtt < best.srtt):
            best = p
    return None if best is None else best.path_id


def blest_select(view: SchedulerView, delta: float = 1.0,
                 packet_size: int = 1250) -> Optional[int]:
    """BLEST for two or more paths.

    With the fastest path available this is minRTT.  Otherwise the candidate
    slow path is used only if the data the fast path could push during one
    slow-path RTT (scaled by ``delta``) still fits in the send window left
    after this packet.
    """
    paths = view.paths
    fast = min(paths, key=lambda p: (p.srtt, p.path_id))
    if fast.headroom:
        return fast.path_id
    slow = minrtt_select(view)
    if slow is None:
        return None
    slow_p = paths[slow]
    ratio = slow_p.srtt / fast.srtt
    # packets the fast path can send while one slow-path packet is in flight,
    # with congestion-avoidance growth of one packet per fast RTT
    x = fast.cwnd * ratio + ratio * (ratio - 1.0) / 2.0
    window = slow_p.swnd_share - 1
    if x * delta > window:
        return None
    return slow


class MinRttScheduler(Scheduler):
    name = "minrtt"

    def select(self, view):
        return minrtt_select(view)


class BlestScheduler(Scheduler):
    name = "blest"

    def __init__(self, delta: float = 1.0):
        self.delta = delta

    def select(self, view):
        return blest_select(view, self.delta)


class RoundRobinScheduler(Scheduler):
    name = "rr"

    def __init__(self):
        self.last: Optional[int] = None

    def on_transfer_start(self, now):
        self.last = None

    def select(self, view):
        choice = rr_select(view, self.last)
        if choice is not None:
            self.last = choice
        return choice


def rr_select(view: SchedulerView, last: Optional[int]) -> Optional[int]:
    n = len(view.paths)
    start = 0 if last is None else last + 1
    for k in range(n):
        p = view.paths[(start + k) % n]
        if p.headroom:
            return p.path_id
    return None
