"""Trace-driven discrete-event emulation of a handful of network paths.

A path is described by a :class:`PathTrace`, a piecewise-constant schedule of
:class:`PathModel` values (bandwidth, RTT mean/deviation, loss rate).  A
:class:`Link` turns individual packet sends into arrival or loss events, and a
:class:`Simulator` pops those events in time order and dispatches them.
"""
from __future__ import annotations

import bisect
import heapq
import io
import math
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Union

import numpy as np

__all__ = [
    "EventKind",
    "Link",
    "PathModel",
    "PathTrace",
    "SimClock",
    "SimEvent",
    "SimulationError",
    "Simulator",
    "TraceParseError",
    "TraceValidationError",
    "load_trace",
    "model_at",
    "preset_trace",
    "read_trace",
    "send_packet",
    "PRESETS",
]


class TraceParseError(ValueError):
    """A trace row could not be parsed."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class TraceValidationError(ValueError):
    pass


class SimulationError(RuntimeError):
    """A handler raised while processing an event."""

    def __init__(self, event: "SimEvent", exc: BaseException):
        super().__init__(
            f"handler for {event.kind.name} at t={event.fire_time:.6f}s failed: {exc!r}"
        )
        self.event = event


@dataclass(frozen=True)
class PathModel:
    """Static characteristics of one path.

    bandwidth is in bits/second, ``rtt_mean`` and ``rtt_dev`` in milliseconds
    and ``loss_rate`` is a fraction.
    """

    bandwidth: float
    rtt_mean: float
    rtt_dev: float
    loss_rate: float

    def __post_init__(self):
        values = (self.bandwidth, self.rtt_mean, self.rtt_dev, self.loss_rate)
        if not all(math.isfinite(v) for v in values):
            raise TraceValidationError(f"non-finite path parameter in {values}")
        if self.bandwidth <= 0:
            raise TraceValidationError("bandwidth must be > 0")
        if self.rtt_mean <= 0:
            raise TraceValidationError("rtt_mean must be > 0")
        if self.rtt_dev < 0:
            raise TraceValidationError("rtt_dev must be >= 0")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise TraceValidationError("loss_rate must lie in [0, 1]")

    def scaled(self, bandwidth: float = 1.0, rtt_dev: float = 1.0,
               loss_rate: float = 1.0) -> "PathModel":
        return PathModel(self.bandwidth * bandwidth, self.rtt_mean,
                         self.rtt_dev * rtt_dev, min(1.0, self.loss_rate * loss_rate))


@dataclass(frozen=True)
class PathTrace:
    segments: tuple = ()
    duration: float = math.inf

    def __post_init__(self):
        segs = tuple((float(t), m) for t, m in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise TraceValidationError("no segments")
        if segs[0][0] != 0.0:
            raise TraceValidationError("first segment must start at 0")
        starts = [t for t, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise TraceValidationError("segment start times must be strictly increasing")
        if not self.duration > starts[-1]:
            raise TraceValidationError("duration must exceed the last segment start")
        object.__setattr__(self, "_starts", starts)

    @classmethod
    def constant(cls, model: PathModel, duration: float = math.inf) -> "PathTrace":
        return cls(((0.0, model),), duration)

    def scaled(self, **factors) -> "PathTrace":
        return PathTrace(tuple((t, m.scaled(**factors)) for t, m in self.segments),
                         self.duration)


def model_at(trace: PathTrace, t: float) -> PathModel:
    """Model of the last segment starting at or before ``t``."""
    if not 0.0 <= t <= trace.duration:
        raise ValueError(f"t={t} outside trace range [0, {trace.duration}]")
    i = bisect.bisect_right(trace._starts, t) - 1
    return trace.segments[i][1]


def load_trace(source: Union[Iterable[str], str], duration: float = math.inf) -> PathTrace:
    """Parse a trace from a text stream (or a string holding the whole file).

    Rows are ``start_time_s,bandwidth_bps,rtt_mean_ms,rtt_dev_ms,loss_rate``;
    blank lines and lines starting with ``#`` are skipped.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    segments = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise TraceParseError(lineno, f"expected 5 fields, got {len(parts)}")
        try:
            t, bw, rtt, dev, loss = (float(p) for p in parts)
        except ValueError as exc:
            raise TraceParseError(lineno, str(exc)) from None
        try:
            model = PathModel(bw, rtt, dev, loss)
        except TraceValidationError as exc:
            raise TraceParseError(lineno, str(exc)) from None
        if segments and t <= segments[-1][0]:
            raise TraceValidationError(
                f"line {lineno}: non-monotonic start time {t} after {segments[-1][0]}")
        segments.append((t, model))
    if not segments:
        raise TraceValidationError("no segments")
    return PathTrace(tuple(segments), duration)


def read_trace(path: Union[str, Path], duration: float = math.inf) -> PathTrace:
    with open(path, encoding="utf-8") as fh:
        return load_trace(fh, duration)


PRESETS = ("5g", "4g", "wlan", "driving-5g")


def preset_trace(name: str) -> PathTrace:
    """Load one of the bundled traces by name (``5g``, ``4g``, ``wlan``, ...)."""
    fname = name if name.endswith(".trace") else f"{name}.trace"
    res = resources.files("falcon_mp").joinpath("data", fname)
    if not res.is_file():
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = res.read_text(encoding="utf-8")
    return load_trace(text)


class EventKind(IntEnum):
    PACKET_ARRIVAL = 0
    ACK_ARRIVAL = 1
    PACKET_LOST = 2
    TRACE_SEGMENT_CHANGE = 3
    TIMER_EXPIRY = 4


@dataclass
class SimEvent:
    fire_time: float
    kind: EventKind
    payload: Any = None


@dataclass
class SimClock:
    now: float = 0.0


class Simulator:
    """Event queue plus dispatch loop.

    Events with equal ``fire_time`` are dispatched in insertion order.
    """

    def __init__(self):
        self.clock = SimClock()
        self._heap: list = []
        self._seq = 0
        self._handlers: dict = {}
        self.dispatched = 0

    @property
    def now(self) -> float:
        return self.clock.now

    def __len__(self):
        return len(self._heap)

    def on(self, kind: EventKind, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[kind] = handler

    def schedule(self, event: SimEvent) -> SimEvent:
        if event.fire_time < self.clock.now:
            raise ValueError(
                f"event at {event.fire_time} scheduled in the past (now={self.clock.now})")
        heapq.heappush(self._heap, (event.fire_time, self._seq, event))
        self._seq += 1
        return event

    def at(self, fire_time: float, kind: EventKind, payload: Any = None) -> SimEvent:
        return self.schedule(SimEvent(fire_time, kind, payload))

    def run_until(self, stop: Optional[Callable[[], bool]] = None) -> SimClock:
        heap = self._heap
        handlers = self._handlers
        clock = self.clock
        while heap:
            if stop is not None and stop():
                break
            fire_time, _, event = heapq.heappop(heap)
            clock.now = fire_time
            handler = handlers.get(event.kind)
            self.dispatched += 1
            if handler is None:
                continue
            try:
                handler(event)
            except SimulationError:
                raise
            except Exception as exc:
                raise SimulationError(event, exc) from exc
        return clock


class _Noise:
    """Block-buffered standard normal and uniform draws from one generator."""

    __slots__ = ("rng", "block", "_n", "_u", "_i")

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self.rng = rng
        self.block = block
        self._i = block

    def pair(self):
        if self._i >= self.block:
            self._n = self.rng.standard_normal(self.block).tolist()
            self._u = self.rng.random(self.block).tolist()
            self._i = 0
        i = self._i
        self._i = i + 1
        return self._n[i], self._u[i]


@dataclass
class Link:
    """One emulated path: FIFO serialization, sampled RTT, random loss.

    ``send`` returns the event the packet produces at the receiver side.
    Delays are in seconds.  Non-lost packets and their ACKs leave the path in
    send order.  The bottleneck queue holds ``buffer_bdp`` bandwidth-delay
    products (at least ``min_buffer_packets``); ``buffer_bdp=None`` makes it
    unbounded.
    """

    trace: PathTrace
    rng: np.random.Generator
    path_id: int = 0
    rtt_floor_ms: float = 1.0
    buffer_bdp: Optional[float] = 1.0
    min_buffer_packets: int = 16
    busy_until: float = 0.0
    last_arrival: float = 0.0
    last_ack: float = 0.0
    _noise: _Noise = field(init=False, repr=False)
    _seg: int = field(init=False, default=0, repr=False)

    def __post_init__(self):
        self._noise = _Noise(self.rng)

    def reset(self) -> None:
        self.busy_until = 0.0
        self.last_arrival = 0.0
        self.last_ack = 0.0

    def model(self, t: float) -> PathModel:
        starts = self.trace._starts
        i = self._seg
        if i + 1 < len(starts) and t >= starts[i + 1] or t < starts[i]:
            i = self._seg = bisect.bisect_right(starts, t) - 1
        return self.trace.segments[i][1]

    def sample_rtt(self, model: PathModel) -> float:
        """RTT draw in ms: Normal(mean, dev) truncated below."""
        floor = max(self.rtt_floor_ms, model.rtt_mean - 3.0 * model.rtt_dev)
        while True:
            z, _ = self._noise.pair()
            rtt = model.rtt_mean + model.rtt_dev * z
            if rtt >= floor:
                return rtt

    def send(self, size: int, now: float, payload: Any = None) -> SimEvent:
        model = self.model(now)
        rtt = self.sample_rtt(model)
        owd = rtt / 2000.0
        _, u = self._noise.pair()
        start = now if now > self.busy_until else self.busy_until
        if u < model.loss_rate:
            return SimEvent(start + owd, EventKind.PACKET_LOST, payload)
        ser = size * 8.0 / model.bandwidth
        if self.buffer_bdp is not None and start > now:
            # drop-tail: queue (in packets) would exceed the buffer
            limit = max(self.min_buffer_packets,
                        self.buffer_bdp * model.rtt_mean / 1000.0 / ser)
            if (start - now) / ser >= limit:
                return SimEvent(now + owd, EventKind.PACKET_LOST, payload)
        done = start + ser
        self.busy_until = done
        arrival = done + owd
        if arrival < self.last_arrival:
            arrival = self.last_arrival
        self.last_arrival = arrival
        ack = arrival + owd
        if ack < self.last_ack:
            ack = self.last_ack
        self.last_ack = ack
        return SimEvent(arrival, EventKind.PACKET_ARRIVAL, (payload, ack))


def send_packet(link: Link, size: int, now: float, payload: Any = None) -> SimEvent:
    if size <= 0:
        raise ValueError("packet size must be positive")
    return link.send(size, now, payload)
