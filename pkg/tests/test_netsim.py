import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from falcon_mp.netsim import (EventKind, Link, PathModel, PathTrace, SimEvent, SimulationError,
                              Simulator, TraceParseError, TraceValidationError, load_trace,
                              model_at, preset_trace, read_trace, send_packet, PRESETS)


def m(bw=10e6, rtt=30.0, dev=0.0, loss=0.0):
    return PathModel(bw, rtt, dev, loss)


# -- traces -------------------------------------------------------------------

def test_load_trace_parses_rows_and_comments():
    tr = load_trace("# header\n0,1e6,20,2,0.01\n\n1.5,2e6,30,3,0\n")
    assert tr.segments == ((0.0, m(1e6, 20, 2, 0.01)), (1.5, m(2e6, 30, 3, 0)))


@pytest.mark.parametrize("text,err", [
    ("0,1e6,20,2\n", TraceParseError),
    ("0,abc,20,2,0\n", TraceParseError),
    ("0,-1,20,2,0\n", TraceParseError),
    ("0,1e6,20,2,1.5\n", TraceParseError),
    ("0,1e6,20,2,0\n0,1e6,20,2,0\n", TraceValidationError),
    ("1,1e6,20,2,0\n", TraceValidationError),
    ("# nothing\n", TraceValidationError),
])
def test_load_trace_errors(text, err):
    with pytest.raises(err):
        load_trace(text)


def test_parse_error_carries_line_number():
    with pytest.raises(TraceParseError) as ei:
        load_trace("0,1e6,20,2,0\n# c\n1,x,2,3,0\n")
    assert ei.value.lineno == 3


def test_model_at_is_piecewise_constant():
    tr = PathTrace(((0.0, m(rtt=10)), (2.0, m(rtt=20)), (5.0, m(rtt=30))), duration=8.0)
    assert model_at(tr, 0.0).rtt_mean == 10
    assert model_at(tr, 1.999).rtt_mean == 10
    assert model_at(tr, 2.0).rtt_mean == 20
    assert model_at(tr, 8.0).rtt_mean == 30
    with pytest.raises(ValueError):
        model_at(tr, 8.5)
    with pytest.raises(ValueError):
        model_at(tr, -0.1)


def test_presets_load_and_match_their_files(tmp_path):
    for name in PRESETS:
        tr = preset_trace(name)
        assert tr.segments[0][0] == 0.0
    fourg = preset_trace("4g").segments[0][1]
    assert (fourg.bandwidth, fourg.rtt_mean, fourg.rtt_dev, fourg.loss_rate) == (
        140e6, 29.2, 4.8, 0.001)
    p = tmp_path / "x.trace"
    p.write_text("0,1e6,20,2,0\n")
    assert read_trace(p).segments[0][1] == m(1e6, 20, 2, 0)
    with pytest.raises(ValueError):
        preset_trace("nope")


def test_scaled_trace():
    tr = PathTrace.constant(m(100.0, 20.0, 4.0, 0.01)).scaled(bandwidth=0.1, rtt_dev=2.0,
                                                                loss_rate=3.0)
    got = tr.segments[0][1]
    assert got.bandwidth == pytest.approx(10.0)
    assert got.rtt_dev == 8.0
    assert got.loss_rate == pytest.approx(0.03)


# -- simulator ------------------------------------------------------------------

def test_events_dispatch_in_time_then_insertion_order():
    sim = Simulator()
    seen = []
    sim.on(EventKind.TIMER_EXPIRY, lambda ev: seen.append(ev.payload))
    for t, tag in [(2.0, "c"), (1.0, "a"), (1.0, "b"), (0.5, "z")]:
        sim.at(t, EventKind.TIMER_EXPIRY, tag)
    sim.run_until()
    assert seen == ["z", "a", "b", "c"]
    assert sim.now == 2.0


def test_schedule_in_past_rejected_and_stop_condition():
    sim = Simulator()
    sim.at(1.0, EventKind.TIMER_EXPIRY)
    sim.at(2.0, EventKind.TIMER_EXPIRY)
    sim.run_until(lambda: sim.now >= 1.0)
    assert sim.now == 1.0 and len(sim) == 1
    with pytest.raises(ValueError):
        sim.at(0.5, EventKind.TIMER_EXPIRY)


def test_handler_errors_are_wrapped():
    sim = Simulator()

    def boom(ev):
        raise KeyError("x")

    sim.on(EventKind.PACKET_LOST, boom)
    sim.at(0.1, EventKind.PACKET_LOST)
    with pytest.raises(SimulationError):
        sim.run_until()


# -- links ----------------------------------------------------------------------

def test_lossless_constant_link_timing():
    link = Link(PathTrace.constant(m(bw=1e6, rtt=40.0)), np.random.default_rng(0),
                buffer_bdp=None)
    ev = send_packet(link, 1250, 0.0, "p")
    ser = 1250 * 8 / 1e6
    assert ev.kind == EventKind.PACKET_ARRIVAL
    assert ev.fire_time == pytest.approx(ser + 0.020)
    payload, ack = ev.payload
    assert payload == "p" and ack == pytest.approx(ser + 0.040)
    # a second packet queues behind the first
    ev2 = link.send(1250, 0.0)
    assert ev2.fire_time == pytest.approx(2 * ser + 0.020)


def test_send_rejects_bad_size():
    link = Link(PathTrace.constant(m()), np.random.default_rng(0))
    with pytest.raises(ValueError):
        send_packet(link, 0, 0.0)


def test_loss_rate_is_respected():
    loss = 0.05
    link = Link(PathTrace.constant(m(bw=1e12, loss=loss)), np.random.default_rng(1),
                buffer_bdp=None)
    n = 20000
    lost = sum(link.send(100, i * 1.0).kind == EventKind.PACKET_LOST for i in range(n))
    # two-sided binomial test at the 0.1% level
    assert stats.binomtest(lost, n, loss).pvalue > 1e-3


def test_rtt_distribution_is_truncated_normal():
    model = m(rtt=30.0, dev=5.0)
    link = Link(PathTrace.constant(model), np.random.default_rng(2))
    x = np.array([link.sample_rtt(model) for _ in range(20000)])
    assert x.min() >= 15.0
    ref = stats.truncnorm(-3, np.inf, loc=30, scale=5)
    assert stats.kstest(x, ref.cdf).pvalue > 1e-3


def test_drop_tail_buffer_drops_excess():
    # 1 Mbps, 40 ms -> BDP of 4 packets, so the 16-packet floor applies;
    # the packet in service counts towards the buffer
    link = Link(PathTrace.constant(m(bw=1e6, rtt=40.0)), np.random.default_rng(3))
    kinds = [link.send(1250, 0.0).kind for _ in range(40)]
    assert kinds[:16].count(EventKind.PACKET_ARRIVAL) == 16
    assert kinds[16:].count(EventKind.PACKET_LOST) == 24


def test_buffer_scales_with_bdp():
    # 100 Mbps, 100 ms -> BDP of 1000 packets
    link = Link(PathTrace.constant(m(bw=100e6, rtt=100.0)), np.random.default_rng(3))
    kinds = [link.send(1250, 0.0).kind for _ in range(1100)]
    assert kinds.count(EventKind.PACKET_ARRIVAL) == 1000


def test_arrivals_are_fifo_despite_jitter():
    link = Link(PathTrace.constant(m(bw=1e9, rtt=30.0, dev=10.0)), np.random.default_rng(4))
    times = []
    for i in range(500):
        ev = link.send(1250, i * 1e-4)
        if ev.kind == EventKind.PACKET_ARRIVAL:
            times.append((ev.fire_time, ev.payload[1]))
    arr, ack = map(np.array, zip(*times))
    assert np.all(np.diff(arr) >= 0) and np.all(np.diff(ack) >= 0)


def test_link_follows_trace_segments():
    tr = PathTrace(((0.0, m(rtt=10.0)), (1.0, m(rtt=100.0))))
    link = Link(tr, np.random.default_rng(5), buffer_bdp=None)
    early = link.send(1, 0.5).payload[1] - 0.5
    late = link.send(1, 2.0).payload[1] - 2.0
    assert early == pytest.approx(0.010, abs=1e-4)
    assert late == pytest.approx(0.100, abs=1e-4)
    # and back again after a bisect jump
    assert link.model(0.2).rtt_mean == 10.0


def test_same_seed_same_events():
    def run(seed):
        link = Link(PathTrace.constant(m(dev=5.0, loss=0.1)), np.random.default_rng(seed))
        return [(e.kind, e.fire_time) for e in (link.send(1250, i * 0.01) for i in range(200))]
    assert run(7) == run(7)
    assert run(7) != run(8)


@settings(max_examples=60, deadline=None)
@given(bw=st.floats(1e3, 1e10), rtt=st.floats(0.1, 1e4), dev=st.floats(0, 1e3),
       loss=st.floats(0, 1))
def test_valid_models_round_trip_through_text(bw, rtt, dev, loss):
    model = PathModel(bw, rtt, dev, loss)
    tr = load_trace(f"0,{bw!r},{rtt!r},{dev!r},{loss!r}\n")
    assert tr.segments[0][1] == model


@settings(max_examples=60, deadline=None)
@given(starts=st.lists(st.floats(0.001, 100), min_size=1, max_size=8, unique=True),
       t=st.floats(0, 200))
def test_model_at_picks_last_started_segment(starts, t):
    starts = [0.0] + sorted(starts)
    tr = PathTrace(tuple((s, m(rtt=1.0 + i)) for i, s in enumerate(starts)))
    got = model_at(tr, t).rtt_mean
    expect = 1.0 + max(i for i, s in enumerate(starts) if s <= t)
    assert got == expect


def test_invalid_models_rejected():
    for args in [(0, 1, 0, 0), (1, 0, 0, 0), (1, 1, -1, 0), (1, 1, 0, -0.1),
                 (math.inf, 1, 0, 0), (1, math.nan, 0, 0)]:
        with pytest.raises(TraceValidationError):
            PathModel(*args)
    with pytest.raises(TraceValidationError):
        PathTrace(((0.0, m()),), duration=0.0)
