import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from falcon_mp import harness as H
from falcon_mp.netsim import PathModel

SMALL = 300_000


def res(*times):
    return H.RunResult(np.array(times, dtype=float))


@pytest.mark.parametrize("ref,test,expect", [(2.0, 2.0, 1.0), (2.0, 2.5, 0.8), (2.0, 1.6, 1.25)])
def test_relative_score_arithmetic(ref, test, expect):
    assert H.relative_score(res(test), res(ref)) == pytest.approx(expect)


def test_relative_score_errors():
    with pytest.raises(ValueError):
        H.relative_score(H.RunResult(np.array([])), res(1.0))
    with pytest.raises(ValueError):
        res(0.0)


def test_run_result_stats():
    r = res(3.0, 1.0, 2.0)
    assert (r.median, r.mean) == (2.0, 2.0)
    x, y = r.cdf()
    np.testing.assert_array_equal(x, [1, 2, 3])
    np.testing.assert_allclose(y, [1 / 3, 2 / 3, 1])


def test_single_repetition_is_deterministic():
    sc = H.Scenario.preset(["4g", "wlan"])
    a = H.run_bulk(H.make_scheduler("minrtt"), sc, 1, seed=4, size=SMALL)
    b = H.run_bulk(H.make_scheduler("minrtt"), sc, 1, seed=4, size=SMALL)
    assert a.times.tobytes() == b.times.tobytes()
    c = H.run_bulk(H.make_scheduler("minrtt"), sc, 1, seed=5, size=SMALL)
    assert c.times[0] != a.times[0]


def test_minrtt_not_slower_than_rr_on_heterogeneous_paths():
    sc = H.Scenario.preset(["4g", "wlan"])
    mr = H.run_bulk(H.make_scheduler("minrtt"), sc, 15, seed=0)
    rr = H.run_bulk(H.make_scheduler("rr"), sc, 15, seed=0)
    assert mr.median <= rr.median


def test_repetitions_must_be_positive():
    with pytest.raises(ValueError):
        H.run_bulk(H.make_scheduler("minrtt"), H.Scenario.preset(["4g"]), 0)
    with pytest.raises(ValueError):
        H.ExperimentConfig(repetitions=0)
    with pytest.raises(ValueError):
        H.ExperimentConfig(transfer_size=0)


def test_result_tables_shape_and_cdf():
    t = H.result_tables(res(1.5, 1.2, 1.9), score=1.1)
    rows = list(csv.reader(io.StringIO(t["results.csv"])))
    assert rows[0] == ["repetition", "download_time_s"]
    assert len(rows) == 1 + 3 + 1 and rows[-1][0] == "summary"
    assert "relative_score=1.1" in rows[-1][1]
    cdf = np.array([[float(v) for v in r] for r in list(csv.reader(io.StringIO(t["cdf.csv"])))[1:]])
    assert (np.diff(cdf[:, 0]) >= 0).all() and (np.diff(cdf[:, 1]) >= 0).all()


def test_emit_and_replay_identical(tmp_path):
    cfg = H.ExperimentConfig(scheduler="blest", repetitions=3, transfer_size=SMALL, seed=9)
    r, score = H.run_experiment(cfg)
    files = H.emit_results(r, tmp_path, cfg, score)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["seed"] == 9 and "version" in man
    again = H.replay(files["manifest.json"])
    for name, text in again.items():
        assert (tmp_path / name).read_text() == text


def test_emit_reports_unwritable_path(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write"):
        H.emit_results(res(1.0), blocker / "sub")


def test_replay_requires_config(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"config": None}))
    with pytest.raises(ValueError):
        H.replay(p)


def test_parse_config():
    cfg = H.parse_config("scenario = 5g, wlan  # two paths\nscheduler = blest\n"
                         "param.delta = 2\nrepetitions = 7\nreference = yes\nscale = 0.5\n")
    assert cfg.scenario == ("5g", "wlan") and cfg.scheduler == "blest"
    assert cfg.params == {"delta": 2.0} and cfg.repetitions == 7
    assert cfg.reference is True and cfg.scale == 0.5
    assert H.ExperimentConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text", ["repetitions = x", "colour = red", "repetitions = 0",
                                  "scenario = ,", "no equals sign"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        H.parse_config(text)


def test_make_scheduler_errors():
    with pytest.raises(ValueError):
        H.make_scheduler("nope")
    with pytest.raises(ValueError):
        H.make_scheduler("dqn-off")


def test_envelope_from_presets_covers_table_range():
    env = H.Envelope.from_presets()
    assert env == H.TABLE_ENVELOPE


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30), paths=st.integers(1, 3))
def test_sampled_conditions_stay_in_envelope(seed, n, paths):
    conds = H.sample_conditions(n, seed, paths)
    assert len(conds) == n
    for c in conds:
        assert len(c) == paths
        assert all(H.TABLE_ENVELOPE.contains(m) for m in c)
    assert conds == H.sample_conditions(n, seed, paths)


def test_cycling_scenario_switches_conditions():
    a = (PathModel(10e6, 20, 5, 0.001), PathModel(20e6, 25, 6, 0.002))
    b = (PathModel(30e6, 22, 7, 0.003), PathModel(40e6, 27, 8, 0.004))
    sc = H.cycling_scenario([a, b], 2.0, cycles=2)
    assert sc.models_at(1.0) == list(a)
    assert sc.models_at(3.0) == list(b)
    assert sc.models_at(5.0) == list(a)
    with pytest.raises(ValueError):
        H.cycling_scenario([a], 0.0)


def test_dqn_off_self_reference_is_flat():
    sc = H.Scenario.preset(["4g", "wlan"])
    pol = H.train_dqn_off(sc, 0, transfers=3, size=SMALL)
    ref = H.run_bulk(H.dqn_off(pol, 2), sc, 3, seed=0 * 1000 + 52, size=SMALL)
    curve = H.run_convergence(lambda run: H.dqn_off(pol, 2, run), sc, ref, runs=2,
                              checkpoints=(64, 128, 256), eval_reps=3, size=SMALL)
    np.testing.assert_array_equal(curve.scores, 1.0)
    assert curve.packets_to(0.9) == 64


def test_packets_to_threshold():
    c = H.ConvergenceCurve("x", (64, 128, 256), np.array([[0.5, 0.95, 1.0], [0.6, 0.7, 1.0]]))
    assert c.packets_to(0.9) == 256
    assert c.packets_to(1.01) == float("inf")


def test_stress_long_interval_matches_static_score():
    models = H.sample_conditions(1, 3)[0]
    sc = H.static_scenario(models)
    out = H.run_stress(lambda: H.make_scheduler("minrtt"), lambda s: H.make_scheduler("rr"),
                       [20.0], [models], seed=1, min_horizon=20.0, size=SMALL)
    assert out[0].transfers >= 1
    static = H.relative_score(
        H.RunResult([d for _, d in H.back_to_back(H.make_scheduler("minrtt"), sc, 20.0, 1, SMALL)]),
        H.RunResult([d for _, d in H.back_to_back(H.make_scheduler("rr"), sc, 20.0, 1, SMALL)]))
    assert out[0].score == pytest.approx(static, rel=0.02)
    with pytest.raises(ValueError):
        H.run_stress(lambda: None, lambda s: None, [0.0], [models])


def test_param_sweep_axes():
    k = H.run_param_sweep("k", [0, 16], seed=0, trials=2)
    assert set(k) == {0, 16} and k[16] > k[0]
    with pytest.raises(ValueError):
        H.run_param_sweep("k", [-1])
    with pytest.raises(ValueError):
        H.run_param_sweep("subranges", [0])
    with pytest.raises(ValueError):
        H.run_param_sweep("bogus")
