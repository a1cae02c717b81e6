import json

import numpy as np
import pytest

from gatel0rd import tensor as T
from gatel0rd.analysis import (Confusion, MetricsReport, dims_changed, evaluate, event_steps,
                               export_latent_trace, gate_open_rate, gating_classification, nstep_error,
                               read_latent_trace, reappearance_error, rollout, trace_columns)
from gatel0rd.envs import generate_dataset, to_arrays
from gatel0rd.model import GateTrace

from conftest import small_model


def _moving(np_rng, B=4, Tn=12):
    start = np_rng.uniform(-0.5, 0.5, (B, 1, 2))
    vel = np_rng.uniform(-0.05, 0.05, (B, 1, 2))
    return start + vel * np.arange(Tn)[None, :, None]


def _zero_output(model):
    for w, b in model.f_post.layers:
        w.data[:] = 0.0
        b.data[:] = 0.0
    return model


def test_exact_delta_model_has_zero_error(np_rng):
    obs = _moving(np_rng)
    model = small_model()
    w = model.config.warmup
    deltas = (obs[:, w:] - obs[:, w - 1:-1]) / model.config.residual_scale
    calls = iter(range(obs.shape[1] - w))
    model.f_post = lambda y: T.tensor(deltas[:, next(calls)])
    assert nstep_error(model, obs)["mean"] == pytest.approx(0.0, abs=1e-24)


def test_zero_output_model_error_is_displacement(np_rng):
    obs = _moving(np_rng)
    model = _zero_output(small_model())
    w = model.config.warmup
    expected = ((obs[:, w:] - obs[:, w - 1:w]) ** 2).mean(axis=(1, 2))
    out = nstep_error(model, obs)
    assert np.allclose(out["per_episode"], expected, rtol=1e-12)
    assert out["mean"] == pytest.approx(expected.mean(), rel=1e-12)
    assert out["steps"] == obs.shape[1] - w
    assert nstep_error(model, obs)["mean"] == out["mean"]


def test_nstep_error_checks():
    model = small_model()
    with pytest.raises(ValueError):
        nstep_error(model, np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        nstep_error(model, np.zeros((2, 6, 2)), warmup=1)


def _trace(opened):
    opened = np.asarray(opened, dtype=bool)
    B, N, H = opened.shape
    return GateTrace(h=np.zeros((B, N + 1, H)), pre=np.zeros((B, N, H)), gate=opened * 0.5, opened=opened)


def test_gate_open_rate_examples():
    assert gate_open_rate(_trace(np.zeros((2, 10, 8)))) == 0.0
    one = np.zeros((2, 10, 8))
    one[..., 3] = 1
    assert gate_open_rate(_trace(one)) == 0.125
    with pytest.warns(RuntimeWarning):
        assert gate_open_rate(GateTrace(h=np.zeros((1, 3, 4)))) == 1.0


def test_dims_changed_examples():
    assert dims_changed(_trace(np.zeros((3, 5, 6)))) == 0.0
    each = np.zeros((3, 6, 6))
    each[:, np.arange(6), np.arange(6)] = 1
    assert dims_changed(_trace(each)) == 6.0
    with pytest.warns(RuntimeWarning):
        assert dims_changed(GateTrace(h=np.zeros((1, 3, 4)))) == 4.0


def test_classification_examples():
    N, w = 10, 1
    events = [[3], [7], []]
    exact = np.zeros((3, N, 2), dtype=bool)
    exact[0, 3, 0] = exact[1, 7, 1] = True
    c = gating_classification(exact, events, warmup=w)
    assert c.hit_rate == 1.0 and c.false_alarm_rate == 0.0
    never = gating_classification(np.zeros((3, N, 2), dtype=bool), events, warmup=w)
    assert never.hit_rate == 0.0 and never.correct_rejection_rate == 1.0
    assert never.hits + never.misses == 2
    assert never.false_alarms + never.correct_rejections == 3 * N - 2


def test_classification_warmup_offset_and_window():
    opened = np.zeros((1, 8, 1), dtype=bool)
    opened[0, 2, 0] = True
    # warm-up 2: input t is consumed at trace step t - 1
    assert gating_classification(opened, [[3]], warmup=2).hits == 1
    assert gating_classification(opened, [[4]], warmup=2).hits == 0
    assert gating_classification(opened, [[4]], warmup=2, window=1).hits == 1


def test_classification_input_checks():
    with pytest.raises(ValueError):
        gating_classification(np.zeros((2, 4), dtype=bool), [[1]], warmup=1)
    with pytest.raises(ValueError):
        gating_classification(GateTrace(h=np.zeros((1, 3, 2))), [[1]], warmup=1)
    with pytest.raises(ValueError):
        event_steps([{"control_onset": 3}, {}], "control_onset")
    assert event_steps([{"k": None}, {"k": 4}, {"k": [1, 2]}], "k") == [[], [4], [1, 2]]


def test_confusion_rates_sum_to_one():
    c = Confusion(hits=3, misses=1, false_alarms=2, correct_rejections=14)
    d = c.to_dict()
    assert d["hit_rate"] + d["miss_rate"] == 1.0
    assert d["false_alarm_rate"] + d["correct_rejection_rate"] == 1.0
    assert np.isnan(Confusion().hit_rate)


def test_evaluate_report(tmp_path):
    eps = generate_dataset("rrc", 12, seed=0)
    obs, act = to_arrays(eps)
    model = small_model(obs_dim=4, act_dim=2, warmup=1)
    rep = evaluate(model, obs, act, [e.meta for e in eps], "control_onset")
    assert isinstance(rep, MetricsReport)
    assert rep.steps == obs.shape[1] - 1
    assert rep.confusion["hits"] + rep.confusion["misses"] == 6
    rep.save(tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["nstep_mse"] == rep.nstep_mse
    baseline = evaluate(small_model(kind="gru", obs_dim=4, act_dim=2, warmup=1), obs, act,
                        [e.meta for e in eps], "control_onset")
    assert baseline.confusion is None and baseline.gate_open_rate == 1.0


def test_reappearance_error_on_shepherd():
    eps = generate_dataset("shepherd", 12, seed=0)
    obs, act = to_arrays(eps)
    steps = [e.meta["reappear_step"] for e in eps]
    model = small_model(obs_dim=7, act_dim=3, warmup=2)
    out = reappearance_error(model, obs, act, steps)
    assert out["count"] == sum(s is not None and s >= 2 for s in steps)
    pred, _ = rollout(model, obs, act, feed="teacher")
    i = next(k for k, s in enumerate(steps) if s is not None and s >= 2)
    assert out["per_episode"][0] == pytest.approx(abs(pred[i, steps[i] - 2, 3] - obs[i, steps[i], 3]))
    with pytest.raises(ValueError):
        reappearance_error(model, obs, act, [None] * len(steps))


def test_latent_trace_export(tmp_path, np_rng):
    model = small_model(H=3)
    obs = _moving(np_rng, B=1, Tn=9)
    res = model.forward(obs)
    path = tmp_path / "trace.csv"
    export_latent_trace(res.trace, res.predictions()[0], path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == trace_columns(3, 2)
    back = read_latent_trace(path)
    assert np.all(back["hrel"][0] == 0.0)
    assert np.array_equal(back["open_count"], (back["g"] > 0).sum(axis=1))
    assert np.array_equal(back["h"], res.trace.h[0])
    assert np.array_equal(back["g"][1:], res.trace.gate[0])
    assert np.array_equal(back["pred"][1:], res.predictions()[0])
    # dimensions that never opened keep hrel at zero
    never = ~np.logical_or.accumulate(back["g"] > 0, axis=0)
    assert np.all(back["hrel"][never] == 0.0)


def test_latent_trace_for_baseline_and_bad_path(tmp_path, np_rng):
    model = small_model(kind="lstm", H=3)
    res = model.forward(_moving(np_rng, B=1, Tn=6))
    export_latent_trace(res.trace, res.predictions(), tmp_path / "lstm.csv")
    back = read_latent_trace(tmp_path / "lstm.csv")
    assert np.all(back["g"][1:] == 1.0) and back["h"].shape == (5, 3)
    with pytest.raises(OSError):
        export_latent_trace(res.trace, res.predictions(), tmp_path / "missing" / "x.csv")
