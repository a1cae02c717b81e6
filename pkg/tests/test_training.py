import csv

import numpy as np
import pytest

from gatel0rd import tensor as T
from gatel0rd.model import ForwardResult, GateTrace
from gatel0rd.optim import ParamStore
from gatel0rd.rng import RngStream
from gatel0rd.training import (LOG_COLUMNS, LossReport, TrainConfig, TrainingDiverged, build_feed_mask,
                               gate_penalty, l0_gate_penalty, l1_l2_gate_penalty, read_log,
                               scheduled_sampling_prob, sequence_loss, train)

from conftest import small_model

K100 = 0.8185668046884278  # 0.998**100, 50-digit mpmath reference


def test_l0_counts_nonzero_entries():
    assert l0_gate_penalty(T.tensor(np.zeros((10, 8)))).item() == 0.0
    lam = T.tensor(np.tile([0.0, 0.3, 0.0001], (4, 1)))
    assert l0_gate_penalty(lam).item() == 8.0  # 2 per step, 4 steps
    with pytest.raises(ValueError):
        l0_gate_penalty(T.tensor(np.zeros((0, 3))))


def test_l0_gradient_through_retanh(np_rng):
    s = T.parameter(np_rng.normal(0, 1, (6, 5)))
    with T.Tape() as tape:
        pen = l0_gate_penalty(T.retanh(s))
    (g,) = tape.gradient(pen, [s])
    pos = s.data > 0
    assert np.all(g[~pos] == 0.0)
    # finite differences of retanh itself on the open branch
    eps = 1e-6
    fd = (np.tanh(s.data + eps) - np.tanh(s.data - eps)) / (2 * eps)
    assert np.allclose(g[pos], fd[pos], rtol=1e-8, atol=0)


def test_l1_l2_penalties():
    zero = T.tensor(np.zeros((3, 2)))
    assert l1_l2_gate_penalty(zero, "l1").item() == 0.0
    assert l1_l2_gate_penalty(zero, "l2").item() == 0.0
    half = T.tensor([[0.5]])
    assert l1_l2_gate_penalty(half, "l1").item() == 0.5
    assert l1_l2_gate_penalty(half, "l2").item() == 0.25
    rand = T.tensor(np.random.default_rng(0).uniform(0, 1, (20, 4)))
    assert l1_l2_gate_penalty(rand, "l2").item() <= l1_l2_gate_penalty(rand, "l1").item()
    with pytest.raises(ValueError):
        l1_l2_gate_penalty(half, "l3")


def test_l1_with_retanh_gate_warns():
    with pytest.warns(UserWarning):
        l1_l2_gate_penalty(T.tensor([[0.5]]), "l1", "retanh-stochastic")


def test_no_penalty_kinds():
    assert gate_penalty(None, "l0") is None
    assert gate_penalty(T.tensor([[1.0]]), "none") is None


def _result(pred, target, gates, B, N):
    opened = None if gates is None else gates.reshape(N, B, -1).transpose(1, 0, 2) > 0
    trace = GateTrace(h=np.zeros((B, N + 1, 2)), gate=None if gates is None else opened * 1.0, opened=opened)
    return ForwardResult(T.tensor(pred), target, None if gates is None else T.tensor(gates), trace, B, N)


def test_sequence_loss_perfect_predictions():
    y = np.random.default_rng(0).normal(size=(6, 3))
    gates = np.array([[0.0, 0.2]] * 6)
    res = _result(y, y, gates, B=2, N=3)
    _, rep0 = sequence_loss(res, 0.0)
    assert rep0.total == 0.0
    _, rep = sequence_loss(res, 0.5)
    # one open gate per step and sequence, 3 steps, batch mean
    assert rep.penalty == 3.0
    assert rep.total == pytest.approx(0.5 * 3.0)


def test_sequence_loss_decomposition(np_rng):
    pred = np_rng.normal(size=(8, 2))
    target = np_rng.normal(size=(8, 2))
    gates = np_rng.uniform(-1, 1, (8, 3)).clip(0)
    _, rep = sequence_loss(_result(pred, target, gates, B=2, N=4), 0.01)
    assert rep.task == pytest.approx(4 * np.mean((pred - target) ** 2), rel=1e-14)
    assert rep.penalty == pytest.approx((gates > 0).sum() / 2)
    assert rep.total == pytest.approx(rep.task + 0.01 * rep.penalty, rel=1e-14)


def test_sequence_loss_nan_names_sequence_and_step():
    pred = np.zeros((6, 2))
    pred[3, 0] = np.nan  # step 1, sequence 1 for batch 2
    with pytest.raises(FloatingPointError, match="sequence 1 at step 1"):
        sequence_loss(_result(pred, np.zeros((6, 2)), None, B=2, N=3), 0.0)


def test_lambda_zero_gradients_equal_pure_mse(np_rng):
    model = small_model(noise=0.0)
    obs = np_rng.uniform(-1, 1, (2, 6, 2))
    params = model.parameters()
    with T.Tape() as tape:
        res = model.forward(obs, train=True, rng=RngStream(0))
        loss, _ = sequence_loss(res, 0.0)
    g1 = tape.gradient(loss, params)
    with T.Tape() as tape:
        res = model.forward(obs, train=True, rng=RngStream(0))
        loss = T.scale(T.mse(res.pred, res.target), res.steps)
    g2 = tape.gradient(loss, params)
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


def test_schedule_values():
    assert scheduled_sampling_prob(0) == 1.0
    assert scheduled_sampling_prob(100) == pytest.approx(K100, abs=1e-15)
    assert round(scheduled_sampling_prob(100), 4) == 0.8186
    assert scheduled_sampling_prob(10_000, p_min=0.05) == 0.05
    ps = [scheduled_sampling_prob(i, 0.998, 0.02) for i in range(3000)]
    assert all(a >= b for a, b in zip(ps, ps[1:])) and min(ps) == 0.02
    with pytest.raises(ValueError):
        scheduled_sampling_prob(-1)


def test_feed_mask_endpoints_and_rate():
    rng = RngStream(0)
    assert build_feed_mask(20, 1.0, rng).all()
    m0 = build_feed_mask(20, 0.0, rng, warmup=2)
    assert m0[:2].all() and not m0[2:].any()
    big = build_feed_mask(100_001, 0.7, rng, warmup=1)
    assert abs(big[1:].mean() - 0.7) < 0.007
    assert build_feed_mask(10, 0.5, rng, batch=3).shape == (3, 10)
    with pytest.raises(ValueError):
        build_feed_mask(10, 1.5, rng)


def test_train_config_validation():
    for bad in ({"lam": -1}, {"p_min": 2}, {"k": 0}, {"clip": 0}, {"penalty": "l3"},
                {"batch_size": 0}, {"bptt_window": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    cfg = TrainConfig(lam=0.01, epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_lr_keeps_parameters(np_rng):
    model = small_model()
    before = ParamStore(model.named_parameters()).snapshot()
    obs = np_rng.uniform(-1, 1, (1, 6, 2))
    train(model, obs, None, TrainConfig(lr=0.0, epochs=1, lam=0.0))
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, before[name])


def test_constant_observations_learn_zero_delta():
    model = small_model(H=4, pre=(8,), init=(8,))
    obs = np.full((16, 8, 2), 0.3)
    hist = train(model, obs, None, TrainConfig(lam=0.0, lr=0.01, epochs=200, batch_size=16))
    assert hist[-1].task < 1e-6


def test_training_is_seed_deterministic(tmp_path, np_rng):
    obs = np_rng.uniform(-1, 1, (8, 6, 2))
    logs = []
    for run in range(2):
        model = small_model(seed=1)
        path = tmp_path / f"log{run}.csv"
        train(model, obs, None, TrainConfig(epochs=3, batch_size=4, seed=5), log_path=path,
              record_wall_time=False)
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]


def test_log_columns_and_schedule(tmp_path, np_rng):
    obs = np_rng.uniform(-1, 1, (4, 6, 2))
    path = tmp_path / "log.csv"
    hist = train(small_model(), obs, None, TrainConfig(epochs=4, batch_size=2), log_path=path)
    with open(path) as fh:
        assert tuple(next(csv.reader(fh))) == LOG_COLUMNS
    rows = read_log(path)
    assert len(rows) == 4 and len(hist) == 4
    assert [r["p_i"] for r in rows] == [0.998 ** i for i in range(4)]
    assert all(isinstance(h, LossReport) for h in hist)


def test_callbacks_called_each_epoch(np_rng):
    seen = []
    train(small_model(), np_rng.uniform(-1, 1, (4, 6, 2)), None, TrainConfig(epochs=3),
          callbacks=[lambda e, r, m: seen.append(e)])
    assert seen == [0, 1, 2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_last_good_parameters(np_rng):
    model = small_model()
    obs = np_rng.uniform(-1, 1, (4, 6, 2))

    def poison(epoch, report, m):
        m.f_post.layers[0][0].data[:] = np.inf

    with pytest.raises(TrainingDiverged):
        train(model, obs, None, TrainConfig(epochs=3), callbacks=[poison])
    # the poisoned values were set after epoch 0; the failing step was rolled back to them
    assert np.all(np.isinf(model.f_post.layers[0][0].data))

    model = small_model()
    good = ParamStore(model.named_parameters()).snapshot()
    bad = obs.copy()
    bad[0, 3, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(model, bad, None, TrainConfig(epochs=1, batch_size=4))
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, good[name])


def test_train_rejects_bad_data():
    with pytest.raises(ValueError):
        train(small_model(), np.zeros((0, 5, 2)), None, TrainConfig(epochs=1))
    with pytest.raises(T.ShapeError):
        train(small_model(obs_dim=2, act_dim=1), np.zeros((2, 5, 2)), np.zeros((3, 5, 1)),
              TrainConfig(epochs=1))


def test_truncated_bptt_trains():
    model = small_model()
    obs = np.random.default_rng(0).uniform(-1, 1, (4, 10, 2))
    hist = train(model, obs, None, TrainConfig(epochs=2, bptt_window=3))
    assert np.isfinite(hist[-1].total)
