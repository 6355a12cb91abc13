import math

import numpy as np
import pytest

from trendcast import lstm
from trendcast.dataset import learnable_task
from trendcast.errors import DegenerateVariance, LengthMismatch, ShapeMismatch

from conftest import max_rel_err, numeric_grad


def sigmoid(x):
    return 1 / (1 + math.exp(-x))


def tiny(dropout=0.0, seed=0):
    return lstm.init_params(2, 3, seed=seed, dropout=dropout)


def batch(B=5, T=4, m=2, seed=1):
    return np.random.default_rng(seed).normal(size=(B, T, m))


# ---------------------------------------------------------------- forward

def test_zero_weights_output_dense_bias():
    p = tiny().zeros_like()
    p.dense_b[0] = 0.37
    pred, _ = lstm.lstm_forward(p, batch())
    np.testing.assert_array_equal(pred, 0.37)


def test_one_step_hand_oracle():
    rng = np.random.default_rng(3)
    p = lstm.init_params(1, 1, seed=4, dropout=0.0)
    for a in p.arrays():
        a[...] = rng.normal(size=a.shape)
    x = 0.7

    def cell(W, b, inp):
        # gates (i, f, g, o) from zero state: recurrent term vanishes
        i, f, g, o = (W[k, 0] * inp + b[k] for k in range(4))
        c = sigmoid(i) * math.tanh(g)
        return sigmoid(o) * math.tanh(c)

    h1 = cell(p.layer1.W, p.layer1.b, x)
    h2 = cell(p.layer2.W, p.layer2.b, h1)
    expected = p.dense_W[0, 0] * h2 + p.dense_b[0]
    pred, _ = lstm.lstm_forward(p, np.array([[[x]]]))
    assert pred[0] == pytest.approx(expected, abs=1e-14)


def test_inference_deterministic_and_batch_invariant():
    p = tiny(dropout=0.5)
    x = batch(B=9)
    a, _ = lstm.lstm_forward(p, x, train_mode=False)
    b, _ = lstm.lstm_forward(p, x, train_mode=False)
    np.testing.assert_array_equal(a, b)
    one_by_one = np.concatenate([lstm.lstm_forward(p, x[i:i + 1])[0] for i in range(9)])
    np.testing.assert_allclose(one_by_one, a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lstm.predict(p, x, batch_size=4), a, rtol=0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeMismatch):
        lstm.lstm_forward(tiny(), np.zeros((2, 3, 5)))


def test_dropout_expectation_at_dropout_layer():
    p = tiny(dropout=0.3)
    x = batch(B=2, T=3)
    _, clean = lstm.lstm_forward(p, x, train_mode=False)
    ref = clean["dropped"]
    rng = np.random.default_rng(0)
    draws = np.stack([lstm.lstm_forward(p, x, True, rng)[1]["dropped"] for _ in range(10000)])
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(mean - ref) <= 3 * se + 1e-15)


# ---------------------------------------------------------------- losses

def test_mse():
    assert lstm.loss_mse(np.array([1.0, 1.0]), np.array([0.0, 2.0])) == 1.0
    a = np.random.default_rng(0).normal(size=100)
    assert lstm.loss_mse(a, a) == 0
    b = np.random.default_rng(1).normal(size=100)
    oracle = sum((x - y) ** 2 for x, y in zip(a, b)) / 100
    assert lstm.loss_mse(a, b) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(LengthMismatch):
        lstm.loss_mse(a, b[:5])


def test_sharpe_oracle_and_degenerate():
    rng = np.random.default_rng(2)
    pred, r = rng.normal(size=100), rng.normal(0, 0.01, 100)
    w = [math.tanh(2.0 * x) for x in pred]
    pnl = [a * b for a, b in zip(w, r)]
    mu = sum(pnl) / 100
    sd = math.sqrt(sum((x - mu) ** 2 for x in pnl) / 100)
    assert lstm.loss_sharpe(pred, r, 2.0) == pytest.approx(-mu / sd, abs=1e-12)
    with pytest.raises(DegenerateVariance):
        lstm.loss_sharpe(np.ones(10), np.full(10, 0.01))
    with pytest.raises(DegenerateVariance):
        lstm.loss_sharpe(np.zeros(10), r[:10])


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("kind", ["mse", "sharpe"])
@pytest.mark.parametrize("dropout", [0.0, 0.4])
def test_gradient_check(kind, dropout):
    p = tiny(dropout=dropout, seed=7)
    x = batch()
    rng = np.random.default_rng(11)
    y = rng.normal(size=5) if kind == "mse" else rng.normal(0, 0.02, 5)

    def f():
        # a fresh rng with a fixed seed replays the same dropout mask
        pred, _ = lstm.lstm_forward(p, x, True, np.random.default_rng(5))
        return lstm.loss_and_grad(kind, pred, y, 2.0)[0]

    _, cache = lstm.lstm_forward(p, x, True, np.random.default_rng(5))
    _, grads = lstm.backward(p, cache, kind, y, 2.0)
    assert max_rel_err(grads.arrays(), numeric_grad(f, p)) < 1e-4


def test_zero_upstream_error_zero_gradient():
    p = tiny()
    x = batch()
    pred, cache = lstm.lstm_forward(p, x, True)
    _, grads = lstm.backward(p, cache, "mse", pred.copy())
    assert max(np.abs(a).max() for a in grads.arrays()) <= 1e-12


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient():
    p = tiny()
    before = p.copy()
    st = lstm.AdamState.zeros(p)
    lstm.adam_step(p, p.zeros_like(), st, 1e-3)
    np.testing.assert_array_equal(p.flat(), before.flat())
    # existing moments decay geometrically under a zero gradient
    st.m[0][...] = 1.0
    st.v[0][...] = 1.0
    lstm.adam_step(p, p.zeros_like(), st, 1e-3)
    assert np.all(st.m[0] == 0.9) and np.all(st.v[0] == 0.999)


def test_adam_first_step_and_fixed_point():
    p = tiny()
    g = p.zeros_like()
    for a in g.arrays():
        a[...] = np.random.default_rng(0).choice([-3.0, 0.5, 2.0], size=a.shape)
    st = lstm.AdamState.zeros(p)
    before = p.flat().copy()
    lstm.adam_step(p, g, st, 1e-3)
    np.testing.assert_allclose(p.flat() - before, -1e-3 * np.sign(g.flat()), atol=1e-6 * 1e-3 + 1e-12)
    for _ in range(998):
        lstm.adam_step(p, g, st, 1e-3)
    prev = p.flat().copy()
    lstm.adam_step(p, g, st, 1e-3)
    step = p.flat() - prev
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=0.05)
    assert np.all(np.sign(step) == -np.sign(g.flat()))


# ---------------------------------------------------------------- init / monitor

def test_init_params():
    a, b = lstm.init_params(4, 8, seed=3), lstm.init_params(4, 8, seed=3)
    assert a.checksum() == b.checksum()
    assert a.checksum() != lstm.init_params(4, 8, seed=4).checksum()
    for layer, d in ((a.layer1, 4), (a.layer2, 8)):
        h = 8
        assert np.all(layer.b[h:2 * h] == 1.0) and np.all(np.delete(layer.b, np.s_[h:2 * h]) == 0)
        assert np.abs(layer.W).max() <= math.sqrt(6 / (d + 4 * h))
        assert np.abs(layer.U).max() <= math.sqrt(6 / (h + 4 * h))


@pytest.mark.parametrize("k", [1, 4, 13])
def test_plateau_monitor_stops_at_k_plus_patience(k):
    mon = lstm.PlateauMonitor(patience=10, lr_patience=5)
    losses = [10.0 - e for e in range(1, k + 1)] + [10.0 + e for e in range(1, 50)]
    mults = []
    for epoch, v in enumerate(losses, start=1):
        _, stop, m = mon.update(epoch, v)
        mults.append(m)
        if stop:
            break
    assert epoch == k + 10 and mon.best_epoch == k
    assert mults.count(0.5) == 2  # plateau halvings at k+5 and k+10


def test_plateau_monitor_disabled_early_stopping():
    mon = lstm.PlateauMonitor(patience=2, early_stopping=False)
    mon.update(1, 1.0)
    assert not any(mon.update(e, 2.0)[1] for e in range(2, 30))


def test_sharpe_config_guard():
    with pytest.raises(ValueError):
        lstm.TrainConfig(loss="sharpe", batch_size=16)


# ---------------------------------------------------------------- training

def small_train_cfg(**kw):
    base = dict(max_epochs=15, hidden_size=6, batch_size=32, seed=3, dropout=0.1)
    base.update(kw)
    return lstm.TrainConfig(**base)


def test_train_deterministic_and_best_epoch():
    ss = learnable_task(n=200, window=8, seed=1)
    p1, r1 = lstm.train(ss, small_train_cfg())
    p2, r2 = lstm.train(ss, small_train_cfg())
    assert r1 == r2 and p1.checksum() == p2.checksum()
    vals = [e["val_loss"] for e in r1.epoch_log]
    assert r1.best_epoch == int(np.argmin(vals)) + 1
    # restored weights reproduce the minimum validation loss
    va = ss.indices("validation")
    best_val = lstm.loss_mse(lstm.predict(p1, ss.windows[va]), ss.targets[va])
    assert best_val == pytest.approx(min(vals), rel=1e-12)


def test_train_sharpe_runs():
    ss = learnable_task(n=200, window=8, seed=2)
    _, rep = lstm.train(ss, small_train_cfg(loss="sharpe", max_epochs=5))
    assert len(rep.epoch_log) == 5 and all(np.isfinite(e["val_loss"]) for e in rep.epoch_log)


def test_train_learns_signal():
    ss = learnable_task(n=400, window=10, seed=0)
    _, rep = lstm.train(ss, small_train_cfg(max_epochs=60, hidden_size=16, learning_rate=5e-3))
    va = ss.indices("validation")
    assert rep.final["val_rmse"] < 0.5 * ss.targets[va].std()


def test_checkpoint_roundtrip(tmp_path):
    p = lstm.init_params(3, 5, seed=9)
    cfg = small_train_cfg()
    lstm.save_checkpoint(tmp_path / "m.ckpt", p, cfg, epoch=7)
    q, header = lstm.load_checkpoint(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(q.flat(), p.flat())
    assert header["epoch"] == 7 and header["seed"] == 3 and q.dropout == p.dropout
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(lstm.CHECKPOINT_MAGIC)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        lstm.load_checkpoint(tmp_path / "bad.ckpt")
