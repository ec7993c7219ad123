import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momploc import classifier as clf
from momploc.errors import ConfigError


def blobs(n=1200, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = 3.0 * np.eye(3, 6)
    y = rng.integers(1, 4, n)
    x = centers[y - 1] + spread * rng.standard_normal((n, 6))
    return x, y


def test_forward_is_a_distribution(rng):
    m = clf.init_mlp(seed=3)
    z = rng.standard_normal((50, 6)) * 5
    p = clf.forward(m, z)
    assert p.shape == (50, 3)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(clf.forward(m, z[0]), p[0])


def test_zero_weights_give_uniform_output_and_lowest_class():
    m = clf.init_mlp(seed=0)
    m.weights = [np.zeros_like(w) for w in m.weights]
    z = np.random.default_rng(1).standard_normal((4, 6))
    np.testing.assert_allclose(clf.forward(m, z), 1 / 3, atol=1e-15)
    assert clf.classify(m, z[0]) == 1
    assert list(clf.classify(m, z)) == [1, 1, 1, 1]


def test_loss_example():
    g = np.array([0.0, 0.0, 1.0])
    gh = np.array([0.3, 0.2, 0.5])
    val = clf.weighted_ce_loss(g, gh, 3, 1, 0.2)
    assert val == pytest.approx(-np.exp(-0.4) * np.log(0.5), rel=1e-14)
    assert val == pytest.approx(0.4645, abs=2e-4)


def test_eta_zero_is_cross_entropy():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        c, ch = rng.integers(1, 4, 2)
        g = np.eye(3)[c - 1]
        gh = rng.dirichlet(np.ones(3))
        ce = -np.log(gh[c - 1])
        assert abs(clf.weighted_ce_loss(g, gh, int(c), int(ch), 0.0) - ce) <= 1e-12 * max(1.0, abs(ce))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 5.0), st.floats(1e-3, 0.999), st.integers(1, 3), st.integers(1, 3))
def test_weight_sign_property(eta, prob, c, ch):
    g_c, g_ch = np.eye(3)[c - 1], np.eye(3)[ch - 1]
    gh = np.array([prob, 0.0, 0.0])
    a = clf.weighted_ce_loss(g_c, np.roll(gh, c - 1), c, ch, eta)
    b = clf.weighted_ce_loss(g_ch, np.roll(gh, ch - 1), ch, c, eta)
    # swapping true and predicted class flips the sign of c - c_hat in the weight
    if c == ch:
        assert a == b
    elif c > ch:
        assert a < b
    else:
        assert a > b
    assert a / b == pytest.approx(np.exp(-2 * eta * (c - ch)), rel=1e-12)


def test_other_versus_los_ordering():
    # true=other predicted=LoS carries weight e^{-2 eta}, the reverse case e^{+2 eta}
    assert clf.order_weight(3, 1, 0.2) == pytest.approx(np.exp(-0.4))
    assert clf.order_weight(1, 3, 0.2) == pytest.approx(np.exp(0.4))


def _flat(ws, bs):
    return np.concatenate([a.ravel() for a in ws + bs])


def _loss_at(m, x, y, w):
    return clf.loss_and_grads(m, x, y, 0.2, sample_weight=w)[0]


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = clf.init_mlp((6, 5, 4, 3), seed=seed)
    for b in m.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((16, 6))
    y = rng.integers(1, 4, 16)
    w = rng.uniform(0.5, 1.5, 16)
    _, gw, gb, _ = clf.loss_and_grads(m, x, y, 0.2, sample_weight=w)
    analytic = _flat(gw, gb)
    params = m.weights + m.biases
    num, h = [], 1e-6
    for arr in params:
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            fp = _loss_at(m, x, y, w)
            arr[i] = old - h
            fm = _loss_at(m, x, y, w)
            arr[i] = old
            num.append((fp - fm) / (2 * h))
    num = np.array(num)
    assert np.linalg.norm(num - analytic) <= 1e-5 * np.linalg.norm(analytic)


def test_default_weights_follow_prediction():
    m = clf.init_mlp((6, 5, 3), seed=1)
    x = np.random.default_rng(2).standard_normal((20, 6))
    y = np.random.default_rng(3).integers(1, 4, 20)
    loss, *_, p = clf.loss_and_grads(m, x, y, 0.2)
    w = clf.order_weight(y, np.argmax(p, axis=1) + 1, 0.2)
    assert loss == pytest.approx(_loss_at(m, x, y, w), rel=1e-14)


def test_blobs_are_learned():
    x, y = blobs()
    cfg = clf.TrainConfig(max_epochs=200, patience=200)
    m, rep = clf.train(x, y, cfg, seed=0)
    assert rep.val_accuracy >= 0.99
    assert min(rep.val_class_accuracy) >= 0.97
    loss = np.array([r["train_loss"] for r in rep.epochs])
    ma = np.convolve(loss, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(ma) <= 1e-12)


def test_training_is_deterministic():
    x, y = blobs(400, seed=4, spread=1.0)
    cfg = clf.TrainConfig(max_epochs=20)
    m1, r1 = clf.train(x, y, cfg, seed=9)
    m2, r2 = clf.train(x, y, cfg, seed=9)
    for a, b in zip(m1.weights + m1.biases, m2.weights + m2.biases):
        assert np.array_equal(a, b)
    assert r1.epochs == r2.epochs
    m3, _ = clf.train(x, y, cfg, seed=10)
    assert not np.array_equal(m1.weights[0], m3.weights[0])


def test_split_is_three_to_one():
    tr, va = clf.split_indices(1000, 0.75, 0)
    assert len(tr) == 750 and len(va) == 250
    assert np.intersect1d(tr, va).size == 0
    assert np.array_equal(np.union1d(tr, va), np.arange(1000))


def test_missing_class_raises():
    x, y = blobs(100)
    y[y == 2] = 1
    with pytest.raises(ConfigError):
        clf.train(x, y)


def test_config_validation():
    with pytest.raises(ConfigError):
        clf.TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        clf.TrainConfig(eta=-0.1)
    with pytest.raises(ConfigError):
        clf.TrainConfig(train_fraction=1.0)
    with pytest.raises(ConfigError):
        clf.init_mlp((6, 4, 2))


def test_model_roundtrip(tmp_path):
    x, y = blobs(300, seed=5, spread=1.0)
    m, _ = clf.train(x, y, clf.TrainConfig(max_epochs=5), seed=1)
    path = tmp_path / "m.json"
    clf.save_model(path, m)
    m2 = clf.load_model(path)
    assert m2.dims == m.dims == [6, 64, 64, 3]
    assert np.array_equal(clf.forward(m, x), clf.forward(m2, x))
    d = json.loads(path.read_text())
    assert d["features"] == list(clf.FEATURES) and d["output"] == "softmax"
    d["version"] = 99
    with pytest.raises(ConfigError):
        clf.model_from_dict(d)


def test_report_csv():
    x, y = blobs(200, seed=6, spread=1.0)
    _, rep = clf.train(x, y, clf.TrainConfig(max_epochs=3), seed=0)
    buf = io.StringIO()
    rep.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("epoch,lr,train_loss")
    assert len(lines) == 4
