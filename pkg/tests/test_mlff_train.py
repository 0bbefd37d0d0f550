import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeradar.core import BScan, TimeAxis
from treeradar.gating import GateCurve
from treeradar.mlff.data import (LeakageError, PrepConfig, Sample, check_leakage, kfold_split,
                                 prepare_input, straighten)
from treeradar.mlff.io import (MLFW_MAGIC, WeightFormatError, decode_weights, encode_weights,
                               load_weights, save_weights)
from treeradar.mlff.metrics import ConfusionMatrix, metrics
from treeradar.mlff.net import MLFFNet, toy_config
from treeradar.mlff.optim import AdamState, adam_step
from treeradar.mlff.train import DivergenceError, TrainConfig, batches, predict, train


# --- Adam

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(new["w"], p["w"])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    new, st_ = adam_step(p, {"w": np.array([0.3, -7.0, 1e-3])}, AdamState(), lr=1e-2)
    assert np.allclose(new["w"] - p["w"], [-1e-2, 1e-2, -1e-2], rtol=1e-4)
    assert st_.step == 1


def test_adam_does_not_mutate_input():
    p = {"w": np.ones(3)}
    adam_step(p, {"w": np.ones(3)}, AdamState())
    assert np.array_equal(p["w"], np.ones(3))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState())


def test_adam_minimises_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    s = AdamState()
    for _ in range(2000):
        p, s = adam_step(p, {"w": 2 * p["w"]}, s, lr=0.05)
    assert np.all(np.abs(p["w"]) < 1e-2)


# --- metrics

def test_metrics_worked_example():
    m = metrics(ConfusionMatrix(((144, 0), (9, 135))))
    assert m.acc == pytest.approx(279 / 288)
    assert m.prec == pytest.approx((144 / 153 + 1) / 2)
    assert m.rec == pytest.approx((1 + 135 / 144) / 2)
    f_h = 2 * (144 / 153) / (144 / 153 + 1)
    f_d = 2 * (135 / 144) / (1 + 135 / 144)
    assert m.f1 == pytest.approx((f_h + f_d) / 2)
    assert not m.flags


def test_metrics_perfect():
    m = metrics(ConfusionMatrix(((7, 0), (0, 5))))
    assert (m.acc, m.prec, m.rec, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_never_predicted_class_flagged():
    m = metrics(ConfusionMatrix(((5, 0), (5, 0))))
    assert m.per_class["1"]["prec"] == 0.0 and m.flags
    assert m.acc == 0.5


def test_metrics_empty_and_invalid():
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix(((0, 0), (0, 0))))
    with pytest.raises(ValueError):
        ConfusionMatrix(((1, -1), (0, 0)))
    with pytest.raises(ValueError):
        ConfusionMatrix(((1, 2, 3), (0, 0, 0)))


@settings(max_examples=200)
@given(st.lists(st.integers(0, 50), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
def test_metrics_properties(v):
    cm = ConfusionMatrix(((v[0], v[1]), (v[2], v[3])))
    m = metrics(cm)
    for x in (m.acc, m.prec, m.rec, m.f1):
        assert 0.0 <= x <= 1.0
    assert m.acc == pytest.approx((v[0] + v[3]) / sum(v))
    for c in m.per_class.values():
        if c["prec"] + c["rec"] > 0:
            assert c["f1"] == pytest.approx(2 * c["prec"] * c["rec"] / (c["prec"] + c["rec"]))
    if v[0] + v[1] == v[2] + v[3] and v[0] + v[1] > 0:
        assert m.rec == pytest.approx(m.acc)


def test_confusion_from_labels_and_sum():
    a = ConfusionMatrix.from_labels([0, 0, 1, 1, 1], [0, 1, 1, 1, 0])
    assert a.counts == ((1, 1), (1, 2))
    assert (a + a).total == 10


# --- folds

def _samples(n_h, n_d, per_trunk=2):
    out = []
    for i in range(n_h + n_d):
        lab = int(i >= n_h)
        for r in range(per_trunk):
            out.append(Sample(np.zeros((1, 2, 2)), lab, f"t{i:02d}", {"rot": r}))
    return out


def test_kfold_balanced_20_trunks():
    s = _samples(10, 10)
    folds = kfold_split(s, 5, seed=0)
    assert sorted(i for f in folds for i in f) == list(range(len(s)))
    for f in folds:
        trunks = {s[i].trunk_id: s[i].label for i in f}
        assert sorted(trunks.values()) == [0, 0, 1, 1]
        assert len(f) == 8


@settings(max_examples=50)
@given(st.integers(0, 12), st.integers(0, 12), st.integers(2, 6), st.integers(0, 99))
def test_kfold_partition_properties(n_h, n_d, k, seed):
    s = _samples(n_h, n_d, per_trunk=1 + seed % 3)
    if n_h + n_d < k:
        with pytest.raises(ValueError):
            kfold_split(s, k, seed)
        return
    folds = kfold_split(s, k, seed)
    assert sorted(i for f in folds for i in f) == list(range(len(s)))
    owner = {}
    for fi, f in enumerate(folds):
        for i in f:
            assert owner.setdefault(s[i].trunk_id, fi) == fi
    sizes = [len({s[i].trunk_id for i in f}) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for lab in (0, 1):
        per = [sum(1 for t in {s[i].trunk_id for i in f if s[i].label == lab}) for f in folds]
        assert max(per) - min(per) <= 1
    assert folds == kfold_split(s, k, seed)


def test_kfold_seed_changes_split():
    s = _samples(10, 10, 1)
    assert kfold_split(s, 5, 0) != kfold_split(s, 5, 1)


def test_leakage_detected():
    s = _samples(3, 3)
    with pytest.raises(LeakageError):
        check_leakage(s, [0, 2], [1])
    check_leakage(s, [0, 1], [2, 3])


def test_mixed_label_trunk_rejected():
    s = _samples(2, 2)
    s[1] = Sample(s[1].input, 1, s[1].trunk_id)
    with pytest.raises(ValueError):
        kfold_split(s, 2)


# --- training

def test_batches_merge_singleton_tail():
    rng = np.random.default_rng(0)
    b = batches(65, 64, rng)
    assert len(b) == 1 and len(b[0]) == 65
    b = batches(129, 64, np.random.default_rng(0))
    assert [len(x) for x in b] == [64, 65]
    assert sorted(np.concatenate(b)) == list(range(129))
    assert [len(x) for x in batches(130, 64, rng)] == [64, 64, 2]


def _toy_data(n=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 10, 16, 16)) * 0.1
    x[y == 1, :, 6:10, 6:10] += 1.0
    return x, y


def test_zero_epochs_returns_initial_params():
    net = MLFFNet(toy_config())
    x, y = _toy_data()
    p0 = net.init(4)
    res = train(net, x, y, config=TrainConfig(epochs=0, seed=4), params=p0)
    assert all(np.array_equal(res.params[k], p0[k]) for k in p0)
    assert res.history == []


def test_training_is_reproducible_and_lowers_loss():
    net = MLFFNet(toy_config())
    x, y = _toy_data()
    cfg = TrainConfig(epochs=6, lr=3e-3, batch=4, seed=1)
    a = train(net, x, y, config=cfg)
    b = train(net, x, y, config=cfg)
    assert a.history == b.history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.history[-1]["train_loss"] < a.history[0]["train_loss"]
    assert {"epoch", "train_loss", "val_acc", "train_acc"} <= set(a.history[0])


def test_validation_history_and_best_epoch():
    net = MLFFNet(toy_config())
    x, y = _toy_data(10)
    res = train(net, x[:6], y[:6], x[6:], y[6:], TrainConfig(epochs=3, lr=1e-3, batch=4))
    accs = [h["val_acc"] for h in res.history]
    assert res.best_val_acc == max(accs)
    assert res.best_epoch == 1 + accs.index(max(accs))


def test_divergence_raises():
    net = MLFFNet(toy_config())
    x, y = _toy_data()
    p = net.init(0)
    p["fc.b"] = np.array([np.nan])
    with pytest.raises(DivergenceError):
        train(net, x, y, config=TrainConfig(epochs=1), params=p)


def test_tiny_training_set_rejected():
    net = MLFFNet(toy_config())
    x, y = _toy_data(2)
    with pytest.raises(ValueError):
        train(net, x[:1], y[:1])


def test_predict_threshold_tie_is_defective():
    net = MLFFNet(toy_config())
    p = net.init(0)
    p["fc.w"] = np.zeros_like(p["fc.w"])
    p["fc.b"] = np.zeros_like(p["fc.b"])
    label, prob = predict(net, p, np.ones((10, 16, 16)))
    assert prob == 0.5 and label == 1
    labels, probs = predict(net, p, np.ones((3, 10, 16, 16)))
    assert labels.tolist() == [1, 1, 1]


# --- weights IO

def test_mlfw_round_trip_and_determinism(tmp_path):
    net = MLFFNet(toy_config())
    p = net.init(0)
    blob = encode_weights(p)
    assert blob == encode_weights(dict(reversed(list(p.items()))))
    back = decode_weights(blob)
    assert set(back) == set(p)
    for k in p:
        assert back[k].shape == p[k].shape
        assert np.array_equal(back[k], p[k].astype(np.float32))
    save_weights(tmp_path / "w.mlfw", p)
    assert (tmp_path / "w.mlfw").read_bytes() == blob
    assert load_weights(tmp_path / "w.mlfw").keys() == p.keys()


def test_mlfw_layout():
    blob = encode_weights({"b": np.array([1.5, -2.0]), "a": np.zeros((1, 2))})
    expect = (MLFW_MAGIC + struct.pack("<I", 2)
              + struct.pack("<H", 1) + b"a" + struct.pack("<B", 2) + struct.pack("<2I", 1, 2)
              + np.zeros(2, "<f4").tobytes()
              + struct.pack("<H", 1) + b"b" + struct.pack("<B", 1) + struct.pack("<I", 2)
              + np.array([1.5, -2.0], "<f4").tobytes())
    assert blob == expect


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXXX" + b[5:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:7],
])
def test_mlfw_malformed(mangle):
    blob = encode_weights({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(WeightFormatError):
        decode_weights(mangle(blob))


# --- input preparation

def _scan(n=200, traces=12, seed=0):
    rng = np.random.default_rng(seed)
    axis = TimeAxis(0.03125e-9, n)
    return BScan(axis, rng.standard_normal((n, traces)))


def test_straighten_integer_gate_is_exact_shift():
    s = _scan()
    g = GateCurve(np.arange(12, dtype=float) * 3 + 5, None, 0.0, s.axis.dt)
    img, padded = straighten(s, g, crop=40 * s.axis.dt)
    assert not padded
    for j in range(12):
        start = 5 + 3 * j
        assert np.allclose(img[:, j], s.data[start:start + 40, j], atol=1e-12)


def test_straighten_flags_padding():
    s = _scan()
    g = GateCurve(np.full(12, 190.0), None, 0.0, s.axis.dt)
    img, padded = straighten(s, g, crop=40 * s.axis.dt)
    assert padded and not img[10:, :].any()


def test_prepare_input_channels():
    s = _scan()
    dt = s.axis.dt
    g = GateCurve(np.full(12, 30.0), None, 0.0, dt)
    cfg = PrepConfig(n_channels=4, w_step=2 * dt, crop=64 * dt, out_hw=(64, 12))
    x, meta = prepare_input(s, g, cfg)
    assert x.shape == (4, 64, 12)
    assert np.max(np.abs(x)) == pytest.approx(1.0)
    assert not meta["padded"]
    # channel n zeroes 2n more rows at the top of the straightened window
    for n in range(4):
        assert np.allclose(x[n, :2 * n, :], 0.0, atol=1e-12)
        assert np.allclose(x[n, 2 * n + 1:, :], x[0, 2 * n + 1:, :], atol=1e-12)
    # channel 0 is the base gate view
    base = s.data[30:94, :] / meta["scale"]
    assert np.allclose(x[0], base)


def test_prepare_input_all_zero():
    s = BScan(TimeAxis(1e-11, 300), np.zeros((300, 8)))
    g = GateCurve(np.full(8, 10.0), None, 0.0, 1e-11)
    x, meta = prepare_input(s, g, PrepConfig(n_channels=3, crop=2e-10, out_hw=(16, 16)))
    assert not x.any() and meta["scale"] == 0.0
