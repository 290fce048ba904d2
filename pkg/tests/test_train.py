import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftguard import train
from driftguard.errors import DegeneratePrior, EmptyDataset, NotOneHot, ShapeMismatch, ZeroClassCount
from driftguard.nn import SleepNet, softmax


def cross_entropy(z, y):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(logp * y).sum(axis=1).mean())


def test_focal_half_probability_example():
    # two classes tied at logit 0 and the rest far below -> p_true = 0.5
    z = np.array([[0.0, 0.0, -800.0, -800.0, -800.0]])
    loss, _ = train.focal_loss(z, train.one_hot([0]), train.FocalConfig(2.0))
    assert loss == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert loss == pytest.approx(0.173287, abs=1e-6)


def test_focal_zero_when_certain():
    z = np.array([[0.0, -800.0, -800.0, -800.0, -800.0]])
    loss, grad = train.focal_loss(z, train.one_hot([0]), train.FocalConfig(2.0))
    assert loss == 0.0
    assert np.all(grad == 0)


@given(seed=st.integers(0, 2**31), n=st.integers(1, 20))
@settings(max_examples=50, deadline=None)
def test_focal_gamma0_is_cross_entropy(seed, n):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3, size=(n, 5))
    y = train.one_hot(rng.integers(0, 5, n))
    loss, grad = train.focal_loss(z, y, train.FocalConfig(0.0))
    assert loss == pytest.approx(cross_entropy(z, y), abs=1e-12)
    np.testing.assert_allclose(grad, (softmax(z, axis=1) - y) / n, atol=1e-12)
    assert loss >= 0


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 3.0])
def test_focal_gradient_finite_differences(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    z = rng.normal(scale=2, size=(6, 5))
    y = train.one_hot(rng.integers(0, 5, 6))
    cfg = train.FocalConfig(gamma, rng.uniform(0.5, 2, 5))
    _, g = train.focal_loss(z, y, cfg)
    num = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += 1e-4
        zm[i] -= 1e-4
        num[i] = (train.focal_loss(zp, y, cfg)[0] - train.focal_loss(zm, y, cfg)[0]) / 2e-4
    assert np.linalg.norm(num - g) / np.linalg.norm(num) < 1e-4


def test_focal_rejects_non_one_hot():
    with pytest.raises(NotOneHot):
        train.focal_loss(np.zeros((2, 5)), np.full((2, 5), 0.2), train.FocalConfig())
    with pytest.raises(NotOneHot):
        train.focal_loss(np.zeros((2, 5)), np.zeros((2, 4)), train.FocalConfig())


def test_class_weights_examples():
    np.testing.assert_allclose(train.class_weights([7] * 5), 1.0, atol=1e-15)
    np.testing.assert_allclose(train.class_weights([100, 50, 100, 100, 100]), [5 / 6, 10 / 6, 5 / 6, 5 / 6, 5 / 6], rtol=1e-12)
    with pytest.raises(ZeroClassCount):
        train.class_weights([1, 0, 1, 1, 1])


@given(counts=st.lists(st.integers(1, 10**6), min_size=5, max_size=5))
def test_class_weights_mean_one(counts):
    assert abs(train.class_weights(counts).mean() - 1) <= 1e-12


def test_prior_init_examples():
    b = train.prior_init([0.2] * 5)
    assert np.all(b == b[0])
    pri = np.array([0.1, 0.05, 0.45, 0.2, 0.2])
    np.testing.assert_allclose(softmax(train.prior_init(pri)), pri, atol=1e-12)
    with pytest.raises(DegeneratePrior):
        train.prior_init([0.0, 0.25, 0.25, 0.25, 0.25])


def test_prior_init_loss_matches_prior_entropy():
    pri = np.array([0.1, 0.05, 0.45, 0.2, 0.2])
    m = SleepNet.initialized(seed=0)
    m.params["fc.b"][:] = train.prior_init(pri)
    m.params["fc.w"][:] = 0.0
    x = np.random.default_rng(0).normal(size=(4, 3000))
    logits = m.forward(x, "eval").logits.astype(np.float64)
    # expected cross-entropy under prior-distributed labels
    p = softmax(logits, axis=1)
    ce = float(-(pri * np.log(p[0])).sum())
    assert ce == pytest.approx(-(pri * np.log(pri)).sum(), abs=1e-6)


def test_adam_zero_gradient_is_fixed_point():
    opt = train.OptimState(warmup_steps=3)
    params = {"w": np.array([1.5, -2.0])}
    for _ in range(10):
        train.adam_step(opt, params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], [1.5, -2.0])


def test_adam_first_step_is_signlike():
    opt = train.OptimState(base_lr=1e-3, warmup_steps=1)
    params = {"w": np.array([0.0])}
    train.adam_step(opt, params, {"w": np.array([1.0])})
    assert params["w"][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_against_reference_loop():
    rng = np.random.default_rng(1)
    grads = rng.normal(size=(6, 3))
    opt = train.OptimState(base_lr=0.01)
    params = {"w": np.zeros(3)}
    w, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        train.adam_step(opt, params, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], w, rtol=1e-12)


def test_warmup_schedule():
    opt = train.OptimState(base_lr=1e-3, warmup_steps=10)
    assert opt.lr(5) == pytest.approx(5e-4)
    assert opt.lr(10) == opt.lr(50) == 1e-3


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        train.adam_step(train.OptimState(), {"w": np.zeros(3)}, {"w": np.zeros(2)})


def test_augment_disabled_is_identity():
    x = np.random.default_rng(0).normal(size=3000)
    cfg = train.AugmentConfig(p_jitter=0, p_scale=0, p_mask=0)
    assert np.array_equal(train.augment(x, np.random.default_rng(1), cfg), x)


def test_augment_scale_only_scales_rms():
    x = np.random.default_rng(0).normal(size=3000)
    cfg = train.AugmentConfig(p_jitter=0, p_scale=1.0, p_mask=0)
    rng = np.random.default_rng(5)
    s = np.random.default_rng(5)
    s.random()
    factor = s.uniform(0.8, 1.2)
    out = train.augment(x, rng, cfg)
    rms = lambda a: np.sqrt(np.mean(a**2))
    assert rms(out) == pytest.approx(factor * rms(x), abs=1e-9)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_augment_mask_only_one_short_zero_run(seed):
    x = np.random.default_rng(seed).uniform(1, 2, size=3000)
    out = train.augment(x, np.random.default_rng(seed), train.AugmentConfig(p_jitter=0, p_scale=0, p_mask=1.0))
    zero = np.concatenate([[0], (out == 0).astype(int), [0]])
    starts = np.flatnonzero(np.diff(zero) == 1)
    ends = np.flatnonzero(np.diff(zero) == -1)
    assert len(starts) == 1
    assert 1 <= ends[0] - starts[0] <= 300


@given(seed=st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_augment_preserves_length(seed):
    x = np.random.default_rng(seed).normal(size=3000)
    assert train.augment(x, np.random.default_rng(seed)).shape == (3000,)


def toy_dataset(n_per_class=24, seed=0):
    """Wake-like 10 Hz versus deep-sleep-like 1 Hz epochs, trivially separable."""
    rng = np.random.default_rng(seed)
    t = np.arange(3000) / 100.0
    xs, ys = [], []
    for label, f in ((0, 10.0), (3, 1.0)):
        for _ in range(n_per_class):
            xs.append(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) + 0.1 * rng.normal(size=3000))
            ys.append(label)
    return train.SourceDataset(np.array(xs, dtype=np.float32), ys, ["toy"] * len(ys))


@pytest.mark.slow
def test_separable_toy_reaches_99_percent():
    data = toy_dataset()
    cfg = train.TrainConfig(epochs=20, warmup_epochs=1, batch_size=16, seed=0)
    res = train.train_source(SleepNet.initialized(seed=0), data, cfg)
    pred, _ = train.predict_labels(res.model, data.x)
    assert np.mean(pred == data.y) >= 0.99


def test_training_is_deterministic():
    data = toy_dataset(8)
    cfg = train.TrainConfig(epochs=2, warmup_epochs=1, batch_size=8, seed=3)
    a = train.train_source(SleepNet.initialized(seed=0), data, cfg)
    b = train.train_source(SleepNet.initialized(seed=0), data, cfg)
    assert [e["train_loss"] for e in a.log] == [e["train_loss"] for e in b.log]
    assert a.model.digest(include_buffers=True) == b.model.digest(include_buffers=True)


@given(n=st.integers(1, 30), frac=st.floats(0.0, 0.9), seed=st.integers(0, 100))
def test_split_is_subject_disjoint(n, frac, seed):
    subs = [f"s{i}" for i in range(n)]
    tr, va = train.split_subjects(np.repeat(subs, 3), train.TrainConfig(val_fraction=frac, seed=seed))
    assert not set(tr) & set(va)
    assert sorted(tr + va) == sorted(subs)
    assert len(tr) >= 1


def test_explicit_validation_subjects():
    tr, va = train.split_subjects(["a", "b", "c"], train.TrainConfig(val_subjects=["b"]))
    assert tr == ["a", "c"] and va == ["b"]


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train.train_source(SleepNet.initialized(), train.SourceDataset(np.zeros((0, 3000)), [], []))
