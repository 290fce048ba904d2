import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftguard import edfio, synth
from driftguard.errors import NotStochastic, OnsetOutOfRange
from driftguard.stages import StageLabel

BANDS = [(0.5, 2), (2, 4), (4, 8), (8, 12), (12, 15), (15, 30)]


def band_powers(epochs, fs=100.0):
    freqs = np.fft.rfftfreq(epochs.shape[1], 1 / fs)
    psd = np.abs(np.fft.rfft(epochs, axis=1)) ** 2
    return np.stack([psd[:, (freqs >= lo) & (freqs < hi)].sum(axis=1) for lo, hi in BANDS], axis=1)


def subjects(ids, n_epochs=200, seed=0):
    xs, ys = [], []
    for i in ids:
        rec = synth.gen_subject(f"s{i}", synth.SubjectConfig(n_epochs=n_epochs), np.random.default_rng([seed, i]))
        xs.append(rec.epochs())
        ys.append(rec.stages)
    return np.concatenate(xs), np.concatenate(ys)


def test_bayes_by_bandpower_separates_clean_stages():
    # Gaussian naive Bayes on log band powers, fitted and tested on disjoint subjects
    xtr, ytr = subjects(range(6))
    xte, yte = subjects(range(100, 104))
    ftr, fte = np.log(band_powers(xtr)), np.log(band_powers(xte))
    classes = np.unique(ytr)
    mu = np.array([ftr[ytr == c].mean(axis=0) for c in classes])
    var = np.array([ftr[ytr == c].var(axis=0) + 1e-6 for c in classes])
    prior = np.array([np.mean(ytr == c) for c in classes])
    ll = -0.5 * (((fte[:, None, :] - mu) ** 2) / var + np.log(var)).sum(axis=2) + np.log(prior)
    pred = classes[ll.argmax(axis=1)]
    assert len(classes) == 5
    assert np.mean(pred == yte) >= 0.90


def test_hypnogram_identity_transition():
    assert np.all(synth.gen_hypnogram(np.eye(5), 50, np.random.default_rng(0)) == StageLabel.W)


def test_hypnogram_uniform_frequencies():
    seq = synth.gen_hypnogram(np.full((5, 5), 0.2), 10**5, np.random.default_rng(1))
    freq = np.bincount(seq, minlength=5) / len(seq)
    assert np.all(np.abs(freq - 0.2) <= 0.01)


def test_hypnogram_is_deterministic_and_starts_awake():
    a = synth.gen_hypnogram(synth.DEFAULT_TRANSITION, 300, np.random.default_rng(5))
    b = synth.gen_hypnogram(synth.DEFAULT_TRANSITION, 300, np.random.default_rng(5))
    assert np.array_equal(a, b) and a[0] == StageLabel.W
    assert np.allclose(np.diag(synth.DEFAULT_TRANSITION), 0.85)


def test_hypnogram_rejects_non_stochastic():
    bad = np.full((5, 5), 0.2)
    bad[0, 0] = 0.3
    with pytest.raises(NotStochastic):
        synth.gen_hypnogram(bad, 10, np.random.default_rng(0))


@pytest.mark.parametrize("stage", list(StageLabel))
def test_epoch_length(stage):
    assert synth.gen_epoch(stage, rng=np.random.default_rng(0)).shape == (3000,)


def test_n3_is_delta_dominated():
    for seed in range(5):
        x = synth.gen_epoch(StageLabel.N3, rng=np.random.default_rng(seed))
        p = band_powers(x[None, :])[0]
        assert p[0] >= 10 * p[3]


def test_pure_tone_peaks_at_its_bin():
    model = synth.StageModel((synth.Component(10.0, 0.0, 20.0),), noise_uv=0.0)
    x = synth.gen_epoch(StageLabel.W, model, np.random.default_rng(0))
    freqs = np.fft.rfftfreq(3000, 1 / 100.0)
    assert freqs[np.argmax(np.abs(np.fft.rfft(x)))] == 10.0


def test_gain_unit_is_identity():
    x = np.random.default_rng(0).normal(size=9000)
    assert np.array_equal(synth.inject_drift(x, synth.DriftSpec("gain", 1.0, 1)), x)


def test_gain_three_triples_rms():
    x = np.random.default_rng(0).normal(size=3000 * 10)
    y = synth.inject_drift(x, synth.DriftSpec("gain", 3.0, 5))
    rms = lambda a: np.sqrt(np.mean(a**2))
    ratio = rms(y[15000:]) / rms(y[:15000])
    assert ratio == pytest.approx(3.0, rel=0.01)


def test_offset_shifts_mean():
    x = np.random.default_rng(0).normal(size=3000 * 4)
    y = synth.inject_drift(x, synth.DriftSpec("offset", 5.0, 2))
    assert np.array_equal(y[:6000], x[:6000])
    np.testing.assert_allclose(y[6000:] - x[6000:], 5.0, atol=1e-9)


def test_noise_rms_and_hum_frequency():
    x = np.zeros(3000 * 4)
    y = synth.inject_drift(x, synth.DriftSpec("noise", 20.0, 1), np.random.default_rng(0))
    assert np.all(y[:3000] == 0)
    assert np.sqrt(np.mean(y[3000:] ** 2)) == pytest.approx(20.0, rel=0.02)
    h = synth.inject_drift(np.zeros(3000), synth.DriftSpec("hum50", 10.0), fs=256.0)
    freqs = np.fft.rfftfreq(3000, 1 / 256.0)
    assert abs(freqs[np.argmax(np.abs(np.fft.rfft(h)))] - 50.0) < 0.1


def test_ramp_is_linear():
    w = synth.drift_weight(3000 * 6, synth.DriftSpec("gain", 2.0, 2, 2))
    assert w[6000 - 1] == 0 and w[6000] == 0 and w[9000] == 0.5 and w[12000] == 1 and w[-1] == 1


def test_onset_out_of_range():
    with pytest.raises(OnsetOutOfRange):
        synth.inject_drift(np.zeros(3000 * 2), synth.DriftSpec("gain", 2.0, 2))
    with pytest.raises(OnsetOutOfRange):
        synth.DriftSpec("gain", 2.0, -1)


@given(kind=st.sampled_from(list(synth.DriftKind)), onset=st.integers(0, 3), ramp=st.integers(0, 3), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_drift_commutes_with_epoching(kind, onset, ramp, seed):
    x = np.random.default_rng(seed).normal(size=3000 * 4)
    spec = synth.DriftSpec(kind, 2.5, onset, ramp)
    a = synth.inject_drift(x, spec, np.random.default_rng(seed)).reshape(4, 3000)
    b = synth.inject_drift(x.reshape(4, 3000), spec, np.random.default_rng(seed))
    assert np.array_equal(a, b)


def test_drift_spec_parsing():
    assert synth.DriftSpec.parse("gain:3.0@40") == synth.DriftSpec("gain", 3.0, 40, 0)
    assert synth.DriftSpec.parse("noise:20~5") == synth.DriftSpec("noise", 20.0, 0, 5)
    with pytest.raises(ValueError):
        synth.DriftSpec.parse("gain=3")


def test_subject_generation_is_deterministic():
    cfg = synth.SubjectConfig(n_epochs=20, drifts=[synth.DriftSpec("noise", 5.0, 3)])
    a = synth.gen_subject("a", cfg, np.random.default_rng(9))
    b = synth.gen_subject("a", cfg, np.random.default_rng(9))
    assert np.array_equal(a.signal, b.signal) and np.array_equal(a.stages, b.stages)


def test_stage_model_invariants():
    with pytest.raises(ValueError):
        synth.StageModel((synth.Component(55.0, 1.0, 1.0),))
    with pytest.raises(ValueError):
        synth.StageModel((synth.Component(5.0, 1.0, 0.0),))


def test_edf_emission_round_trips():
    rec = synth.gen_subject("s7", synth.SubjectConfig(n_epochs=12), np.random.default_rng(7))
    raw = synth.record_to_edf(rec)
    edf = edfio.read_edf(raw)
    meta = edf.meta.signals[0]
    assert np.array_equal(edf.digital["EEG Fpz-Cz"], meta.to_digital(rec.signal))
    stages = edfio.align_hypnogram(edf.annotations, edf.meta.n_records)
    assert [int(s) for s in stages] == rec.stages.tolist()
    # physical values within half a quantization step
    step = (meta.phys_max - meta.phys_min) / (meta.dig_max - meta.dig_min)
    assert np.max(np.abs(edfio.read_signal(raw, edf.meta, "EEG Fpz-Cz").data - rec.signal)) <= step / 2 + 1e-9
