import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftguard import dsp
from driftguard.edfio import SampleSeries
from driftguard.errors import InvalidBand, InvalidFrequency, IrrationalRatio


def _steady_amplitude(filt, freq, fs, seconds=20.0):
    t = np.arange(int(seconds * fs)) / fs
    y = dsp.apply(filt, np.sin(2 * np.pi * freq * t))
    return np.max(np.abs(y[len(y) // 2 :]))


def _difference_equation(sos, x):
    """Hand-unrolled direct-form-I biquad cascade, one sample at a time."""
    y = np.array(x, dtype=float)
    for b0, b1, b2, a0, a1, a2 in sos:
        out = np.zeros_like(y)
        for n in range(len(y)):
            acc = b0 * y[n]
            if n >= 1:
                acc += b1 * y[n - 1] - a1 * out[n - 1]
            if n >= 2:
                acc += b2 * y[n - 2] - a2 * out[n - 2]
            out[n] = acc / a0
        y = out
    return y


def test_bandpass_has_two_sections_and_blocks_dc():
    bp = dsp.design_bandpass(0.3, 45.0, 100.0)
    assert bp.sections.shape == (2, 6)
    y = dsp.apply(bp, np.ones(1000 * 10))
    assert abs(y[-1]) < 1e-3


def test_bandpass_passes_10hz():
    amp = _steady_amplitude(dsp.design_bandpass(0.3, 45.0, 100.0), 10.0, 100.0)
    assert 0.9 <= amp <= 1.0 + 1e-9


def test_bandpass_minus_3db_at_cutoffs():
    fs = 400.0
    for f in (0.3, 45.0):
        amp = _steady_amplitude(dsp.design_bandpass(0.3, 45.0, fs), f, fs, seconds=200.0)
        assert amp == pytest.approx(10 ** (-3 / 20), abs=0.02)


@pytest.mark.parametrize("lo, hi, fs", [(50, 40, 100), (0, 10, 100), (1, 50, 100), (-1, 10, 100)])
def test_invalid_band(lo, hi, fs):
    with pytest.raises(InvalidBand):
        dsp.design_bandpass(lo, hi, fs)


def test_notch_attenuates_50hz_and_passes_5hz():
    assert _steady_amplitude(dsp.design_notch(50.0, 200.0, 30.0), 50.0, 200.0) < 0.1
    assert 0.95 <= _steady_amplitude(dsp.design_notch(50.0, 200.0, 30.0), 5.0, 200.0) <= 1.05


def test_notch_above_nyquist_rejected():
    with pytest.raises(InvalidFrequency):
        dsp.design_notch(120.0, 200.0)


def test_identity_and_zero_input():
    x = np.random.default_rng(0).normal(size=257)
    assert np.array_equal(dsp.apply(dsp.FilterCascade.identity(), x), x)
    assert np.all(dsp.apply(dsp.design_bandpass(), np.zeros(300)) == 0)


def test_impulse_matches_difference_equation():
    sos = dsp.design_bandpass(0.5, 30.0, 100.0).sections
    impulse = np.zeros(5)
    impulse[0] = 1.0
    got = dsp.apply(dsp.FilterCascade(sos), impulse)
    np.testing.assert_allclose(got, _difference_equation(sos, impulse), rtol=1e-12, atol=1e-15)


@given(seed=st.integers(0, 2**32 - 1), cut=st.integers(1, 499))
@settings(max_examples=30, deadline=None)
def test_chunked_filtering_equals_one_pass(seed, cut):
    x = np.random.default_rng(seed).normal(size=500)
    whole = dsp.apply(dsp.design_bandpass(), x)
    f = dsp.design_bandpass()
    parts = np.concatenate([dsp.apply(f, x[:cut]), dsp.apply(f, x[cut:])])
    np.testing.assert_allclose(parts, whole, rtol=0, atol=1e-12)


def test_random_input_matches_difference_equation():
    x = np.random.default_rng(3).normal(size=400)
    f = dsp.design_notch(50.0, 256.0).then(dsp.design_bandpass(0.3, 45.0, 256.0))
    np.testing.assert_allclose(dsp.apply(f, x), _difference_equation(f.sections, x), rtol=1e-9, atol=1e-12)


def test_filters_are_bibo_stable():
    x = np.random.default_rng(1).uniform(-1, 1, 10**6)
    f = dsp.Preprocessor().build_filter(256.0)
    assert np.max(np.abs(dsp.apply(f, x))) <= 100


def test_unstable_section_rejected():
    with pytest.raises(ValueError):
        dsp.FilterCascade([[1, 0, 0, 1, -2.5, 1.5]])


def test_resample_identity():
    s = SampleSeries(np.arange(10.0), 100.0)
    out = dsp.resample(s, 100.0)
    assert np.array_equal(out.data, s.data) and out.fs == 100.0


def test_resample_sine_keeps_frequency_and_amplitude():
    fs_in, n = 200.0, 4000
    t = np.arange(n) / fs_in
    out = dsp.resample(SampleSeries(np.sin(2 * np.pi * 5 * t), fs_in), 100.0)
    spec = np.abs(np.fft.rfft(out.data[200:-200] * np.hanning(len(out.data) - 400)))
    freqs = np.fft.rfftfreq(len(out.data) - 400, 1 / 100.0)
    assert freqs[np.argmax(spec)] == pytest.approx(5.0, abs=0.1)
    core = out.data[200:-200]
    assert np.max(np.abs(core)) == pytest.approx(1.0, rel=0.02)


@pytest.mark.parametrize("n, fs_in", [(1000, 200.0), (999, 256.0), (37, 128.0), (301, 100.0), (12345, 500.0)])
def test_resample_length(n, fs_in):
    out = dsp.resample(SampleSeries(np.zeros(n), fs_in), 100.0)
    assert len(out) == round(n * 100.0 / fs_in)


def test_irrational_ratio():
    with pytest.raises(IrrationalRatio):
        dsp.resample(SampleSeries(np.zeros(10), np.pi * 100), 100.0)


def test_epoching_drops_partial_tail():
    assert dsp.epoch_samples(np.zeros(3000 * 4 + 2999)).shape == (4, 3000)
    assert dsp.epoch_samples(np.zeros(2999)).shape == (0, 3000)


def test_standardizer_closed_form():
    std = dsp.StreamingStandardizer()
    for v in [1.0, 2.0, 3.0, 4.0]:
        std.update([v])
    assert std.mean == 2.5
    assert std.variance == 1.25


def test_first_zero_epoch_maps_to_zeros():
    ep = dsp.standardize_stream(dsp.StreamingStandardizer(), np.zeros(3000))
    assert np.all(ep.samples == 0)


def test_standard_normal_stream_converges():
    rng = np.random.default_rng(7)
    std = dsp.StreamingStandardizer()
    chunks = [rng.normal(size=3000) for _ in range(50)]
    for c in chunks:
        dsp.standardize_stream(std, c)
    assert abs(std.mean) < 0.05 and abs(std.variance - 1) < 0.1
    allx = np.concatenate(chunks)
    assert std.mean == pytest.approx(allx.mean(), rel=1e-10, abs=1e-12)
    assert std.variance == pytest.approx(allx.var(), rel=1e-10)


@given(sizes=st.lists(st.integers(1, 400), min_size=1, max_size=12), loc=st.floats(-1e3, 1e3), seed=st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_welford_matches_two_pass(sizes, loc, seed):
    rng = np.random.default_rng(seed)
    chunks = [loc + rng.normal(scale=10, size=n) for n in sizes]
    std = dsp.StreamingStandardizer()
    for c in chunks:
        std.update(c)
    allx = np.concatenate(chunks)
    assert std.count == allx.size
    assert std.mean == pytest.approx(allx.mean(), rel=1e-10, abs=1e-10)
    assert std.variance == pytest.approx(allx.var(), rel=1e-10)


def test_update_then_transform_ordering():
    a, b = np.full(3000, 1.0), np.full(3000, 3.0)
    std = dsp.StreamingStandardizer()
    dsp.standardize_stream(std, a)
    out = dsp.standardize_stream(std, b)
    # both epochs in the stats: mean 2, variance 1
    np.testing.assert_allclose(out.samples, 1.0 / np.sqrt(1.0 + dsp.STD_EPS))


def test_strict_prior_uses_only_earlier_epochs():
    a, b = np.full(3000, 1.0), np.linspace(0, 2, 3000)
    std = dsp.StreamingStandardizer(strict_prior=True)
    dsp.standardize_stream(std, np.concatenate([a[:1500], -a[:1500]]))
    out = dsp.standardize_stream(std, b)
    np.testing.assert_allclose(out.samples, b / np.sqrt(1.0 + dsp.STD_EPS))


@given(seed=st.integers(0, 2**31), n_epochs=st.integers(2, 6), cut=st.integers(1, 5))
@settings(max_examples=15, deadline=None)
def test_preprocessing_is_causal(seed, n_epochs, cut):
    cut = min(cut, n_epochs - 1)
    x = np.random.default_rng(seed).normal(scale=20, size=3000 * n_epochs)
    pre = dsp.Preprocessor()
    full = pre.epoch_array(SampleSeries(x, 100.0))
    prefix = pre.epoch_array(SampleSeries(x[: 3000 * cut], 100.0))
    assert np.array_equal(full[:cut], prefix)


def test_preprocessor_skips_notches_at_nyquist():
    f = dsp.Preprocessor().build_filter(100.0)
    assert len(f.sections) == 2
    assert len(dsp.Preprocessor().build_filter(256.0).sections) == 4


def test_epochs_carry_provenance_and_labels():
    x = np.random.default_rng(0).normal(size=3000 * 3)
    eps = list(dsp.Preprocessor().epochs(SampleSeries(x, 100.0), "s1", [0, 2, 4]))
    assert [(e.subject_id, e.index, e.label) for e in eps] == [("s1", 0, 0), ("s1", 1, 2), ("s1", 2, 4)]
    assert all(e.samples.shape == (3000,) and np.all(np.isfinite(e.samples)) for e in eps)
