"""Causal preprocessing: notch + band-pass biquads, rational resampling,
30 s epoching and per-record streaming standardization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy import signal as sps

from driftguard.edfio import SampleSeries
from driftguard.errors import InvalidBand, InvalidFrequency, IrrationalRatio

log = logging.getLogger(__name__)

FS = 100.0
EPOCH_S = 30
EPOCH_LEN = int(FS * EPOCH_S)
STD_EPS = 1e-8


@dataclass
class FilterCascade:
    """Second-order sections ``[b0, b1, b2, 1, a1, a2]`` plus DF-II-T delay state."""

    sos: np.ndarray
    state: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sos = np.atleast_2d(np.asarray(self.sos, dtype=np.float64))
        if self.sos.shape[1] != 6:
            raise ValueError("each section needs 6 coefficients")
        if not np.allclose(self.sos[:, 3], 1.0):
            self.sos = self.sos / self.sos[:, 3:4]
        for a in self.sos[:, 3:]:
            if np.any(np.abs(np.roots(a)) >= 1.0):
                raise ValueError(f"unstable section with denominator {a}")
        if self.state is None:
            self.reset()

    @property
    def sections(self) -> np.ndarray:
        return self.sos

    def reset(self):
        self.state = np.zeros((len(self.sos), 2))

    def then(self, other: "FilterCascade") -> "FilterCascade":
        return FilterCascade(np.vstack([self.sos, other.sos]))

    @classmethod
    def identity(cls) -> "FilterCascade":
        return cls([[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]])


def design_bandpass(lo_hz: float = 0.3, hi_hz: float = 45.0, fs_hz: float = FS, order: int = 4) -> FilterCascade:
    """Butterworth band-pass of total order `order` (order/2 biquads)."""
    if not 0 < lo_hz < hi_hz < fs_hz / 2:
        raise InvalidBand(f"need 0 < lo < hi < fs/2, got lo={lo_hz}, hi={hi_hz}, fs={fs_hz}")
    if order % 2:
        raise InvalidBand("band-pass order must be even")
    sos = sps.butter(order // 2, [lo_hz, hi_hz], btype="bandpass", fs=fs_hz, output="sos")
    return FilterCascade(sos)


def design_notch(f0_hz: float, fs_hz: float, q: float = 30.0) -> FilterCascade:
    if not 0 < f0_hz < fs_hz / 2:
        raise InvalidFrequency(f"notch at {f0_hz} Hz is not below Nyquist ({fs_hz / 2} Hz)")
    b, a = sps.iirnotch(f0_hz, q, fs=fs_hz)
    return FilterCascade(np.concatenate([b, a])[None, :])


def apply(filt: FilterCascade, series):
    """Run the cascade causally; the delay state carries over between calls."""
    is_series = isinstance(series, SampleSeries)
    x = np.asarray(series.data if is_series else series, dtype=np.float64)
    y, zf = sps.sosfilt(filt.sos, x, zi=filt.state)
    filt.state = zf
    return SampleSeries(y, series.fs) if is_series else y


def resample(series: SampleSeries, fs_out: float = FS) -> SampleSeries:
    """Polyphase windowed-sinc rational resampling."""
    if fs_out == series.fs:
        return SampleSeries(np.array(series.data, dtype=np.float64, copy=True), series.fs)
    ratio = fs_out / series.fs
    frac = Fraction(ratio).limit_denominator(1000)
    if abs(float(frac) - ratio) > 1e-9 * ratio:
        raise IrrationalRatio(f"{series.fs} -> {fs_out} Hz is not a ratio with denominator <= 1000")
    x = np.asarray(series.data, dtype=np.float64)
    y = sps.resample_poly(x, frac.numerator, frac.denominator)
    n_out = int(math.floor(len(x) * ratio + 0.5))
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - len(y))])
    return SampleSeries(y, fs_out)


def epoch_samples(x: np.ndarray, epoch_len: int = EPOCH_LEN) -> np.ndarray:
    """Cut into whole epochs; a trailing partial window is dropped."""
    x = np.asarray(x)
    n = len(x) // epoch_len
    return x[: n * epoch_len].reshape(n, epoch_len)


@dataclass
class StreamingStandardizer:
    """Running mean / population variance over every sample seen in a record."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    strict_prior: bool = False

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    def update(self, x) -> None:
        # Chan et al. merge of the batch into the running moments
        x = np.asarray(x, dtype=np.float64).ravel()
        n_b = x.size
        if n_b == 0:
            return
        mean_b = float(x.mean())
        m2_b = float(np.sum((x - mean_b) ** 2))
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += m2_b + delta * delta * self.count * n_b / n
        self.count = n

    def reset(self):
        self.count, self.mean, self.m2 = 0, 0.0, 0.0

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / math.sqrt(self.variance + STD_EPS)


@dataclass
class Epoch:
    samples: np.ndarray
    subject_id: str
    index: int
    label: int | None = None

    def __post_init__(self):
        if self.samples.shape != (EPOCH_LEN,):
            raise ValueError(f"epoch must hold {EPOCH_LEN} samples, got {self.samples.shape}")


def standardize_stream(
    std: StreamingStandardizer,
    epoch_raw,
    subject_id: str = "",
    index: int = 0,
    label: int | None = None,
) -> Epoch:
    """Standardize one epoch with the record's running statistics.

    By default the epoch's own samples enter the statistics first. With
    ``std.strict_prior`` only earlier epochs are used, except for the very
    first epoch of a record, which has no history and falls back to itself.
    """
    raw = np.asarray(epoch_raw, dtype=np.float64)
    if std.strict_prior and std.count > 0:
        out = std.transform(raw)
        std.update(raw)
    else:
        std.update(raw)
        out = std.transform(raw)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite samples after standardization")
    return Epoch(out, subject_id, index, label)


@dataclass
class Preprocessor:
    """Per-record chain: notches, band-pass, resample, epoch, standardize."""

    notch_hz: Sequence[float] = (50.0, 60.0)
    notch_q: float = 30.0
    band_hz: tuple[float, float] = (0.3, 45.0)
    bandpass_order: int = 4
    fs_out: float = FS
    strict_prior: bool = False

    def build_filter(self, fs: float) -> FilterCascade:
        cascade = None
        for f0 in self.notch_hz:
            if f0 >= fs / 2:
                log.debug("skipping %.0f Hz notch at fs=%.1f Hz (at or above Nyquist)", f0, fs)
                continue
            notch = design_notch(f0, fs, self.notch_q)
            cascade = notch if cascade is None else cascade.then(notch)
        band = design_bandpass(self.band_hz[0], self.band_hz[1], fs, self.bandpass_order)
        return band if cascade is None else cascade.then(band)

    def filtered(self, series: SampleSeries) -> SampleSeries:
        filt = self.build_filter(series.fs)
        return resample(apply(filt, series), self.fs_out)

    def epochs(
        self, series: SampleSeries, subject_id: str = "", labels: Sequence[int | None] | None = None
    ) -> Iterator[Epoch]:
        clean = self.filtered(series)
        raw = epoch_samples(clean.data, int(round(self.fs_out * EPOCH_S)))
        std = StreamingStandardizer(strict_prior=self.strict_prior)
        for k, row in enumerate(raw):
            label = None if labels is None or k >= len(labels) else labels[k]
            yield standardize_stream(std, row, subject_id, k, label)

    def epoch_array(self, series: SampleSeries) -> np.ndarray:
        rows = [e.samples for e in self.epochs(series)]
        return np.stack(rows) if rows else np.zeros((0, EPOCH_LEN))
