"""Stage-conditioned synthetic EEG, Markov hypnograms and drift injectors.

The signals are not physiological; they only need distinct, stage-specific
spectra so that a classifier can learn them and a shift can break it.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from driftguard import edfio
from driftguard.errors import NotStochastic, OnsetOutOfRange
from driftguard.stages import N_STAGES, StageLabel

FS = 100.0
EPOCH_LEN = 3000


@dataclass(frozen=True)
class Component:
    freq_hz: float
    bandwidth_hz: float
    amplitude_uv: float
    bursty: bool = False


@dataclass(frozen=True)
class StageModel:
    components: tuple[Component, ...]
    noise_uv: float = 5.0

    def __post_init__(self):
        for c in self.components:
            if not 0 < c.freq_hz < 50:
                raise ValueError(f"component frequency {c.freq_hz} Hz outside (0, 50)")
            if c.amplitude_uv <= 0:
                raise ValueError("component amplitudes must be positive")

    def perturbed(self, rng: np.random.Generator, freq_jitter: float = 0.3, amp_jitter: float = 0.1) -> "StageModel":
        """Subject-specific variant: small frequency shifts and gain changes."""
        comps = tuple(
            replace(
                c,
                freq_hz=float(np.clip(c.freq_hz + rng.uniform(-freq_jitter, freq_jitter), 0.5, 45.0)),
                amplitude_uv=c.amplitude_uv * float(rng.uniform(1 - amp_jitter, 1 + amp_jitter)),
            )
            for c in self.components
        )
        return replace(self, components=comps)


DEFAULT_STAGE_MODELS: dict[StageLabel, StageModel] = {
    StageLabel.W: StageModel((Component(10.0, 2.0, 30.0), Component(20.0, 6.0, 6.0))),
    StageLabel.N1: StageModel((Component(6.0, 2.0, 25.0), Component(10.0, 2.0, 6.0))),
    StageLabel.N2: StageModel((Component(6.0, 2.0, 20.0), Component(13.0, 1.0, 35.0, bursty=True))),
    StageLabel.N3: StageModel((Component(1.5, 1.0, 80.0), Component(6.0, 2.0, 8.0))),
    StageLabel.REM: StageModel((Component(6.0, 4.0, 12.0), Component(20.0, 8.0, 8.0)), noise_uv=4.0),
}

# Heavy self-transitions mimic sleep inertia; each row sums to 1.
DEFAULT_TRANSITION = np.array(
    [
        [0.85, 0.10, 0.03, 0.01, 0.01],
        [0.04, 0.85, 0.09, 0.00, 0.02],
        [0.02, 0.03, 0.85, 0.06, 0.04],
        [0.01, 0.01, 0.13, 0.85, 0.00],
        [0.04, 0.05, 0.06, 0.00, 0.85],
    ]
)


def gen_hypnogram(transition, n: int, rng: np.random.Generator) -> np.ndarray:
    """Markov-chain stage sequence of length n, starting awake."""
    t = np.asarray(transition, dtype=np.float64)
    if t.shape != (N_STAGES, N_STAGES) or np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1) > 1e-9):
        raise NotStochastic("transition matrix must be 5x5, non-negative, rows summing to 1")
    cdf = np.cumsum(t, axis=1)
    u = rng.random(n)
    out = np.empty(n, dtype=np.int64)
    state = int(StageLabel.W)
    for k in range(n):
        if k > 0:
            state = int(min(np.searchsorted(cdf[state], u[k], side="right"), N_STAGES - 1))
        out[k] = state
    return out


def _bursts(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    env = np.zeros(n)
    for _ in range(int(rng.integers(2, 5))):
        length = int(rng.uniform(0.8, 2.0) * fs)
        start = int(rng.integers(0, n - length))
        env[start : start + length] += np.hanning(length)
    return np.minimum(env, 1.0)


def gen_epoch(
    stage: int,
    model: StageModel | None = None,
    rng: np.random.Generator | None = None,
    fs: float = FS,
    n: int = EPOCH_LEN,
    n_partials: int = 4,
) -> np.ndarray:
    """Random-phase sinusoids from the stage recipe plus white noise (in uV)."""
    rng = rng or np.random.default_rng()
    model = model or DEFAULT_STAGE_MODELS[StageLabel(stage)]
    t = np.arange(n) / fs
    x = np.zeros(n)
    for comp in model.components:
        if comp.bandwidth_hz == 0:
            freqs = np.array([comp.freq_hz])
        else:
            half = comp.bandwidth_hz / 2
            freqs = rng.uniform(max(0.1, comp.freq_hz - half), comp.freq_hz + half, n_partials)
        phases = rng.uniform(0, 2 * np.pi, len(freqs))
        amp = comp.amplitude_uv / math.sqrt(len(freqs))
        wave = amp * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
        if comp.bursty:
            wave *= _bursts(n, fs, rng)
        x += wave
    if model.noise_uv > 0:
        x += rng.normal(0.0, model.noise_uv, n)
    return x


class DriftKind(str, enum.Enum):
    GAIN = "gain"
    OFFSET = "offset"
    NOISE = "noise"
    HUM50 = "hum50"


@dataclass(frozen=True)
class DriftSpec:
    kind: DriftKind
    magnitude: float
    onset_epoch: int = 0
    ramp_epochs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", DriftKind(self.kind))
        if self.onset_epoch < 0 or self.ramp_epochs < 0:
            raise OnsetOutOfRange("onset and ramp must be non-negative")

    _PATTERN = re.compile(r"^(\w+):([-+0-9.eE]+)(?:@(\d+))?(?:~(\d+))?$")

    @classmethod
    def parse(cls, text: str) -> "DriftSpec":
        """Parse ``kind:magnitude[@onset_epoch][~ramp_epochs]``, e.g. ``gain:3.0@50``."""
        m = cls._PATTERN.match(text.strip())
        if not m:
            raise ValueError(f"bad drift spec {text!r}; expected kind:magnitude[@onset][~ramp]")
        kind, mag, onset, ramp = m.groups()
        return cls(DriftKind(kind.lower()), float(mag), int(onset or 0), int(ramp or 0))


def drift_weight(n: int, spec: DriftSpec, epoch_len: int = EPOCH_LEN) -> np.ndarray:
    """Per-sample drift strength in [0, 1]: 0 before onset, linear ramp, then 1."""
    s = np.arange(n, dtype=np.float64)
    onset = spec.onset_epoch * epoch_len
    ramp = spec.ramp_epochs * epoch_len
    if ramp == 0:
        return (s >= onset).astype(np.float64)
    return np.clip((s - onset) / ramp, 0.0, 1.0) * (s >= onset)


def inject_drift(
    x,
    spec: DriftSpec,
    rng: np.random.Generator | None = None,
    fs: float = FS,
    epoch_len: int = EPOCH_LEN,
) -> np.ndarray:
    """Apply one drift to a continuous signal or an (epochs, samples) array.

    Sample positions are absolute within the stream, so injecting before
    or after epoching gives identical samples.
    """
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.reshape(-1)
    n_epochs = math.ceil(flat.size / epoch_len)
    if spec.onset_epoch >= max(n_epochs, 1):
        raise OnsetOutOfRange(f"onset epoch {spec.onset_epoch} beyond stream of {n_epochs} epochs")
    w = drift_weight(flat.size, spec, epoch_len)
    if spec.kind is DriftKind.GAIN:
        out = flat * (1.0 + (spec.magnitude - 1.0) * w)
    elif spec.kind is DriftKind.OFFSET:
        out = flat + spec.magnitude * w
    elif spec.kind is DriftKind.NOISE:
        rng = rng or np.random.default_rng()
        out = flat + w * rng.normal(0.0, spec.magnitude, flat.size)
    else:
        # quarter-cycle phase keeps the tone visible when 50 Hz sits at Nyquist
        t = np.arange(flat.size) / fs
        out = flat + w * spec.magnitude * np.sin(2 * np.pi * 50.0 * t + np.pi / 4)
    return out.reshape(arr.shape)


@dataclass
class SyntheticRecord:
    subject_id: str
    signal: np.ndarray  # continuous raw uV
    stages: np.ndarray  # per-epoch stage codes
    fs: float = FS

    @property
    def n_epochs(self) -> int:
        return len(self.stages)

    def epochs(self) -> np.ndarray:
        n = int(round(self.fs * 30))
        return self.signal[: self.n_epochs * n].reshape(self.n_epochs, n)


@dataclass
class SubjectConfig:
    n_epochs: int = 200
    fs: float = FS
    transition: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITION.copy())
    stage_models: dict = field(default_factory=lambda: dict(DEFAULT_STAGE_MODELS))
    freq_jitter: float = 0.3
    amp_jitter: float = 0.1
    drifts: Sequence[DriftSpec] = ()


def gen_subject(subject_id: str, cfg: SubjectConfig, rng: np.random.Generator) -> SyntheticRecord:
    """One record: hypnogram, subject-perturbed stage models, optional drifts."""
    models = {s: m.perturbed(rng, cfg.freq_jitter, cfg.amp_jitter) for s, m in cfg.stage_models.items()}
    stages = gen_hypnogram(cfg.transition, cfg.n_epochs, rng)
    n = int(round(cfg.fs * 30))
    signal = np.concatenate([gen_epoch(s, models[StageLabel(s)], rng, cfg.fs, n) for s in stages])
    for spec in cfg.drifts:
        signal = inject_drift(signal, spec, rng, cfg.fs, n)
    return SyntheticRecord(subject_id, signal, stages, cfg.fs)


def record_to_edf(record: SyntheticRecord, target=None, label: str = "EEG Fpz-Cz") -> bytes:
    """Serialize as EDF+C with 30 s data records and a stage hypnogram."""
    spr = int(round(record.fs * 30))
    peak = float(np.max(np.abs(record.signal))) if record.signal.size else 1.0
    bound = float(math.ceil(peak) + 1)
    meta = edfio.eeg_signal_meta(label, spr, -bound, bound)
    digital = meta.to_digital(record.signal[: record.n_epochs * spr])
    annotations = edfio.stages_to_annotations([StageLabel(int(s)) for s in record.stages])
    return edfio.write_edf(
        target,
        [(meta, digital)],
        record_duration_s=30.0,
        annotations=annotations,
        patient=f"{record.subject_id} X X X",
    )
