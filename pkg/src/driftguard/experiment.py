"""Synthetic distribution-shift experiment: train on clean synthetic subjects,
then compare frozen, BN-only and Tent inference on drifted streams.

Hyperparameters that adaptation depends on (the Tent learning rate) are
picked on validation streams whose seeds never overlap the test seeds, and
the chosen value is reused unchanged on every test stream.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from driftguard import dsp, synth, train, tta
from driftguard.edfio import SampleSeries
from driftguard.nn import SleepNet

log = logging.getLogger(__name__)


@dataclass
class ShiftExperimentConfig:
    n_train_subjects: int = 16
    n_val_subjects: int = 2  # taken from the training pool for model selection
    epochs_per_subject: int = 150
    train_epochs: int = 20
    warmup_epochs: int = 2
    seed: int = 0
    drifts: tuple[str, ...] = ("gain:3.0@40", "noise:20.0@0")
    test_seeds: tuple[int, ...] = tuple(range(100, 110))
    val_stream_seeds: tuple[int, ...] = tuple(range(200, 206))
    tta_lr_grid: tuple[float, ...] = (1e-3, 3e-3, 1e-2)


@dataclass
class ShiftExperimentResult:
    clean: np.ndarray
    frozen: np.ndarray
    bn_only: np.ndarray
    tent: np.ndarray
    tta_lr: float
    val_scores: dict[float, float]
    timings: dict[str, float] = field(default_factory=dict)
    train_log: list[dict] = field(default_factory=list)
    model: SleepNet | None = field(default=None, repr=False)

    @property
    def drop(self) -> float:
        return float(self.clean.mean() - self.frozen.mean())

    @property
    def bn_recovery(self) -> float:
        """Fraction of the frozen drop that BN-only wins back."""
        return float((self.bn_only.mean() - self.frozen.mean()) / self.drop) if self.drop > 0 else float("nan")

    @property
    def tent_wins(self) -> int:
        return int(np.sum(self.tent > self.bn_only))

    def summary(self) -> dict:
        return {
            "clean": float(self.clean.mean()),
            "frozen": float(self.frozen.mean()),
            "bn_only": float(self.bn_only.mean()),
            "tent": float(self.tent.mean()),
            "drop": self.drop,
            "bn_recovery": self.bn_recovery,
            "tent_minus_bn": float(self.tent.mean() - self.bn_only.mean()),
            "tent_wins": self.tent_wins,
            "tent_ties": int(np.sum(self.tent == self.bn_only)),
            "tta_lr": self.tta_lr,
            "val_scores": {str(k): v for k, v in self.val_scores.items()},
            "timings": self.timings,
        }


def subject_stream(index: int, n_epochs: int, drifts=(), seed: int = 0, pre: dsp.Preprocessor | None = None):
    """Preprocessed, standardized epochs and stage labels for one synthetic subject."""
    pre = pre or dsp.Preprocessor()
    specs = [d if isinstance(d, synth.DriftSpec) else synth.DriftSpec.parse(d) for d in drifts]
    rng = np.random.default_rng([seed, index])
    rec = synth.gen_subject(f"s{index}", synth.SubjectConfig(n_epochs=n_epochs, drifts=specs), rng)
    x = pre.epoch_array(SampleSeries(rec.signal, rec.fs)).astype(np.float32)
    return x, rec.stages[: len(x)]


def train_clean_model(cfg: ShiftExperimentConfig) -> train.TrainResult:
    xs, ys, subs = [], [], []
    for i in range(cfg.n_train_subjects):
        x, y = subject_stream(i, cfg.epochs_per_subject, seed=cfg.seed)
        xs.append(x)
        ys.append(y)
        subs += [f"s{i}"] * len(y)
    data = train.SourceDataset(np.concatenate(xs), np.concatenate(ys), np.array(subs))
    val = [f"s{i}" for i in range(cfg.n_train_subjects - cfg.n_val_subjects, cfg.n_train_subjects)]
    tcfg = train.TrainConfig(epochs=cfg.train_epochs, warmup_epochs=cfg.warmup_epochs, seed=cfg.seed, val_subjects=val)
    return train.train_source(SleepNet.initialized(seed=cfg.seed), data, tcfg)


def stream_accuracy(model: SleepNet, x, y, acfg: tta.AdaptConfig) -> float:
    res = tta.adapt_stream(model.clone(), x, acfg)
    return float(np.mean(res.labels == y))


def select_tta_lr(model: SleepNet, streams, grid) -> tuple[float, dict[float, float]]:
    """Best mean validation accuracy; ties go to the earliest grid entry."""
    scores = {}
    for lr in grid:
        acfg = tta.AdaptConfig(mode=tta.AdaptMode.TENT, tta_lr=lr)
        scores[lr] = float(np.mean([stream_accuracy(model, x, y, acfg) for x, y in streams]))
    best = max(grid, key=lambda lr: (scores[lr], -grid.index(lr)))
    return best, scores


def run_shift_experiment(cfg: ShiftExperimentConfig | None = None, model: SleepNet | None = None) -> ShiftExperimentResult:
    cfg = cfg or ShiftExperimentConfig()
    timings = {}
    t0 = time.perf_counter()
    train_log = []
    if model is None:
        result = train_clean_model(cfg)
        model, train_log = result.model, result.log
    timings["train_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    offset = 10_000  # keeps stream subjects disjoint from the training pool
    val_streams = [subject_stream(offset + s, cfg.epochs_per_subject, cfg.drifts, cfg.seed) for s in cfg.val_stream_seeds]
    lr, val_scores = select_tta_lr(model, val_streams, list(cfg.tta_lr_grid))
    timings["select_s"] = time.perf_counter() - t1
    log.info("selected tta_lr=%g from %s", lr, val_scores)

    t2 = time.perf_counter()
    clean, frozen, bn, tent = [], [], [], []
    modes = {
        "frozen": tta.AdaptConfig(mode=tta.AdaptMode.FROZEN),
        "bn": tta.AdaptConfig(mode=tta.AdaptMode.BN_ONLY),
        "tent": tta.AdaptConfig(mode=tta.AdaptMode.TENT, tta_lr=lr),
    }
    for s in cfg.test_seeds:
        xc, yc = subject_stream(offset + s, cfg.epochs_per_subject, (), cfg.seed)
        xd, yd = subject_stream(offset + s, cfg.epochs_per_subject, cfg.drifts, cfg.seed)
        clean.append(stream_accuracy(model, xc, yc, modes["frozen"]))
        frozen.append(stream_accuracy(model, xd, yd, modes["frozen"]))
        bn.append(stream_accuracy(model, xd, yd, modes["bn"]))
        tent.append(stream_accuracy(model, xd, yd, modes["tent"]))
        log.info("seed %d clean %.3f frozen %.3f bn %.3f tent %.3f", s, clean[-1], frozen[-1], bn[-1], tent[-1])
    timings["test_s"] = time.perf_counter() - t2
    timings["total_s"] = time.perf_counter() - t0
    return ShiftExperimentResult(
        np.array(clean), np.array(frozen), np.array(bn), np.array(tent), lr, val_scores, timings, train_log, model
    )


def config_dict(cfg: ShiftExperimentConfig) -> dict:
    return asdict(cfg)
