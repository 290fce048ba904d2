"""Source-domain training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from driftguard import metrics
from driftguard.errors import (
    DegeneratePrior,
    EmptyDataset,
    NotOneHot,
    ShapeMismatch,
    ZeroClassCount,
)
from driftguard.nn import SleepNet, log_softmax
from driftguard.stages import N_STAGES

log = logging.getLogger(__name__)


@dataclass
class FocalConfig:
    gamma: float = 2.0
    alpha: np.ndarray = field(default_factory=lambda: np.ones(N_STAGES))

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if np.any(self.alpha <= 0) or not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha must be finite and positive")


def one_hot(labels, n_classes: int = N_STAGES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def focal_loss(logits, labels, cfg: FocalConfig) -> tuple[float, np.ndarray]:
    """Batch-mean class-weighted focal loss and its gradient w.r.t. the logits.

    `labels` is a one-hot (batch, classes) array. Per sample the loss is
    ``-alpha_t * (1 - p_t)**gamma * log p_t`` for the true class t.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != z.shape:
        raise NotOneHot(f"labels shape {y.shape} != logits shape {z.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise NotOneHot("each label row must contain exactly one 1")
    t = y.argmax(axis=1)
    rows = np.arange(len(z))
    logp = log_softmax(z, axis=1)
    p = np.exp(logp)
    logpt = logp[rows, t]
    pt = p[rows, t]
    one_minus = -np.expm1(logpt)
    alpha_t = cfg.alpha[t]
    g = cfg.gamma
    mod = one_minus**g
    loss = -alpha_t * mod * logpt

    # d loss / d z_j = -alpha_t * [(1-pt)^g - g (1-pt)^(g-1) pt log pt] * (delta_tj - p_j)
    if g == 0:
        focus = np.zeros_like(pt)
    else:
        safe = np.where(one_minus > 0, one_minus, 1.0)
        focus = np.where(one_minus > 0, g * safe ** (g - 1) * pt * logpt, 0.0)
    coef = -alpha_t * (mod - focus)
    grad = coef[:, None] * (y - p) / len(z)
    return float(loss.mean()), grad


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights rescaled to mean 1."""
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 1):
        raise ZeroClassCount(f"every class needs at least one sample, got {c.tolist()}")
    inv = 1.0 / c
    return inv / inv.mean()


def prior_init(priors) -> np.ndarray:
    """Classifier bias whose softmax reproduces the class priors."""
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise DegeneratePrior(f"priors must be strictly positive, got {p.tolist()}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise DegeneratePrior(f"priors must sum to 1, got {p.sum()}")
    return np.log(p)


@dataclass
class OptimState:
    base_lr: float = 1e-3
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, t: int | None = None) -> float:
        t = self.step if t is None else t
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, t / self.warmup_steps)


def adam_step(opt: OptimState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, in place, at the warmup-scaled rate."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ShapeMismatch(f"{name}: grad {np.shape(g)} vs param {params[name].shape}")
    opt.step += 1
    t = opt.step
    lr = opt.lr(t)
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros(p.shape)
            opt.v[name] = np.zeros(p.shape)
        v = opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)
    return params


@dataclass
class AugmentConfig:
    p_jitter: float = 0.5
    jitter_sigma: float = 0.05  # fraction of epoch RMS
    p_scale: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    p_mask: float = 0.5
    max_mask_frac: float = 0.1


def augment(x, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """Jitter, amplitude scaling and one zero mask, each drawn independently.

    Accepts a sample vector or an object with a ``samples`` attribute
    (returned as a copy with augmented samples).
    """
    cfg = cfg or AugmentConfig()
    holder = None
    if hasattr(x, "samples"):
        holder, x = x, x.samples
    out = np.array(x, dtype=np.float64, copy=True)
    n = out.size
    if cfg.p_jitter > 0 and rng.random() < cfg.p_jitter:
        rms = float(np.sqrt(np.mean(out**2)))
        out += rng.normal(0.0, cfg.jitter_sigma * rms, n)
    if cfg.p_scale > 0 and rng.random() < cfg.p_scale:
        out *= rng.uniform(*cfg.scale_range)
    if cfg.p_mask > 0 and rng.random() < cfg.p_mask:
        max_len = max(1, int(cfg.max_mask_frac * n))
        length = int(rng.integers(1, max_len + 1))
        start = int(rng.integers(0, n - length + 1))
        out[start : start + length] = 0.0
    if holder is not None:
        return replace(holder, samples=out)
    return out


@dataclass
class SourceDataset:
    x: np.ndarray  # (n, samples)
    y: np.ndarray  # (n,) stage codes
    subjects: np.ndarray  # (n,) subject ids

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.subjects = np.asarray(self.subjects).astype(str)
        if not (len(self.x) == len(self.y) == len(self.subjects)):
            raise ShapeMismatch("x, y and subjects must have equal length")

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "SourceDataset":
        return SourceDataset(self.x[mask], self.y[mask], self.subjects[mask])


@dataclass
class TrainConfig:
    lr: float = 1e-3
    gamma: float = 2.0
    warmup_epochs: int = 5
    batch_size: int = 64
    epochs: int = 37
    patience: int = 7
    seed: int = 0
    augment: bool = True
    p_jitter: float = 0.5
    p_scale: float = 0.5
    p_mask: float = 0.5
    prior_init: bool = True
    class_balanced: bool = True
    val_subjects: Sequence[str] | None = None
    val_fraction: float = 0.2

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["val_subjects"] is not None:
            d["val_subjects"] = list(d["val_subjects"])
        return d


def split_subjects(subjects, cfg: TrainConfig) -> tuple[list[str], list[str]]:
    """Subject-disjoint train/validation split."""
    ids = sorted(set(np.asarray(subjects).astype(str)))
    if cfg.val_subjects is not None:
        val = [s for s in ids if s in set(cfg.val_subjects)]
    else:
        n_val = int(round(cfg.val_fraction * len(ids)))
        if len(ids) > 1:
            n_val = min(max(n_val, 1), len(ids) - 1)
        else:
            n_val = 0
        order = np.random.default_rng(cfg.seed).permutation(len(ids))
        val = sorted(ids[i] for i in order[:n_val])
    train = [s for s in ids if s not in set(val)]
    assert not set(train) & set(val)
    return train, val


def predict_labels(model: SleepNet, x: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode argmax labels and max-probabilities."""
    labels, conf = [], []
    for i in range(0, len(x), chunk):
        probs = model.forward(x[i : i + chunk], "eval").probs
        labels.append(probs.argmax(axis=1))
        conf.append(probs.max(axis=1))
    if not labels:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(labels), np.concatenate(conf)


@dataclass
class TrainResult:
    model: SleepNet
    log: list[dict]
    best_epoch: int
    train_subjects: list[str]
    val_subjects: list[str]
    priors: list[float]
    alpha: list[float]


def train_source(model: SleepNet, dataset: SourceDataset, cfg: TrainConfig | None = None) -> TrainResult:
    """Train on source subjects; keep the best-validation-macro-F1 weights.

    Without validation subjects the training macro-F1 drives selection.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise EmptyDataset("no training epochs")
    train_ids, val_ids = split_subjects(dataset.subjects, cfg)
    tr = dataset.subset(np.isin(dataset.subjects, train_ids))
    va = dataset.subset(np.isin(dataset.subjects, val_ids))
    if len(tr) < 2:
        raise EmptyDataset("need at least two training epochs")
    rng = np.random.default_rng(cfg.seed)

    # Laplace-smoothed counts keep weights and priors defined for absent stages
    counts = np.bincount(tr.y, minlength=N_STAGES) + 1
    alpha = class_weights(counts) if cfg.class_balanced else np.ones(N_STAGES)
    priors = counts / counts.sum()
    if cfg.prior_init:
        model.params["fc.b"][:] = prior_init(priors)
        model.params["fc.w"][:] = 0.0
        model.mark_updated()
    focal = FocalConfig(cfg.gamma, alpha)

    steps_per_epoch = max(1, len(tr) // cfg.batch_size)
    opt = OptimState(base_lr=cfg.lr, warmup_steps=cfg.warmup_epochs * steps_per_epoch)
    aug = AugmentConfig(p_jitter=cfg.p_jitter, p_scale=cfg.p_scale, p_mask=cfg.p_mask)
    targets = one_hot(tr.y)

    best = (-1.0, -1, None)
    history: list[dict] = []
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr))
        losses, hits, seen = [], 0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if b == steps_per_epoch - 1:
                idx = order[b * cfg.batch_size :]
            if len(idx) < 2:
                continue
            xb = tr.x[idx]
            if cfg.augment:
                xb = np.stack([augment(row, rng, aug) for row in xb])
            res = model.forward(xb, "train")
            loss, dlogits = focal_loss(res.logits, targets[idx], focal)
            grads = model.backward(res.cache, dlogits)
            adam_step(opt, model.params, grads)
            model.mark_updated()
            losses.append(loss)
            hits += int((res.logits.argmax(axis=1) == tr.y[idx]).sum())
            seen += len(idx)

        entry = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "train_acc": hits / max(seen, 1),
            "lr": opt.lr(),
        }
        sel_set = va if len(va) else tr
        pred, conf = predict_labels(model, sel_set.x)
        rep = metrics.evaluate(sel_set.y, pred, conf)
        entry["val_macro_f1" if len(va) else "train_eval_macro_f1"] = rep.macro_f1
        entry["val_acc" if len(va) else "train_eval_acc"] = rep.accuracy
        history.append(entry)
        log.info("epoch %d %s", epoch + 1, entry)

        if rep.macro_f1 > best[0]:
            best = (rep.macro_f1, epoch + 1, (
                {k: v.copy() for k, v in model.params.items()},
                {k: v.copy() for k, v in model.buffers.items()},
            ))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    params, buffers = best[2]
    for k, v in params.items():
        model.params[k][...] = v
    for k, v in buffers.items():
        model.buffers[k][...] = v
    model.mark_updated()
    return TrainResult(
        model=model,
        log=history,
        best_epoch=best[1],
        train_subjects=train_ids,
        val_subjects=val_ids,
        priors=priors.tolist(),
        alpha=alpha.tolist(),
    )
