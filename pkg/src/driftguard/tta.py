"""Streaming test-time adaptation.

Three policies share one loop: ``frozen`` (plain eval-mode inference),
``bn-only`` (refresh BN running statistics, no gradients) and ``tent``
(refresh statistics and take one entropy-minimizing SGD step on the BN
affine parameters). Two safeguards wrap the adaptive policies: an entropy
gate on the EMA of batch entropy, and an EMA snapshot of the BN state that is
restored when the parameters drift, the gate stays shut too long, or a loss
goes non-finite.

Each micro-batch is first predicted with the state adapted on all *earlier*
batches and only then used for adaptation, so no epoch's output depends on
any later epoch, including later members of its own micro-batch.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

from driftguard.errors import BatchTooSmall, NonFiniteLoss
from driftguard.nn import LN5, BNMode, ForwardResult, SleepNet, mean_entropy_loss

log = logging.getLogger(__name__)


class AdaptMode(str, enum.Enum):
    FROZEN = "frozen"
    BN_ONLY = "bn-only"
    TENT = "tent"


class Gate(str, enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass
class AdaptConfig:
    mode: AdaptMode = AdaptMode.TENT
    micro_batch: int = 8
    bn_momentum: float = 0.1
    tta_lr: float = 1e-3
    sgd_momentum: float = 0.9
    h_min: float = 0.05 * LN5
    h_max: float = 0.9 * LN5
    ema_entropy_momentum: float = 0.9
    snapshot_decay: float = 0.999
    drift_delta: float = 0.1
    gate_streak_reset: int = 50
    median_width: int = 5
    use_gate: bool = True
    use_reset: bool = True
    # when False, BN statistics are refreshed even on batches the gate closes
    gate_stats: bool = True
    # test the raw batch entropy instead of its EMA against [h_min, h_max]
    gate_on_raw_entropy: bool = False

    def __post_init__(self):
        self.mode = AdaptMode(self.mode)
        if not 0 <= self.h_min < self.h_max <= LN5 + 1e-12:
            raise ValueError(f"need 0 <= h_min < h_max <= ln 5, got {self.h_min}, {self.h_max}")
        if not 0 < self.bn_momentum <= 1:
            raise ValueError("bn_momentum must lie in (0, 1]")
        if not 0 < self.snapshot_decay < 1:
            raise ValueError("snapshot_decay must lie in (0, 1)")
        if self.median_width < 1 or self.median_width % 2 == 0:
            raise ValueError("median_width must be a positive odd number")
        if self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class AdaptState:
    bn_snapshot: dict[str, np.ndarray]
    ema_entropy: float | None = None
    updates_applied: int = 0
    gated_streak: int = 0
    resets: int = 0
    batches: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def nbytes(self) -> int:
        arrays = list(self.bn_snapshot.values()) + list(self.velocity.values())
        return int(sum(a.nbytes for a in arrays)) + 5 * 8


def init_state(model: SleepNet) -> AdaptState:
    return AdaptState(bn_snapshot=model.bn_state())


def _bn_vector(source: dict[str, np.ndarray], names: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(source[n], dtype=np.float64).ravel() for n in names])


def bn_distance(model: SleepNet, snapshot: dict[str, np.ndarray]) -> float:
    """Relative L2 distance of live BN gamma/beta from the snapshot."""
    names = model.bn_param_names
    live = _bn_vector(model.params, names)
    snap = _bn_vector(snapshot, names)
    return float(np.linalg.norm(live - snap) / (np.linalg.norm(snap) + 1e-12))


def gate(state: AdaptState, batch_entropy: float, cfg: AdaptConfig) -> Gate:
    """Update the entropy EMA and decide whether this batch may adapt.

    A non-finite entropy leaves the EMA alone and closes the gate.
    """
    if not math.isfinite(batch_entropy):
        state.gated_streak += 1
        return Gate.CLOSED
    h = float(np.clip(batch_entropy, 0.0, LN5))
    if state.ema_entropy is None:
        state.ema_entropy = h
    else:
        mu = cfg.ema_entropy_momentum
        state.ema_entropy = mu * state.ema_entropy + (1.0 - mu) * h
    probe = h if cfg.gate_on_raw_entropy else state.ema_entropy
    is_open = (not cfg.use_gate) or (cfg.h_min <= probe <= cfg.h_max)
    if is_open:
        state.gated_streak = 0
        return Gate.OPEN
    state.gated_streak += 1
    return Gate.CLOSED


def bn_refresh(model: SleepNet, batch, momentum: float = 0.1) -> ForwardResult:
    """Fold the batch's BN statistics into the running buffers, no gradients.

    Returns the eval-mode pass computed with the refreshed statistics.
    """
    x = np.asarray(batch)
    if x.shape[0] < 2:
        raise BatchTooSmall("BN refresh needs at least 2 epochs")
    model.forward(x, BNMode.TRAIN, update_stats=True, momentum=momentum)
    return model.forward(x, BNMode.EVAL)


@dataclass
class TentStep:
    loss: float
    grads: dict[str, np.ndarray]


def tent_step(model: SleepNet, batch, state: AdaptState, cfg: AdaptConfig) -> TentStep:
    """One entropy-minimization step on BN gamma/beta (SGD with momentum).

    The train-mode forward also refreshes the running statistics. Every
    non-BN parameter is left untouched. Raises NonFiniteLoss without
    touching gamma/beta when the loss or its gradient is not finite.
    """
    x = np.asarray(batch)
    if x.shape[0] < 2:
        raise BatchTooSmall("a Tent step needs at least 2 epochs")
    res = model.forward(x, BNMode.TRAIN, update_stats=True, momentum=cfg.bn_momentum)
    loss, dlogits = mean_entropy_loss(res.logits)
    names = model.bn_param_names
    grads = model.backward(res.cache, dlogits, wanted=names)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLoss(f"entropy loss {loss}")
    for n in names:
        v = state.velocity.get(n)
        if v is None:
            v = state.velocity[n] = np.zeros(model.params[n].shape)
        v *= cfg.sgd_momentum
        v += grads[n]
        model.params[n] -= (cfg.tta_lr * v).astype(model.dtype)
    model.mark_updated()
    return TentStep(loss, grads)


def snapshot_update_and_maybe_reset(
    model: SleepNet,
    state: AdaptState,
    cfg: AdaptConfig,
    updated: bool,
    nonfinite: bool = False,
) -> bool:
    """Drift check, then snapshot EMA. Returns True if a reset fired.

    The drift check runs first so a runaway update cannot leak into the
    snapshot it is about to be reset to. Non-finite losses always reset,
    even with resets disabled.
    """
    trigger = nonfinite
    if cfg.use_reset and not trigger:
        trigger = (
            bn_distance(model, state.bn_snapshot) > cfg.drift_delta
            or state.gated_streak >= cfg.gate_streak_reset
        )
    if trigger:
        model.load_bn_state({k: v.copy() for k, v in state.bn_snapshot.items()})
        state.velocity.clear()
        state.gated_streak = 0
        state.resets += 1
        return True
    if updated:
        rho = cfg.snapshot_decay
        live = model.bn_state()
        for k, snap in state.bn_snapshot.items():
            blended = rho * snap.astype(np.float64) + (1.0 - rho) * live[k].astype(np.float64)
            state.bn_snapshot[k] = blended.astype(snap.dtype)
    return False


class CausalMedian:
    """Running median over the last `width` labels; ties take the lower value."""

    def __init__(self, width: int = 5):
        if width < 1 or width % 2 == 0:
            raise ValueError("width must be a positive odd number")
        self.window: deque[int] = deque(maxlen=width)

    def push(self, label: int) -> int:
        self.window.append(int(label))
        ordered = sorted(self.window)
        return ordered[(len(ordered) - 1) // 2]


def median_smooth(labels: Iterable[int], width: int = 5) -> list[int]:
    med = CausalMedian(width)
    return [med.push(v) for v in labels]


@dataclass
class BatchRecord:
    batch_index: int
    start: int
    size: int
    entropy: float | None  # None when the batch produced non-finite outputs
    ema_entropy: float | None
    gate: str
    updated: bool
    reset: bool
    loss: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptResult:
    probs: np.ndarray
    labels: np.ndarray
    smoothed: np.ndarray
    entropies: np.ndarray
    trace: list[BatchRecord]
    state: AdaptState
    subject_ids: list[str]
    indices: list[int]

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1) if len(self.probs) else np.zeros(0)

    def summary(self) -> dict:
        return {
            "n_epochs": int(len(self.labels)),
            "n_batches": len(self.trace),
            "updates_applied": self.state.updates_applied,
            "resets": self.state.resets,
            "gated_batches": sum(r.gate == Gate.CLOSED.value for r in self.trace),
            "final_ema_entropy": self.state.ema_entropy,
        }


def _strip(item, k: int) -> tuple[np.ndarray, str, int]:
    """Keep only samples and provenance; any label never reaches adaptation."""
    if hasattr(item, "samples"):
        return np.asarray(item.samples), str(getattr(item, "subject_id", "")), int(getattr(item, "index", k))
    return np.asarray(item), "", k


class StreamAdapter:
    """Stateful per-stream driver; feed epochs in time order."""

    def __init__(self, model: SleepNet, cfg: AdaptConfig | None = None):
        self.model = model
        self.cfg = cfg or AdaptConfig()
        self.state = init_state(model)
        self.median = CausalMedian(self.cfg.median_width)
        self.trace: list[BatchRecord] = []
        self._seen = 0

    def process_batch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Predict a micro-batch, then adapt on it. Returns probs, labels, smoothed, entropies."""
        cfg, model, state = self.cfg, self.model, self.state
        x = np.asarray(x, dtype=model.dtype)
        if x.ndim == 2:
            x = x[:, None, :]
        res = model.forward(x, BNMode.EVAL)
        probs = res.probs.astype(np.float64)
        ents = res.entropies
        labels = probs.argmax(axis=1)
        smoothed = np.array([self.median.push(v) for v in labels], dtype=np.int64)

        batch_h = float(np.clip(ents.mean(), 0.0, LN5))
        decision = gate(state, batch_h, cfg)
        updated, reset, loss = False, False, None
        if cfg.mode is not AdaptMode.FROZEN:
            nonfinite = not math.isfinite(batch_h)
            if nonfinite:
                log.warning("batch %d: non-finite predictions; resetting", state.batches)
            if len(x) >= 2:
                if decision is Gate.OPEN:
                    if cfg.mode is AdaptMode.BN_ONLY:
                        model.forward(x, BNMode.TRAIN, update_stats=True, momentum=cfg.bn_momentum)
                        updated = True
                    else:
                        try:
                            loss = tent_step(model, x, state, cfg).loss
                            updated = True
                        except NonFiniteLoss as exc:
                            log.warning("batch %d: %s; resetting", state.batches, exc)
                            nonfinite = True
                elif not cfg.gate_stats:
                    model.forward(x, BNMode.TRAIN, update_stats=True, momentum=cfg.bn_momentum)
                    updated = True
            if updated:
                state.updates_applied += 1
            reset = snapshot_update_and_maybe_reset(model, state, cfg, updated, nonfinite)

        self.trace.append(
            BatchRecord(
                batch_index=state.batches,
                start=self._seen,
                size=len(x),
                entropy=batch_h if math.isfinite(batch_h) else None,
                ema_entropy=state.ema_entropy,
                gate=decision.value,
                updated=updated,
                reset=reset,
                loss=loss,
            )
        )
        state.batches += 1
        self._seen += len(x)
        return probs, labels, smoothed, ents

    def run(self, stream: Iterable) -> AdaptResult:
        chunks: list[tuple] = []
        subject_ids: list[str] = []
        indices: list[int] = []
        buf: list[np.ndarray] = []
        for k, item in enumerate(stream):
            samples, sid, idx = _strip(item, k)
            buf.append(samples)
            subject_ids.append(sid)
            indices.append(idx)
            if len(buf) == self.cfg.micro_batch:
                chunks.append(self.process_batch(np.stack(buf)))
                buf = []
        if buf:
            chunks.append(self.process_batch(np.stack(buf)))
        if chunks:
            probs, labels, smoothed, ents = (np.concatenate(parts) for parts in zip(*chunks))
        else:
            probs, labels, smoothed, ents = np.zeros((0, 5)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return AdaptResult(probs, labels, smoothed, ents, self.trace, self.state, subject_ids, indices)


def adapt_stream(model: SleepNet, stream: Iterable, cfg: AdaptConfig | None = None) -> AdaptResult:
    """Adapt `model` in place over one time-ordered stream of epochs."""
    return StreamAdapter(model, cfg).run(stream)


def iter_batches(x: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for i in range(0, len(x), size):
        yield x[i : i + size]
