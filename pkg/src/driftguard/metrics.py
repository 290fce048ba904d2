"""Sleep-staging evaluation: confusion, F1 family, kappa, MCC, ECE,
transition matrices and subject-wise aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from driftguard.errors import EmptyInput, LengthMismatch, TooShort
from driftguard.stages import N_STAGES, STAGE_NAMES

# Column order of every metrics table and CSV.
METRIC_KEYS = (
    "accuracy",
    "macro_f1",
    "kappa",
    "weighted_f1",
    "balanced_accuracy",
    "mcc",
    "ece",
)
ECE_BINS = 15


def confusion(y_true, y_pred, n_classes: int = N_STAGES) -> np.ndarray:
    """Counts with rows = true stage, columns = predicted stage."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.shape} vs {p.shape}")
    if t.size == 0:
        raise EmptyInput("no epochs to score")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def row_normalized(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros(cm.shape, dtype=float), where=rows > 0)


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.sum() < 1:
        raise EmptyInput("confusion matrix is empty")
    return cm


def kappa_detail(cm) -> tuple[float, bool]:
    """Cohen's kappa and whether it was degenerate (chance agreement of 1)."""
    cm = _check_cm(cm).astype(np.float64)
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if p_e >= 1.0:
        return 0.0, True
    return float((p_o - p_e) / (1.0 - p_e)), False


def kappa(cm) -> float:
    return kappa_detail(cm)[0]


def mcc_detail(cm) -> tuple[float, bool]:
    cm = _check_cm(cm).astype(np.float64)
    n = cm.sum()
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    cov = n * np.trace(cm) - rows @ cols
    var_t = n * n - rows @ rows
    var_p = n * n - cols @ cols
    if var_t == 0 or var_p == 0:
        return 0.0, True
    return float(cov / math.sqrt(var_t * var_p)), False


def mcc(cm) -> float:
    """Multiclass Matthews correlation; 0 when either margin has no spread."""
    return mcc_detail(cm)[0]


@dataclass
class F1Suite:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    weighted_f1: float
    balanced_accuracy: float
    excluded: list[int]


def f1_suite(cm) -> F1Suite:
    """One-vs-rest precision/recall/F1 plus macro, weighted and balanced means.

    Stages absent from the ground truth are left out of the macro F1 and
    balanced-accuracy means; their indices are listed in ``excluded``.
    """
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = support > 0
    return F1Suite(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
        macro_f1=float(f1[present].mean()),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        balanced_accuracy=float(recall[present].mean()),
        excluded=[int(i) for i in np.flatnonzero(~present)],
    )


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {
                "bin": m,
                "lo": float(self.edges[m]),
                "hi": float(self.edges[m + 1]),
                "count": int(self.counts[m]),
                "confidence": float(self.confidence[m]),
                "accuracy": float(self.accuracy[m]),
            }
            for m in range(len(self.counts))
        ]


def ece(confidences, correct, n_bins: int = ECE_BINS) -> tuple[float, ReliabilityBins]:
    """Expected calibration error over uniform bins ((m-1)/M, m/M]."""
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    if conf.size == 0:
        raise EmptyInput("no predictions")
    if conf.shape != ok.shape:
        raise LengthMismatch(f"{conf.shape} vs {ok.shape}")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=ok.astype(float), minlength=n_bins)
    nz = counts > 0
    mean_conf = np.divide(conf_sum, counts, out=np.zeros(n_bins), where=nz)
    mean_acc = np.divide(acc_sum, counts, out=np.zeros(n_bins), where=nz)
    value = float(np.sum(counts[nz] / conf.size * np.abs(mean_acc[nz] - mean_conf[nz])))
    return value, ReliabilityBins(edges, counts, mean_conf, mean_acc)


def transition_matrix(labels, n_classes: int = N_STAGES) -> np.ndarray:
    """Empirical P(next = j | current = i); unvisited rows stay zero."""
    seq = np.asarray(labels, dtype=np.int64)
    if seq.size < 2:
        raise TooShort("need at least two labels")
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (seq[:-1], seq[1:]), 1)
    return row_normalized(counts)


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    balanced_accuracy: float
    kappa: float
    mcc: float
    ece: float
    per_stage: dict[str, dict[str, float]]
    confusion: np.ndarray
    n_epochs: int
    reliability: ReliabilityBins | None = None
    flags: list[str] = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        out = {
            "metrics": self.scalars(),
            "per_stage": self.per_stage,
            "confusion": self.confusion.tolist(),
            "n_epochs": int(self.n_epochs),
            "flags": list(self.flags),
        }
        if self.reliability is not None:
            out["reliability"] = self.reliability.rows()
        return out


def evaluate(y_true, y_pred, confidences=None, n_bins: int = ECE_BINS) -> MetricsReport:
    """Score one subject (or pooled set). Excluded epochs must be removed first."""
    cm = confusion(y_true, y_pred)
    suite = f1_suite(cm)
    k, k_deg = kappa_detail(cm)
    m, m_deg = mcc_detail(cm)
    flags = []
    if suite.excluded:
        flags.append("absent_stages:" + ",".join(STAGE_NAMES[i] for i in suite.excluded))
    if k_deg:
        flags.append("kappa_degenerate")
    if m_deg:
        flags.append("mcc_degenerate")
    correct = np.asarray(y_true) == np.asarray(y_pred)
    if confidences is None:
        confidences = np.ones(len(correct))
    e, bins = ece(confidences, correct, n_bins)
    per_stage = {
        name: {
            "precision": float(suite.precision[i]),
            "recall": float(suite.recall[i]),
            "f1": float(suite.f1[i]),
            "support": int(suite.support[i]),
        }
        for i, name in enumerate(STAGE_NAMES)
    }
    return MetricsReport(
        accuracy=float(np.trace(cm) / cm.sum()),
        macro_f1=suite.macro_f1,
        weighted_f1=suite.weighted_f1,
        balanced_accuracy=suite.balanced_accuracy,
        kappa=k,
        mcc=m,
        ece=e,
        per_stage=per_stage,
        confusion=cm,
        n_epochs=int(cm.sum()),
        reliability=bins,
        flags=flags,
    )


@dataclass
class AggregateReport:
    means: dict[str, float]
    per_subject: dict[str, dict[str, float]]
    pooled_confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "metrics": dict(self.means),
            "per_subject": {k: dict(v) for k, v in self.per_subject.items()},
            "confusion": self.pooled_confusion.tolist(),
            "n_subjects": len(self.per_subject),
        }


def aggregate_subjects(reports: Mapping[str, MetricsReport] | Sequence[MetricsReport]) -> AggregateReport:
    """Unweighted mean of each scalar metric across subjects."""
    if not isinstance(reports, Mapping):
        reports = {str(i): r for i, r in enumerate(reports)}
    if not reports:
        raise EmptyInput("no subject reports")
    per_subject = {sid: r.scalars() for sid, r in reports.items()}
    means = {k: float(np.mean([s[k] for s in per_subject.values()])) for k in METRIC_KEYS}
    pooled = sum(r.confusion for r in reports.values())
    return AggregateReport(means, per_subject, pooled)


def matrix_csv(matrix: np.ndarray, labels: Sequence[str] = STAGE_NAMES) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(labels))
    for name, row in zip(labels, matrix):
        w.writerow([name] + [repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])
    return buf.getvalue()
