"""Binary classification metrics and the per-model report row."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, PairingError

CSV_HEADER = ("task", "model", "loss", "sensitivity", "specificity", "aupr", "auroc", "p_value")


@dataclass(frozen=True)
class ScoredPredictions:
    scores: np.ndarray
    labels: np.ndarray
    model_name: str = ""
    task_name: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.shape != labels.shape:
            raise PairingError(f"{scores.size} scores but {labels.size} labels")
        if not np.all((labels == 0) | (labels == 1)):
            raise DomainError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def _need_both(self, what: str) -> None:
        if self.n_pos == 0 or self.n_neg == 0:
            raise DomainError(f"{what} needs both classes; got {self.n_pos} pos / {self.n_neg} neg")


def auroc(pred: ScoredPredictions) -> float:
    """Mann-Whitney U / (P * N), ties counted one half."""
    pred._need_both("auroc")
    ranks = rankdata(pred.scores)  # midranks for ties
    p, n = pred.n_pos, pred.n_neg
    u = ranks[pred.labels == 1].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def _cuts(pred: ScoredPredictions):
    """Cumulative (TP, FP) at each distinct score, thresholds descending."""
    order = np.argsort(-pred.scores, kind="stable")
    s = pred.scores[order]
    y = pred.labels[order].astype(np.int64)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def aupr(pred: ScoredPredictions) -> float:
    """Average precision: sum of precision x recall increment over descending cuts.

    Tied scores form a single cut.
    """
    if pred.n_pos == 0:
        raise DomainError("aupr needs at least one positive")
    _, tp, fp = _cuts(pred)
    precision = tp / (tp + fp)
    d_recall = np.diff(np.r_[0, tp]) / pred.n_pos
    return float(np.sum(precision * d_recall))


def sens_spec_at(pred: ScoredPredictions, threshold: float | None = None) -> tuple[float, float, float]:
    """Sensitivity and specificity with ``score >= threshold`` called positive.

    ``threshold=None`` selects Youden's J over the observed scores, breaking
    ties toward the lowest threshold. Returns (sensitivity, specificity, threshold).
    """
    pred._need_both("sens_spec_at")
    p, n = pred.n_pos, pred.n_neg
    if threshold is not None:
        called = pred.scores >= threshold
        tp = int(np.sum(called & (pred.labels == 1)))
        tn = int(np.sum(~called & (pred.labels == 0)))
        return tp / p, tn / n, float(threshold)
    thresholds, tp, fp = _cuts(pred)
    tn = n - fp
    j = tp * n + tn * p  # Youden's J scaled by P*N, exact in integers
    best = np.flatnonzero(j == j.max())
    k = best[np.argmin(thresholds[best])]
    return float(tp[k] / p), float(tn[k] / n), float(thresholds[k])


@dataclass(frozen=True)
class EvalReport:
    task: str
    model: str
    loss: float
    sensitivity: float
    specificity: float
    aupr: float
    auroc: float
    p_value: float | None = None

    def __post_init__(self):
        for name in ("sensitivity", "specificity", "aupr", "auroc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name}={v} outside [0, 1]")
        if not (self.loss >= 0 and math.isfinite(self.loss)):
            raise DomainError(f"loss={self.loss} must be finite and nonnegative")
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise DomainError(f"p_value={self.p_value} outside [0, 1]")

    def row(self) -> list[str]:
        return [
            self.task,
            self.model,
            f"{self.loss:.4f}",
            f"{100 * self.sensitivity:.2f}",
            f"{100 * self.specificity:.2f}",
            f"{self.aupr:.4f}",
            f"{self.auroc:.4f}",
            "" if self.p_value is None else f"{self.p_value:.4f}",
        ]


def evaluate(pred: ScoredPredictions, loss: float, threshold: float | None = None,
             p_value: float | None = None) -> EvalReport:
    sens, spec, _ = sens_spec_at(pred, threshold)
    return EvalReport(pred.task_name, pred.model_name, loss, sens, spec, aupr(pred), auroc(pred), p_value)


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_metrics_csv(reports, path) -> None:
    Path(path).write_text(metrics_csv(reports), encoding="utf-8")


def read_metrics_csv(path) -> list[EvalReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise DomainError(f"unexpected metrics header {header}")
        out = []
        for row in reader:
            task, model, loss, sens, spec, ap, auc, p = row
            out.append(EvalReport(task, model, float(loss), float(sens) / 100, float(spec) / 100,
                                  float(ap), float(auc), float(p) if p else None))
    return out
