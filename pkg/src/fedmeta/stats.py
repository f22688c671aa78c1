"""Paired bootstrap comparison of two models' AUROC with a t-test on the replicates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import DomainError, PairingError
from .metrics import ScoredPredictions, auroc

ALPHA = 0.05
MAX_REDRAWS = 100


@dataclass(frozen=True)
class ComparisonResult:
    auroc_a: float
    auroc_b: float
    bootstrap_diffs: np.ndarray
    t_statistic: float
    p_value: float
    significant: bool

    def __eq__(self, other):
        if not isinstance(other, ComparisonResult):
            return NotImplemented
        return (self.auroc_a == other.auroc_a and self.auroc_b == other.auroc_b
                and np.array_equal(self.bootstrap_diffs, other.bootstrap_diffs)
                and _same(self.t_statistic, other.t_statistic)
                and self.p_value == other.p_value and self.significant == other.significant)

    def to_dict(self) -> dict:
        return {
            "auroc_a": self.auroc_a,
            "auroc_b": self.auroc_b,
            "t_statistic": self.t_statistic if math.isfinite(self.t_statistic) else None,
            "p_value": self.p_value,
            "significant": self.significant,
            "replicates": int(self.bootstrap_diffs.size),
        }


def _same(x: float, y: float) -> bool:
    return x == y or (math.isnan(x) and math.isnan(y))


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided Student's t p-value via the regularized incomplete beta function."""
    if df < 1:
        raise DomainError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return float(min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t))))


def _replicate_indices(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    n = labels.size
    for _ in range(MAX_REDRAWS):
        idx = rng.integers(0, n, size=n)
        drawn = labels[idx]
        if 0 < drawn.sum() < n:
            return idx
    raise DomainError(f"no two-class bootstrap resample in {MAX_REDRAWS} draws")


def compare_bootstrap_ttest(a: ScoredPredictions, b: ScoredPredictions, replicates: int = 1000,
                            seed: int = 0) -> ComparisonResult:
    """Bootstrap AUROC(a) - AUROC(b) with shared case resamples, then t-test the mean.

    Replicate ``i`` draws from ``default_rng([seed, i])``, so the result does
    not depend on evaluation order. ``t = mean(d) / (sd(d) / sqrt(replicates))``
    with ``replicates - 1`` degrees of freedom.
    """
    if a.scores.size != b.scores.size:
        raise PairingError(f"unpaired inputs: {a.scores.size} vs {b.scores.size} samples")
    if not np.array_equal(a.labels, b.labels):
        raise PairingError("paired predictions must share labels in the same order")
    if replicates < 2:
        raise DomainError("need at least 2 bootstrap replicates")
    labels = a.labels
    diffs = np.empty(replicates, dtype=np.float64)
    for i in range(replicates):
        idx = _replicate_indices(np.random.default_rng([seed, i]), labels)
        ra = ScoredPredictions(a.scores[idx], labels[idx])
        rb = ScoredPredictions(b.scores[idx], labels[idx])
        diffs[i] = auroc(ra) - auroc(rb)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        p = 1.0 if mean == 0.0 else 0.0
    else:
        t = mean / (sd / math.sqrt(replicates))
        p = t_two_sided_p(t, replicates - 1)
    return ComparisonResult(auroc(a), auroc(b), diffs, t, p, p < ALPHA)


def bootstrap_se_p_value(result: ComparisonResult) -> float:
    """Supplementary two-sided p using sd(d) itself as the standard error.

    The replicate spread already estimates the sampling error of the AUROC
    difference, so this variant does not shrink it by sqrt(replicates).
    Reported next to ``result.p_value``; never replaces it.
    """
    d = result.bootstrap_diffs
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    return t_two_sided_p(mean / sd, d.size - 1)
