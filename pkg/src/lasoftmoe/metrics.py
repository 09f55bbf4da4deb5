"""Presentation-attack detection metrics.

Scores are liveness probabilities; label 1 is live (bona fide), 0 is attack.
A sample is accepted as live when ``score >= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

FIELDS = ("acer", "apcer", "bpcer", "acc", "auc", "eer", "threshold", "n_live", "n_attack")


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise MetricError("scores and labels must be parallel")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class MetricsReport:
    acer: float
    apcer: float
    bpcer: float
    acc: float
    auc: float | None
    eer: float | None
    threshold: float
    n_live: int
    n_attack: int
    policy: str = "fixed"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in FIELDS}, policy=d.get("policy", "fixed"))


def error_counts(scores: ScoreSet, threshold: float) -> tuple[int, int, int, int]:
    """(accepted attacks, attacks, rejected live, live) at ``threshold``."""
    live = scores.scores[scores.labels == 1]
    attack = scores.scores[scores.labels == 0]
    return int(np.sum(attack >= threshold)), attack.size, int(np.sum(live < threshold)), live.size


def error_rates(scores: ScoreSet, threshold: float) -> tuple[float, float]:
    """(APCER, BPCER) at ``threshold``; a rate is NaN when its class is absent."""
    fa, n_attack, fr, n_live = error_counts(scores, threshold)
    apcer = fa / n_attack if n_attack else math.nan
    bpcer = fr / n_live if n_live else math.nan
    return apcer, bpcer


def auc(scores: ScoreSet) -> float:
    """Mann-Whitney rank formula with mid-ranks for ties."""
    pos = scores.labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if not n1 or not n0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores.scores)  # average ranks, exact halves
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_points(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR (attacks accepted) and FRR (live rejected) at every distinct threshold,
    plus the two end points, ordered by increasing threshold."""
    live = np.sort(scores.scores[scores.labels == 1])
    attack = np.sort(scores.scores[scores.labels == 0])
    if not live.size or not attack.size:
        raise MetricError("ROC needs both classes")
    thresholds = np.unique(scores.scores)
    far = 1.0 - np.searchsorted(attack, thresholds, side="left") / attack.size
    frr = np.searchsorted(live, thresholds, side="left") / live.size
    thresholds = np.concatenate([thresholds, [np.inf]])
    far = np.concatenate([far, [0.0]])
    frr = np.concatenate([frr, [1.0]])
    return thresholds, far, frr


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and a threshold achieving it.

    FAR falls and FRR rises with the threshold; the rate is read where the
    two curves cross, interpolating linearly between adjacent ROC points.
    """
    thr, far, frr = roc_points(scores)
    diff = far - frr
    exact = np.flatnonzero(diff == 0)
    if exact.size:
        i = exact[0]
        return float(far[i]), float(thr[i])
    i = int(np.flatnonzero(diff < 0)[0])  # first point past the crossing; diff[0] = 1 > 0
    d0, d1 = diff[i - 1], diff[i]
    alpha = d0 / (d0 - d1)
    rate = far[i - 1] + alpha * (far[i] - far[i - 1])
    hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    return float(rate), float(thr[i - 1] + alpha * (hi - thr[i - 1]))


def compute_metrics(scores: ScoreSet, threshold: float = 0.5, policy: str = "fixed") -> MetricsReport:
    """ACER/APCER/BPCER/ACC at ``threshold`` plus threshold-free AUC and EER.

    With a single class present a MetricError is raised; its ``partial``
    attribute still carries the threshold metrics.
    """
    fa, n_attack, fr, n_live = error_counts(scores, threshold)
    # rates are exact rationals rounded once, so hand-countable cases come out exact
    apcer = Fraction(fa, n_attack) if n_attack else Fraction(0)  # an absent class contributes no error
    bpcer = Fraction(fr, n_live) if n_live else Fraction(0)
    acc = Fraction(len(scores) - fa - fr, len(scores)) if len(scores) else math.nan
    report = MetricsReport(
        float((apcer + bpcer) / 2), float(apcer), float(bpcer), float(acc), None, None, float(threshold), n_live, n_attack, policy
    )
    if not (n_live and n_attack):
        err = MetricError(f"AUC/EER need both labels (live={n_live}, attack={n_attack})")
        err.partial = report
        raise err
    report.auc = auc(scores)
    report.eer = eer(scores)[0]
    return report


def eer_threshold(scores: ScoreSet) -> float:
    return eer(scores)[1]
