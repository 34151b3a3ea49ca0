"""ACC / AUROC / H-score."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


def accuracy(preds, labels, id_flags) -> float | None:
    """Top-1 accuracy over ID samples only; None when there are none."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    ids = np.asarray(id_flags, dtype=bool)
    if preds.shape != labels.shape or labels.shape != ids.shape:
        raise ValueError("accuracy: inputs must be aligned")
    if not ids.any():
        return None
    return float(np.mean(preds[ids] == labels[ids]))


def auroc(scores, ood_flags) -> float | None:
    """P(score_ood > score_id) with ties counted 1/2 (Mann-Whitney U / (n_ood n_id)).

    Returns None if either class is absent.
    """
    s = np.asarray(scores, dtype=float)
    pos = np.asarray(ood_flags, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce(scores, ood_flags) -> float | None:
    s = np.asarray(scores, dtype=float)
    pos = np.asarray(ood_flags, dtype=bool)
    P, N = s[pos], s[~pos]
    if P.size == 0 or N.size == 0:
        return None
    total = 0.0
    for a in P:
        for b in N:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (P.size * N.size)


def h_score(acc: float, auc: float) -> float:
    """Harmonic mean of accuracy and AUROC (0 when both are 0)."""
    if acc + auc == 0:
        return 0.0
    return 2.0 * acc * auc / (acc + auc)


@dataclass
class MetricsSummary:
    acc: float | None
    auroc: float | None
    h_score: float | None

    @classmethod
    def from_arrays(cls, preds, labels, scores, is_ood) -> "MetricsSummary":
        is_ood = np.asarray(is_ood, dtype=bool)
        acc = accuracy(preds, labels, ~is_ood)
        auc = auroc(scores, is_ood)
        h = None if acc is None or auc is None else h_score(acc, auc)
        return cls(acc, auc, h)

    def to_dict(self) -> dict:
        return asdict(self)
