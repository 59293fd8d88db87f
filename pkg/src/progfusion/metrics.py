"""Binary-classifier evaluation: exact AUC, ROC points, confusion metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .kernels import auc_pair_count

PAIRWISE_LIMIT = 10_000  # above this, switch to the rank-based formula


@dataclass
class RocResult:
    auc: float
    # (threshold, fpr, tpr) rows; first row is the (inf, 0, 0) anchor,
    # then one row per distinct score, descending.
    points: list[tuple[float, float, float]]


def _split_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"scores/labels length mismatch: {s.shape} vs {y.shape}")
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError("roc_auc needs both classes present")
    return pos, neg


def roc_auc(scores, labels) -> RocResult:
    """Exact AUC = P(score_pos > score_neg) + ½·P(tie), plus the ROC polyline.

    Pairwise counting up to 10k samples, midrank formula beyond that; the
    two agree exactly because both implement the same tie convention.
    """
    pos, neg = _split_scores(scores, labels)
    np_, nn = len(pos), len(neg)
    if np_ + nn <= PAIRWISE_LIMIT:
        greater, ties = auc_pair_count(pos, neg)
        auc = (greater + 0.5 * ties) / (np_ * nn)
    else:
        both = np.concatenate([pos, neg])
        order = np.argsort(both, kind="stable")
        ranks = np.empty(len(both))
        sorted_vals = both[order]
        # midranks: average rank over each tie group (1-indexed)
        i = 0
        while i < len(both):
            j = i
            while j + 1 < len(both) and sorted_vals[j + 1] == sorted_vals[i]:
                j += 1
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        r_pos = ranks[:np_].sum()
        auc = (r_pos - np_ * (np_ + 1) / 2.0) / (np_ * nn)

    s = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(np_), np.zeros(nn)])
    points = [(float("inf"), 0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        hit = s >= thr
        tpr = float(hit[y == 1].mean())
        fpr = float(hit[y == 0].mean())
        points.append((float(thr), fpr, tpr))
    return RocResult(float(auc), points)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    """Accuracy / sensitivity / specificity at ``score >= threshold``.

    Positive class is true progression (label 1), so sensitivity counts
    detected progressions and specificity counts recognized
    pseudoprogressions.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if not ((y == 1).any() and (y == 0).any()):
        raise ContractError("confusion_metrics needs both classes present")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    return {
        "accuracy": (tp + tn) / len(y),
        "sensitivity": tp / n_pos,
        "specificity": tn / n_neg,
    }
