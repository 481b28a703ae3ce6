"""Accuracy, pooled one-vs-rest EER, minimum Cavg and confusion matrices.

Conventions (fixed for reproducibility):

* decisions are the argmax posterior, ties resolved to the lowest class index;
* EER sweeps every distinct trial score ``t``; a target is missed when its
  score is below ``t``, a non-target is a false alarm when its score is at or
  above ``t``; the reported value is ``(P_miss + P_fa) / 2`` at the smallest
  ``t`` minimising ``|P_miss - P_fa|``;
* Cavg uses C_miss = C_fa = 1, P_target = 0.5 and the detection score
  ``log o_c - log(mean of the other classes' o)``, accepting when the score
  is at or above the threshold.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

P_TARGET = 0.5
DET_FLOOR = 1e-30


class MetricError(ValueError):
    pass


@dataclass
class TrialSet:
    scores: np.ndarray
    is_target: np.ndarray
    utt_ids: list = field(default_factory=list)
    classes: np.ndarray = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape or self.scores.ndim != 1:
            raise MetricError("scores and target flags must be equal-length vectors")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("trial scores must be finite")


def pooled_trials(posteriors, labels, utt_ids=None):
    """One trial per (utterance, class); score is the class posterior."""
    P = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, L = P.shape
    target = np.zeros((n, L), dtype=bool)
    target[np.arange(n), labels] = True
    ids = [] if utt_ids is None else [u for u in utt_ids for _ in range(L)]
    return TrialSet(P.reshape(-1), target.reshape(-1), ids, np.tile(np.arange(L), n))


def decisions(posteriors):
    return np.argmax(np.asarray(posteriors), axis=1)


def accuracy(posteriors, labels):
    P = np.asarray(posteriors)
    labels = np.asarray(labels)
    if labels.shape[0] != P.shape[0]:
        raise MetricError(f"{P.shape[0]} score rows but {labels.shape[0]} reference labels")
    if P.shape[0] == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean(decisions(P) == labels))


def eer(trials):
    tar = np.sort(trials.scores[trials.is_target])
    non = np.sort(trials.scores[~trials.is_target])
    if tar.size == 0 or non.size == 0:
        raise MetricError("EER needs at least one target and one non-target trial")
    thresholds = np.unique(trials.scores)
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    i = int(np.argmin(np.abs(p_miss - p_fa)))  # first minimum = smallest threshold
    return float((p_miss[i] + p_fa[i]) / 2)


def detection_scores(posteriors):
    """(n, L) log-odds-style score of each class against the mean of the rest."""
    P = np.maximum(np.asarray(posteriors, dtype=np.float64), DET_FLOOR)
    L = P.shape[1]
    # exactly rounded sums keep tied scores tied whatever the column order
    rows = P.tolist()
    others = np.array([[math.fsum(row[:c] + row[c + 1:]) for c in range(L)] for row in rows]) / (L - 1)
    return np.log(P) - np.log(np.maximum(others, DET_FLOOR))


def cavg_curve(posteriors, labels):
    """Return (thresholds, Cavg at each threshold); Cavg not scaled."""
    S = detection_scores(posteriors)
    labels = np.asarray(labels, dtype=np.int64)
    n, L = S.shape
    if L < 2:
        raise MetricError("Cavg needs at least 2 classes")
    counts = np.bincount(labels, minlength=L)
    if np.any(counts == 0):
        absent = [int(c) for c in np.flatnonzero(counts == 0)]
        raise MetricError(f"classes {absent} absent from the reference labels")
    thresholds = np.unique(S)
    cost = np.zeros_like(thresholds)
    for lt in range(L):
        # sorted scores of detector lt, split by the utterances' true class
        by_class = [np.sort(S[labels == ln, lt]) for ln in range(L)]
        miss = np.searchsorted(by_class[lt], thresholds, side="left") / counts[lt]
        fa_sum = np.zeros_like(thresholds)
        for ln in range(L):
            if ln == lt:
                continue
            fa_sum = fa_sum + (counts[ln] - np.searchsorted(by_class[ln], thresholds, side="left")) / counts[ln]
        cost = cost + (P_TARGET * miss + (1 - P_TARGET) / (L - 1) * fa_sum)
    return thresholds, cost / L


def min_cavg(posteriors, labels):
    """Minimum Cavg over all distinct detection-score thresholds, times 100."""
    _, cost = cavg_curve(posteriors, labels)
    return float(np.min(cost) * 100)


def confusion(posteriors, labels, n_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    P = np.asarray(posteriors)
    L = n_classes or P.shape[1]
    M = np.zeros((L, L), dtype=np.int64)
    np.add.at(M, (labels, decisions(P)), 1)
    return M


def confusion_text(M, label_names):
    width = max(6, *(len(n) for n in label_names))
    head = " " * width + " | " + " ".join(f"{n:>{width}}" for n in label_names)
    lines = [head, "-" * len(head)]
    for name, row in zip(label_names, M):
        lines.append(f"{name:>{width}} | " + " ".join(f"{v:>{width}d}" for v in row))
    return "\n".join(lines)


def confusion_csv(M, label_names):
    lines = ["reference," + ",".join(label_names)]
    for name, row in zip(label_names, M):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    accuracy: float
    eer: float
    min_cavg_x100: float
    confusion: np.ndarray
    label_names: list

    def to_json(self):
        return json.dumps({
            "accuracy": self.accuracy,
            "eer": self.eer,
            "min_cavg_x100": self.min_cavg_x100,
            "confusion": self.confusion.tolist(),
            "labels": self.label_names,
        }, indent=2) + "\n"

    def to_text(self):
        return (
            f"accuracy      {100 * self.accuracy:.2f} %\n"
            f"EER           {100 * self.eer:.2f} %\n"
            f"min Cavg*100  {self.min_cavg_x100:.2f}\n\n"
            + confusion_text(self.confusion, self.label_names) + "\n"
        )


def evaluate(posteriors, labels, label_names):
    P = np.asarray(posteriors, dtype=np.float64)
    return EvalReport(
        accuracy=accuracy(P, labels),
        eer=eer(pooled_trials(P, labels)),
        min_cavg_x100=min_cavg(P, labels),
        confusion=confusion(P, labels, len(label_names)),
        label_names=list(label_names),
    )
