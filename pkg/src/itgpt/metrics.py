"""Classification metrics on scored predictions.

Undefined quantities (a class without positives, a zero denominator) are
reported as ``None`` and never silently replaced by 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np


@dataclass
class ScoredPredictions:
    scores: np.ndarray  # n x d_c
    truths: np.ndarray  # n
    exclude: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = self.scores[:, None]
        self.truths = np.asarray(self.truths, dtype=np.int64).reshape(-1)
        if self.scores.shape[0] != self.truths.size:
            raise ValueError("scores and truths differ in length")
        if self.truths.size and (self.truths.min() < 0 or self.truths.max() >= self.n_classes):
            raise ValueError("truth outside [0, n_classes)")
        if self.exclude is not None:
            self.exclude = np.asarray(self.exclude, dtype=bool).reshape(-1)

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    def included(self) -> tuple[np.ndarray, np.ndarray]:
        if self.exclude is None:
            return self.scores, self.truths
        keep = ~self.exclude
        return self.scores[keep], self.truths[keep]


class AuprcReport(NamedTuple):
    macro: float | None
    per_class: dict[int, float | None]
    undefined: list[int]


def _average_precision_exact(scores, positives) -> Fraction | None:
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_e, fp_e = tp[ends].tolist(), fp[ends].tolist()
    prev = [0] + tp_e[:-1]
    # group the precision terms by denominator before going rational
    by_den: dict[int, int] = {}
    for t, q, f in zip(tp_e, prev, fp_e):
        if t != q:
            by_den[t + f] = by_den.get(t + f, 0) + (t - q) * t
    return sum((Fraction(num, den) for den, num in by_den.items()), Fraction(0)) / n_pos


def average_precision(scores, positives) -> float | None:
    """Step-form area under the precision-recall curve.

    Tied scores form one threshold. The sum is carried out in exact
    rational arithmetic and rounded once. ``None`` when there are no
    positives.
    """
    ap = _average_precision_exact(scores, positives)
    return None if ap is None else float(ap)


def auprc_macro_ovr(preds: ScoredPredictions) -> AuprcReport:
    scores, truths = preds.included()
    exact = {c: _average_precision_exact(scores[:, c], truths == c) for c in range(preds.n_classes)}
    per_class = {c: None if v is None else float(v) for c, v in exact.items()}
    defined = [v for v in exact.values() if v is not None]
    undefined = [c for c, v in exact.items() if v is None]
    macro = float(sum(defined, Fraction(0)) / len(defined)) if defined else None
    return AuprcReport(macro, per_class, undefined)


def auroc(preds: ScoredPredictions, positive_class: int = 1) -> float:
    """Probability a random positive outscores a random negative; ties count 1/2."""
    scores, truths = preds.included()
    s = scores[:, positive_class]
    pos = truths == positive_class
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative row")
    neg_sorted = np.sort(s[~pos])
    below = np.searchsorted(neg_sorted, s[pos], side="left")
    not_above = np.searchsorted(neg_sorted, s[pos], side="right")
    # twice the Mann-Whitney count keeps everything integral
    twice = int(2 * below.sum() + (not_above - below).sum())
    return twice / (2 * n_pos * n_neg)


class ThresholdReport(NamedTuple):
    recall: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    confusion: np.ndarray  # [[TP, FN], [FP, TN]]


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def rates_from_counts(tp: int, fn: int, fp: int, tn: int) -> ThresholdReport:
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    precision = _ratio(tp, tp + fp)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return ThresholdReport(recall, specificity, precision, f1, np.array([[tp, fn], [fp, tn]], dtype=np.int64))


def threshold_metrics(preds: ScoredPredictions, positive_class: int = 1, threshold: float = 0.5) -> ThresholdReport:
    """Rows scoring ``>= threshold`` for ``positive_class`` are predicted positive."""
    scores, truths = preds.included()
    predicted = scores[:, positive_class] >= threshold
    actual = truths == positive_class
    tp = int(np.sum(predicted & actual))
    fn = int(np.sum(~predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    return rates_from_counts(tp, fn, fp, tn)


def confusion_matrix(preds: ScoredPredictions) -> np.ndarray:
    """Rows are true classes, columns argmax predictions (ties go to the lowest index)."""
    scores, truths = preds.included()
    out = np.zeros((preds.n_classes, preds.n_classes), dtype=np.int64)
    if truths.size:
        np.add.at(out, (truths, np.argmax(scores, axis=1)), 1)
    return out


def summarize(preds: ScoredPredictions, threshold: float = 0.5) -> dict[str, float | None]:
    """Flat metric dictionary used in results tables.

    Binary tasks report class-1 AUROC and threshold metrics; multiclass
    tasks report their one-vs-rest macro averages over defined classes.
    """
    out: dict[str, float | None] = {}
    report = auprc_macro_ovr(preds)
    out["auprc"] = report.macro
    _, truths = preds.included()
    classes = [1] if preds.n_classes == 2 else list(range(preds.n_classes))
    per = {k: [] for k in ("auroc", "recall", "specificity", "f1")}
    for c in classes:
        present = truths == c
        if present.any() and (~present).any():
            per["auroc"].append(auroc(preds, c))
        th = threshold_metrics(preds, c, threshold)
        for k in ("recall", "specificity", "f1"):
            v = getattr(th, k)
            if v is not None:
                per[k].append(v)
    for k, vals in per.items():
        out[k] = math.fsum(vals) / len(vals) if vals else None
    return out
