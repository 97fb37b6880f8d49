"""Definitional brute-force metric implementations used only as test oracles.

Everything here is pure-python loops over explicit definitions: confusion
counts, exhaustive positive/negative pair enumeration for AUROC, threshold
sweeps for average precision, and a hand-rolled linear-interpolation
percentile. Kept independent of the library's vectorized code paths.
"""

from __future__ import annotations

import math


def f1_brute(pred_col, gold_col):
    tp = fp = fn = 0
    for p, g in zip(pred_col, gold_col):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 1:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def macro_f1_brute(pred, gold):
    n_classes = len(pred[0])
    total = 0.0
    for j in range(n_classes):
        total += f1_brute([row[j] for row in pred], [row[j] for row in gold])
    return total / n_classes


def macro_f1_binary_brute(pred_col, gold_col):
    pos = f1_brute(pred_col, gold_col)
    neg = f1_brute([1 - p for p in pred_col], [1 - g for g in gold_col])
    return (pos + neg) / 2.0


def hamming_brute(pred, gold):
    mismatches = 0
    slots = 0
    for prow, grow in zip(pred, gold):
        for p, g in zip(prow, grow):
            slots += 1
            if p != g:
                mismatches += 1
    return mismatches / slots


def subset_accuracy_brute(pred, gold):
    exact = 0
    for prow, grow in zip(pred, gold):
        if all(p == g for p, g in zip(prow, grow)):
            exact += 1
    return exact / len(pred)


def auroc_brute(scores, gold):
    """Exhaustive enumeration of positive/negative pairs; ties count 0.5."""
    pos = [s for s, g in zip(scores, gold) if g == 1]
    neg = [s for s, g in zip(scores, gold) if g == 0]
    if not pos or not neg:
        return math.nan
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def average_precision_brute(scores, gold):
    """Sweep unique thresholds in descending order, summing recall steps."""
    n_pos = sum(gold)
    if n_pos == 0:
        return math.nan
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = sum(1 for s, g in zip(scores, gold) if s >= t and g == 1)
        fp = sum(1 for s, g in zip(scores, gold) if s >= t and g == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def percentile_brute(values, q):
    """Linear-interpolation percentile (q in [0, 100]) of a list."""
    ordered = sorted(values)
    n = len(ordered)
    if n == 1:
        return ordered[0]
    rank = (q / 100.0) * (n - 1)
    lo = int(math.floor(rank))
    hi = int(math.ceil(rank))
    if lo == hi:
        return ordered[lo]
    frac = rank - lo
    return ordered[lo] * (1.0 - frac) + ordered[hi] * frac
