"""Evaluation metrics with bootstrap confidence intervals.

Every model family is scored through these functions so results stay directly
comparable. F1 zero-division rule: a class with no positive gold labels and no
positive predictions scores F1 = 1; any other empty denominator scores 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

ZERO_DIVISION_NOTE = (
    "F1 zero-division rule: empty-pred/empty-gold class scores 1, "
    "any other empty denominator scores 0. Intervals are percentile "
    "bootstrap over case-level resamples."
)


def _as_binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must contain only 0/1 entries")
    return arr.astype(np.int64)


def _check_pair(pred, gold, name_a="pred", name_b="gold"):
    a = np.asarray(pred)
    b = np.asarray(gold)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {name_a} {a.shape} vs {name_b} {b.shape}")
    return a, b


def _f1_from_counts(tp: float, fp: float, fn: float) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _column_f1(pred_col: np.ndarray, gold_col: np.ndarray) -> float:
    tp = int(np.sum((pred_col == 1) & (gold_col == 1)))
    fp = int(np.sum((pred_col == 1) & (gold_col == 0)))
    fn = int(np.sum((pred_col == 0) & (gold_col == 1)))
    return _f1_from_counts(tp, fp, fn)


def macro_f1(pred, gold, mode: str = "over_labels") -> float:
    """Macro-averaged F1.

    ``over_labels``: mean of per-class F1 across the label columns of a
    multi-label matrix. ``over_binary_classes``: mean of the positive-class
    and negative-class F1 of a single binary task (1-D input).
    """
    pred, gold = _check_pair(pred, gold)
    pred = _as_binary(pred, "pred")
    gold = _as_binary(gold, "gold")
    if mode == "over_labels":
        if pred.ndim == 1:
            pred = pred[:, None]
            gold = gold[:, None]
        return float(np.mean([_column_f1(pred[:, j], gold[:, j]) for j in range(pred.shape[1])]))
    if mode == "over_binary_classes":
        if pred.ndim != 1:
            if pred.ndim == 2 and pred.shape[1] == 1:
                pred, gold = pred[:, 0], gold[:, 0]
            else:
                raise ValidationError("over_binary_classes requires a single binary task")
        pos = _column_f1(pred, gold)
        neg = _column_f1(1 - pred, 1 - gold)
        return float((pos + neg) / 2.0)
    raise ValidationError(f"unknown macro F1 mode: {mode!r}")


def hamming_loss(pred, gold) -> float:
    """Fraction of label slots where prediction and gold disagree."""
    pred, gold = _check_pair(pred, gold)
    pred = _as_binary(pred, "pred")
    gold = _as_binary(gold, "gold")
    if pred.size == 0:
        raise ValidationError("hamming_loss on empty input")
    return float(np.mean(pred != gold))


def subset_accuracy(pred, gold) -> float:
    """Fraction of rows where every label matches."""
    pred, gold = _check_pair(pred, gold)
    pred = _as_binary(pred, "pred")
    gold = _as_binary(gold, "gold")
    if pred.ndim == 1:
        pred = pred[:, None]
        gold = gold[:, None]
    if pred.shape[0] == 0:
        raise ValidationError("subset_accuracy on empty input")
    return float(np.mean(np.all(pred == gold, axis=1)))


def binary_auroc(scores, gold) -> float:
    """AUROC for one class via the midrank statistic; NaN if gold is single-valued."""
    scores, gold = _check_pair(scores, gold, "scores", "gold")
    gold = _as_binary(gold, "gold")
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(gold.sum())
    n_neg = int(gold.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    midranks = (cum - counts) + (counts + 1) / 2.0
    ranks = midranks[inverse]
    u = ranks[gold == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_average_precision(scores, gold) -> float:
    """Average precision (precision-weighted recall increments); NaN without positives."""
    scores, gold = _check_pair(scores, gold, "scores", "gold")
    gold = _as_binary(gold, "gold")
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(gold.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    g = gold[order]
    s = scores[order]
    # threshold at the last index of each run of equal scores
    cut = np.append(np.where(np.diff(s) != 0)[0], len(s) - 1)
    tp = np.cumsum(g)[cut].astype(np.float64)
    fp = (cut + 1) - tp
    recall = tp / n_pos
    precision = tp / (tp + fp)
    increments = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(increments * precision))


@dataclass
class RankingResult:
    macro_auroc: float
    macro_ap: float
    per_class_auroc: dict[str, float]
    per_class_ap: dict[str, float]
    skipped_classes: list[str]
    micro_auroc: float


def ranking_metrics(scores, gold, class_names: list[str] | None = None) -> RankingResult:
    """Per-class AUROC/AP, macro over classes with both a positive and a negative.

    Classes with single-valued gold are skipped with a warning and listed in
    the result. ``micro_auroc`` pools every label slot into one ranking.
    """
    scores, gold = _check_pair(scores, gold, "scores", "gold")
    scores = np.asarray(scores, dtype=np.float64)
    gold = _as_binary(gold, "gold")
    if scores.ndim == 1:
        scores = scores[:, None]
        gold = gold[:, None]
    n_classes = scores.shape[1]
    if class_names is None:
        class_names = [f"class_{j}" for j in range(n_classes)]
    per_auroc: dict[str, float] = {}
    per_ap: dict[str, float] = {}
    skipped: list[str] = []
    for j, name in enumerate(class_names):
        col = gold[:, j]
        if col.size == 0 or col.min() == col.max():
            skipped.append(name)
            continue
        per_auroc[name] = binary_auroc(scores[:, j], col)
        per_ap[name] = binary_average_precision(scores[:, j], col)
    if skipped:
        logger.warning("ranking metrics skipped single-valued classes: %s", skipped)
    if per_auroc:
        macro_auroc = float(np.mean(list(per_auroc.values())))
        macro_ap = float(np.mean(list(per_ap.values())))
    else:
        macro_auroc = float("nan")
        macro_ap = float("nan")
    micro = binary_auroc(scores.ravel(), gold.ravel())
    return RankingResult(macro_auroc, macro_ap, per_auroc, per_ap, skipped, micro)


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    low: float
    high: float
    level: float = 0.95
    n_bootstrap: int = 1000
    seed: int = 0
    n_degenerate: int = 0

    def as_dict(self) -> dict:
        return {
            "point": self.point,
            "low": self.low,
            "high": self.high,
            "level": self.level,
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
            "n_degenerate": self.n_degenerate,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ConfidenceInterval":
        return cls(**payload)


def resample_indices(seed: int, iteration: int, n_rows: int) -> np.ndarray:
    """Case indices for one bootstrap resample.

    Each (seed, iteration) pair keys an independent counter-based stream, so
    parallel and serial evaluation produce identical resamples.
    """
    key = np.array([seed, iteration], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.integers(0, n_rows, size=n_rows)


def bootstrap_ci(metric_fn, pred, gold, n: int = 1000, level: float = 0.95,
                 seed: int = 0) -> ConfidenceInterval:
    """Percentile bootstrap interval over case-level resamples with replacement.

    Resampling moves whole label rows, preserving within-case correlation.
    Resamples on which the metric is undefined (NaN) are excluded and counted.
    """
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if n < 1:
        raise ValidationError("n_bootstrap must be >= 1")
    n_rows = pred.shape[0]
    if n_rows == 0:
        raise ValidationError("bootstrap on empty dataset")
    point = float(metric_fn(pred, gold))
    values = np.empty(n, dtype=np.float64)
    for i in range(n):
        idx = resample_indices(seed, i, n_rows)
        values[i] = metric_fn(pred[idx], gold[idx])
    finite = values[np.isfinite(values)]
    n_degenerate = int(n - finite.size)
    if n_degenerate:
        logger.warning("bootstrap: %d degenerate resamples excluded", n_degenerate)
    if finite.size == 0:
        return ConfidenceInterval(point, float("nan"), float("nan"), level, n, seed, n_degenerate)
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(finite, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return ConfidenceInterval(point, float(low), float(high), level, n, seed, n_degenerate)


@dataclass
class MetricReport:
    """Point estimates plus intervals for one (model, dataset) pair."""

    model_tag: str
    dataset_tag: str
    n_cases: int
    metrics: dict[str, ConfidenceInterval]
    per_class: dict[str, dict[str, float]]
    skipped_ranking_classes: list[str] = field(default_factory=list)
    extras: dict[str, float] = field(default_factory=dict)
    notes: str = ZERO_DIVISION_NOTE

    def as_dict(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "dataset_tag": self.dataset_tag,
            "n_cases": self.n_cases,
            "metrics": {k: v.as_dict() for k, v in self.metrics.items()},
            "per_class": self.per_class,
            "skipped_ranking_classes": self.skipped_ranking_classes,
            "extras": self.extras,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricReport":
        return cls(
            model_tag=payload["model_tag"],
            dataset_tag=payload["dataset_tag"],
            n_cases=payload["n_cases"],
            metrics={k: ConfidenceInterval.from_dict(v)
                     for k, v in payload["metrics"].items()},
            per_class=payload["per_class"],
            skipped_ranking_classes=payload.get("skipped_ranking_classes", []),
            extras=payload.get("extras", {}),
            notes=payload.get("notes", ZERO_DIVISION_NOTE),
        )


def compute_report(pred, gold, scores=None, class_names: list[str] | None = None,
                   model_tag: str = "model", dataset_tag: str = "internal_test",
                   n_bootstrap: int = 1000, level: float = 0.95,
                   seed: int = 0) -> MetricReport:
    """Full metric set for a multi-label prediction matrix.

    ``scores`` enables the ranking metrics; without it only the thresholded
    metrics are reported.
    """
    pred, gold = _check_pair(pred, gold)
    pred = _as_binary(pred, "pred")
    gold = _as_binary(gold, "gold")
    n_cases, n_classes = pred.shape
    if class_names is None:
        class_names = [f"class_{j}" for j in range(n_classes)]

    metrics = {
        "macro_f1": bootstrap_ci(lambda p, g: macro_f1(p, g, "over_labels"),
                                 pred, gold, n_bootstrap, level, seed),
        "accuracy": bootstrap_ci(subset_accuracy, pred, gold, n_bootstrap, level, seed),
        "hamming_loss": bootstrap_ci(hamming_loss, pred, gold, n_bootstrap, level, seed),
    }
    per_class: dict[str, dict[str, float]] = {
        name: {"f1": _column_f1(pred[:, j], gold[:, j])}
        for j, name in enumerate(class_names)
    }
    skipped: list[str] = []
    extras: dict[str, float] = {}
    if scores is not None:
        scores_arr = np.asarray(scores, dtype=np.float64)
        ranking = ranking_metrics(scores_arr, gold, class_names)
        metrics["auroc"] = bootstrap_ci(
            lambda s, g: ranking_metrics(s, g, class_names).macro_auroc,
            scores_arr, gold, n_bootstrap, level, seed)
        metrics["average_precision"] = bootstrap_ci(
            lambda s, g: ranking_metrics(s, g, class_names).macro_ap,
            scores_arr, gold, n_bootstrap, level, seed)
        for name in class_names:
            if name in ranking.per_class_auroc:
                per_class[name]["auroc"] = ranking.per_class_auroc[name]
                per_class[name]["average_precision"] = ranking.per_class_ap[name]
        skipped = ranking.skipped_classes
        extras["micro_auroc"] = ranking.micro_auroc
    return MetricReport(model_tag, dataset_tag, n_cases, metrics, per_class, skipped, extras)


def compute_binary_report(pred, gold, scores, class_name: str,
                          model_tag: str = "model", dataset_tag: str = "internal_test",
                          n_bootstrap: int = 1000, level: float = 0.95,
                          seed: int = 0) -> MetricReport:
    """Per-substance binary report; carries both macro-F1 conventions."""
    pred = _as_binary(np.asarray(pred).ravel(), "pred")
    gold = _as_binary(np.asarray(gold).ravel(), "gold")
    scores_arr = np.asarray(scores, dtype=np.float64).ravel()
    metrics = {
        "f1": bootstrap_ci(lambda p, g: macro_f1(p, g, "over_labels"),
                           pred, gold, n_bootstrap, level, seed),
        "macro_f1_binary": bootstrap_ci(lambda p, g: macro_f1(p, g, "over_binary_classes"),
                                        pred, gold, n_bootstrap, level, seed),
        "auroc": bootstrap_ci(binary_auroc, scores_arr, gold, n_bootstrap, level, seed),
        "average_precision": bootstrap_ci(binary_average_precision,
                                          scores_arr, gold, n_bootstrap, level, seed),
    }
    per_class = {class_name: {"f1": _column_f1(pred, gold)}}
    return MetricReport(model_tag, dataset_tag, int(pred.size), metrics, per_class)


def _format_value(v: float) -> str:
    if not np.isfinite(v):
        return "n/a"
    if abs(v) >= 0.0995:
        return f"{v:.3f}"
    return f"{v:.2g}"


def render_reports_table(reports: list[MetricReport], delimiter: str = "\t") -> str:
    """Delimited metric-by-model grid, one block per dataset tag."""
    blocks = []
    by_dataset: dict[str, list[MetricReport]] = {}
    for r in reports:
        by_dataset.setdefault(r.dataset_tag, []).append(r)
    for dataset_tag, group in by_dataset.items():
        metric_names: list[str] = []
        for r in group:
            for m in r.metrics:
                if m not in metric_names:
                    metric_names.append(m)
        lines = [delimiter.join(["dataset: " + dataset_tag] + [r.model_tag for r in group])]
        for m in metric_names:
            row = [m]
            for r in group:
                ci = r.metrics.get(m)
                if ci is None:
                    row.append("")
                else:
                    row.append(f"{_format_value(ci.point)} "
                               f"({_format_value(ci.low)}-{_format_value(ci.high)})")
            lines.append(delimiter.join(row))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
