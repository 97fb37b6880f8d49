"""Error tables and token-level attributions for encoder classifiers.

Two complementary views of model behavior live here. The error table
aggregates false positives and false negatives per class with example
case ids, and reconciles exactly with the number of mismatched label
slots. Token attributions use integrated gradients along the straight
path from an all-pad embedding baseline to the real input, targeting the
pre-sigmoid logit of one class so that the completeness identity holds
up to numerical integration error.
"""

import html as html_lib
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError

EXAMPLE_CAP = 10
DEFAULT_STEPS = 50
MIN_STEPS = 8
BASELINE_DESCRIPTION = "all-pad embedding sequence of equal length"

_POSITIVE_RGB = "0,128,0"
_NEGATIVE_RGB = "200,0,0"


@dataclass(frozen=True)
class ClassErrors:
    """False-positive and false-negative tallies for one class."""

    class_name: str
    fp: int
    fn: int
    fp_examples: tuple
    fn_examples: tuple
    notes: str = ""

    @property
    def total(self) -> int:
        return self.fp + self.fn

    def as_dict(self) -> dict:
        return {
            "class": self.class_name,
            "fp": self.fp,
            "fn": self.fn,
            "total": self.total,
            "fp_examples": list(self.fp_examples),
            "fn_examples": list(self.fn_examples),
            "notes": self.notes,
        }


@dataclass(frozen=True)
class ErrorTable:
    """Per-class error counts plus grand totals over a prediction run."""

    classes: tuple
    n_cases: int

    @property
    def grand_fp(self) -> int:
        return sum(c.fp for c in self.classes)

    @property
    def grand_fn(self) -> int:
        return sum(c.fn for c in self.classes)

    @property
    def grand_total(self) -> int:
        return self.grand_fp + self.grand_fn

    def for_class(self, name: str) -> ClassErrors:
        for entry in self.classes:
            if entry.class_name == name:
                return entry
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "classes": [c.as_dict() for c in self.classes],
            "grand_fp": self.grand_fp,
            "grand_fn": self.grand_fn,
            "grand_total": self.grand_total,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)

    def to_delimited(self, delimiter: str = "\t") -> str:
        lines = [delimiter.join(("class", "fp", "fn", "total", "notes"))]
        for entry in self.classes:
            lines.append(delimiter.join((
                entry.class_name, str(entry.fp), str(entry.fn),
                str(entry.total), entry.notes)))
        lines.append(delimiter.join((
            "TOTAL", str(self.grand_fp), str(self.grand_fn),
            str(self.grand_total), "")))
        return "\n".join(lines) + "\n"


def build_error_table(pred, gold, case_ids: Sequence[str], schema,
                      example_cap: int = EXAMPLE_CAP,
                      notes: Optional[dict] = None) -> ErrorTable:
    """Tally per-class FP and FN cells with capped, sorted example ids.

    `notes` optionally maps class name to a free-text annotation carried
    into the rendered table.
    """
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape or pred.ndim != 2:
        raise ValidationError(
            f"prediction shape {pred.shape} does not match gold {gold.shape}")
    if len(case_ids) != pred.shape[0]:
        raise ValidationError(
            f"{len(case_ids)} case ids for {pred.shape[0]} rows")
    if pred.shape[1] != len(schema.classes):
        raise ValidationError(
            f"{pred.shape[1]} label columns for {len(schema.classes)} classes")
    notes = notes or {}
    ids = np.asarray(case_ids, dtype=object)
    entries = []
    for j, name in enumerate(schema.classes):
        fp_mask = (pred[:, j] == 1) & (gold[:, j] == 0)
        fn_mask = (pred[:, j] == 0) & (gold[:, j] == 1)
        fp_ids = sorted(ids[fp_mask].tolist())
        fn_ids = sorted(ids[fn_mask].tolist())
        entries.append(ClassErrors(
            class_name=name,
            fp=int(fp_mask.sum()),
            fn=int(fn_mask.sum()),
            fp_examples=tuple(fp_ids[:example_cap]),
            fn_examples=tuple(fn_ids[:example_cap]),
            notes=notes.get(name, ""),
        ))
    return ErrorTable(classes=tuple(entries), n_cases=pred.shape[0])


@dataclass(frozen=True)
class AttributionMap:
    """Signed per-token importance scores for one (text, class) pair."""

    tokens: tuple
    scores: tuple
    target_class: str
    probability: float
    logit: float
    baseline_logit: float
    steps: int
    baseline: str = BASELINE_DESCRIPTION

    def __post_init__(self):
        if len(self.tokens) != len(self.scores):
            raise ValidationError(
                f"{len(self.tokens)} tokens but {len(self.scores)} scores")
        if not all(math.isfinite(s) for s in self.scores):
            raise ValidationError("attribution scores must be finite")

    @property
    def score_sum(self) -> float:
        return float(sum(self.scores))

    @property
    def completeness_gap(self) -> float:
        """Absolute gap between the score sum and the logit difference."""
        return abs(self.score_sum - (self.logit - self.baseline_logit))


def attribute_tokens(model, text: str, target_class: str,
                     steps: int = DEFAULT_STEPS) -> AttributionMap:
    """Integrated-gradients attribution of one class logit to input tokens.

    Integrates the gradient of the pre-sigmoid logit along the straight
    line from an all-pad embedding baseline to the embedded input, using
    a midpoint Riemann sum with `steps` increments. Positive scores push
    the class probability up. Each call is independent, so callers may
    fan out over cases with threads if they wish.
    """
    import torch

    if steps < MIN_STEPS:
        raise ConfigurationError(
            f"steps={steps} is too coarse; need at least {MIN_STEPS}")
    classes = tuple(model.classes)
    if target_class not in classes:
        raise ValidationError(f"unknown target class {target_class!r}")
    target = classes.index(target_class)

    tokenizer = model.tokenizer
    encoded = tokenizer([text], return_tensors="pt", truncation=True,
                        max_length=model.max_length)
    input_ids = encoded["input_ids"]
    mask = encoded["attention_mask"]
    model.eval()
    embedding = model.encoder.get_input_embeddings()
    with torch.no_grad():
        input_embeds = embedding(input_ids)
        baseline_ids = torch.full_like(input_ids, tokenizer.pad_token_id)
        baseline_embeds = embedding(baseline_ids)
        logit_x = model.forward_from_embeds(input_embeds, mask)[0, target]
        logit_b = model.forward_from_embeds(baseline_embeds, mask)[0, target]

    delta = input_embeds - baseline_embeds
    accumulated = torch.zeros_like(input_embeds)
    for i in range(steps):
        alpha = (i + 0.5) / steps
        point = (baseline_embeds + alpha * delta).detach().requires_grad_(True)
        value = model.forward_from_embeds(point, mask)[0, target]
        accumulated += torch.autograd.grad(value, point)[0]
    scores = (delta * (accumulated / steps)).sum(dim=-1)[0]

    return AttributionMap(
        tokens=tuple(tokenizer.convert_ids_to_tokens(input_ids[0])),
        scores=tuple(float(s) for s in scores),
        target_class=target_class,
        probability=float(torch.sigmoid(logit_x)),
        logit=float(logit_x),
        baseline_logit=float(logit_b),
        steps=steps,
    )


def _display_token(token: str):
    """Continuation pieces are shown with a single '#' marker."""
    if token.startswith("##"):
        return "#" + token[2:]
    return token


def _render_text(maps) -> str:
    lines = ["Token attributions",
             "('#' marks a token that continues the previous word; "
             "positive scores raise the class probability)"]
    for amap in maps:
        lines.append("")
        lines.append(f"=== {amap.target_class} "
                     f"(p={amap.probability:.3f}, {amap.steps} steps, "
                     f"baseline: {amap.baseline}) ===")
        for token, score in zip(amap.tokens, amap.scores):
            lines.append(f"{_display_token(token)}\t{score:+.4f}")
    return "\n".join(lines) + "\n"


def _render_html(maps) -> str:
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\">"
        "<title>Token attributions</title></head><body>",
        "<p>Green tokens raise the class probability, red tokens lower it; "
        "intensity tracks the score magnitude. '#' marks a token that "
        "continues the previous word.</p>",
    ]
    for amap in maps:
        parts.append("<section>")
        parts.append(
            f"<h2>{html_lib.escape(amap.target_class)} "
            f"(p={amap.probability:.3f})</h2>")
        peak = max((abs(s) for s in amap.scores), default=0.0)
        spans = []
        for token, score in zip(amap.tokens, amap.scores):
            alpha = abs(score) / peak if peak > 0 else 0.0
            rgb = _POSITIVE_RGB if score >= 0 else _NEGATIVE_RGB
            spans.append(
                f"<span style=\"background-color:rgba({rgb},{alpha:.3f})\" "
                f"title=\"{score:+.4f}\">"
                f"{html_lib.escape(_display_token(token))}</span>")
        parts.append("<p>" + " ".join(spans) + "</p>")
        parts.append("</section>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def render_attribution_report(maps, format: str = "html") -> str:
    """Render attribution maps as a standalone html or plain-text report."""
    if format == "html":
        return _render_html(maps)
    if format == "text":
        return _render_text(maps)
    raise ConfigurationError(f"unknown report format {format!r}")
