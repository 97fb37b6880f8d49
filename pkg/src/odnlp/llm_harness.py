"""Few-shot and fine-tuned evaluation of generative models over a client.

Model weights never load in this process: a GenerationClient speaks to an
inference server ({prompt, max_tokens, temperature} -> {text}; SFT pairs
{prompt, target} -> {loss}).  Answers come back as free text and are parsed
against a strict canonical grammar: comma-separated class names, or a
none-token for the all-negative case.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import requests

from .corpus import LabelSchema, LabelVector, default_schema, gold_matrix
from .errors import ClientError, ConfigurationError, TrainingError, ValidationError
from .eval_metrics import MetricReport, compute_report

VALID_K = (0, 3, 5, 10)
NONE_TOKEN = "none"

DEFAULT_INSTRUCTION = (
    "You will read the cause-of-death text from a death certificate. "
    "Decide which of these substance classes contributed to the death: "
    "{classes}. Answer with a comma-separated list of class names from that "
    f"list only, or the single word '{NONE_TOKEN}' if no listed class applies."
)

PARSE_OK = "ok"
PARSE_REPAIRED = "repaired"
PARSE_FAILED = "failed"


@dataclass(frozen=True)
class PromptSpec:
    """Instruction template plus the k-shot and decoding settings."""

    instruction: str = DEFAULT_INSTRUCTION
    k: int = 0
    exemplar_seed: int = 0
    balanced: bool = False
    max_tokens: int = 64
    temperature: float = 0.0

    def __post_init__(self):
        if self.k not in VALID_K:
            raise ConfigurationError(
                f"k must be one of {VALID_K}, got {self.k}")
        if self.max_tokens <= 0:
            raise ConfigurationError("max_tokens must be positive")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be non-negative")
        if "{classes}" not in self.instruction:
            raise ConfigurationError(
                "instruction must carry a {classes} slot")


@dataclass(frozen=True)
class ExemplarPool:
    """Validation-split cases available as prompt exemplars."""

    cases: tuple
    schema: LabelSchema

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))

    @property
    def case_ids(self):
        return {case.case_id for case in self.cases}


@dataclass(frozen=True)
class ParsedAnswer:
    labels: LabelVector
    parse_status: str
    raw: str


def render_labels(bits: Sequence[int], schema: LabelSchema) -> str:
    """Canonical answer text for a label vector."""
    names = [name for name, bit in zip(schema.classes, bits) if bit]
    return ", ".join(names) if names else NONE_TOKEN


_PART_CLEAN = re.compile(r"[^0-9a-z_ ]+")


def _canonical_part(part: str) -> str:
    cleaned = _PART_CLEAN.sub(" ", part.lower())
    return re.sub(r"\s+", "_", cleaned.strip())


def parse_answer(raw: str, schema: LabelSchema) -> ParsedAnswer:
    """Parse generated text into a label vector with a parse status.

    ok: every delimited part is a class name or the none-token.  repaired:
    at least one class recognized but unknown parts were ignored (or a
    none-token contradicted a positive class).  failed: nothing recognized;
    the vector is all-negative and the case must be flagged downstream.
    """
    bits = [0] * len(schema.classes)
    index = {name: i for i, name in enumerate(schema.classes)}
    parts = [p for p in re.split(r"[,\n;]+", raw or "") if p.strip()]
    unknown = 0
    none_seen = False
    recognized = 0
    for part in parts:
        canonical = _canonical_part(part)
        if not canonical:
            unknown += 1
        elif canonical == NONE_TOKEN:
            none_seen = True
            recognized += 1
        elif canonical in index:
            bits[index[canonical]] = 1
            recognized += 1
        else:
            unknown += 1
    if recognized == 0:
        return ParsedAnswer(LabelVector(tuple([0] * len(bits))),
                            PARSE_FAILED, raw)
    status = PARSE_OK
    if unknown > 0 or (none_seen and any(bits)):
        status = PARSE_REPAIRED
    return ParsedAnswer(LabelVector(tuple(bits)), status, raw)


def _select_exemplars(spec: PromptSpec, pool: ExemplarPool,
                      exclude_case_id: Optional[str]) -> list:
    if spec.k == 0:
        return []
    if len(pool.cases) < spec.k:
        raise ConfigurationError(
            f"exemplar pool holds {len(pool.cases)} case(s), need {spec.k}")
    rng = np.random.default_rng(spec.exemplar_seed)
    order = [pool.cases[i] for i in rng.permutation(len(pool.cases))]
    if spec.balanced:
        # walk the classes round-robin, preferring unseen classes
        chosen = []
        used = set()
        class_cycle = list(pool.schema.classes)
        position = 0
        while len(chosen) < spec.k and len(used) < len(order):
            target = class_cycle[position % len(class_cycle)]
            position += 1
            target_idx = pool.schema.index(target)
            pick = next(
                (c for c in order
                 if c.case_id not in used and c.gold.bits[target_idx] == 1),
                None)
            if pick is None:
                pick = next((c for c in order if c.case_id not in used), None)
            if pick is None:
                break
            chosen.append(pick)
            used.add(pick.case_id)
    else:
        chosen = order[:spec.k]
    if exclude_case_id is not None:
        remaining = [c for c in order
                     if c.case_id != exclude_case_id
                     and c.case_id not in {x.case_id for x in chosen}]
        chosen = [c if c.case_id != exclude_case_id else remaining.pop(0)
                  for c in chosen]
        if any(c.case_id == exclude_case_id for c in chosen):
            raise ConfigurationError(
                "pool too small to exclude the query case")
    return chosen


def build_prompt(case_text: str, spec: PromptSpec, pool: ExemplarPool,
                 exclude_case_id: Optional[str] = None) -> str:
    """Render the full prompt: instruction, k exemplar blocks, query.

    Exemplar choice depends only on (pool, seed), so every case in a run
    sees byte-identical exemplars; the query case itself is never one of
    them.
    """
    schema = pool.schema
    instruction = spec.instruction.format(
        classes=", ".join(schema.classes))
    blocks = [instruction]
    for exemplar in _select_exemplars(spec, pool, exclude_case_id):
        blocks.append(
            "Example:\n"
            f"Text: {exemplar.normalized_text}\n"
            f"Answer: {render_labels(exemplar.gold.bits, schema)}")
    blocks.append(f"Text: {case_text}\nAnswer:")
    return "\n\n".join(blocks)


class GenerationClient:
    """Interface to an external generation and fine-tuning server."""

    def generate(self, prompt: str, max_tokens: int, temperature: float) -> str:
        raise NotImplementedError

    def train_step(self, prompt: str, target: str) -> float:
        raise NotImplementedError


class HttpGenerationClient(GenerationClient):
    """HTTP transport: POST /generate and POST /sft with JSON bodies.

    Transport failures retry with exponential backoff up to max_retries,
    then raise ClientError.
    """

    def __init__(self, base_url: str, timeout: float = 30.0,
                 max_retries: int = 3, backoff: float = 0.25):
        if max_retries < 1:
            raise ConfigurationError("max_retries must be at least 1")
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def _post(self, path: str, payload: dict) -> dict:
        last_error = None
        for attempt in range(self.max_retries):
            try:
                response = requests.post(self.base_url + path, json=payload,
                                         timeout=self.timeout)
                if response.status_code != 200:
                    raise ClientError(f"HTTP {response.status_code}")
                return response.json()
            except (requests.RequestException, ClientError, ValueError) as exc:
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise ClientError(
            f"{path} failed after {self.max_retries} attempt(s): {last_error}")

    def generate(self, prompt, max_tokens, temperature):
        data = self._post("/generate", {
            "prompt": prompt, "max_tokens": max_tokens,
            "temperature": temperature})
        if "text" not in data:
            raise ClientError("generation response lacks a 'text' field")
        return str(data["text"])

    def train_step(self, prompt, target):
        data = self._post("/sft", {"prompt": prompt, "target": target})
        if "loss" not in data:
            raise ClientError("sft response lacks a 'loss' field")
        return float(data["loss"])


def evaluate_generations(client: GenerationClient, cases: Sequence,
                         spec: PromptSpec, pool: ExemplarPool,
                         schema: Optional[LabelSchema] = None,
                         model_tag: str = "generative",
                         dataset_tag: str = "test",
                         n_bootstrap: int = 1000, seed: int = 0,
                         max_in_flight: int = 4,
                         artifact_path: Optional[str] = None):
    """One generation per test case; returns (answers, report, parse stats).

    Requests run with bounded parallelism and results are reassembled in
    input order.  A case whose transport gives out after retries scores as
    all-negative with a failed status.
    """
    if not cases:
        raise ValidationError("no cases to evaluate")
    schema = schema or default_schema()
    overlap = pool.case_ids & {c.case_id for c in cases}
    if overlap:
        raise ValidationError(
            f"exemplar pool overlaps the test split: {sorted(overlap)[:5]}")
    if max_in_flight <= 0:
        raise ConfigurationError("max_in_flight must be positive")

    def worker(case):
        prompt = build_prompt(case.normalized_text, spec, pool,
                              exclude_case_id=case.case_id)
        try:
            text = client.generate(prompt, spec.max_tokens, spec.temperature)
        except ClientError:
            return prompt, None
        return prompt, text

    with ThreadPoolExecutor(max_workers=max_in_flight) as executor:
        outcomes = list(executor.map(worker, cases))

    answers = []
    transport_failures = 0
    artifact_lines = []
    for case, (prompt, text) in zip(cases, outcomes):
        if text is None:
            transport_failures += 1
            answer = ParsedAnswer(
                LabelVector(tuple([0] * len(schema.classes))),
                PARSE_FAILED, "")
        else:
            answer = parse_answer(text, schema)
        answers.append(answer)
        artifact_lines.append({
            "case_id": case.case_id,
            "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            "response": answer.raw,
            "labels": list(answer.labels.bits),
            "status": answer.parse_status,
        })
    if artifact_path:
        with open(artifact_path, "w", encoding="utf-8") as handle:
            for line in artifact_lines:
                handle.write(json.dumps(line, sort_keys=True) + "\n")

    pred = np.stack([a.labels.to_array() for a in answers])
    gold = gold_matrix(list(cases), schema)
    report = compute_report(pred, gold, class_names=list(schema.classes),
                            model_tag=model_tag, dataset_tag=dataset_tag,
                            n_bootstrap=n_bootstrap, seed=seed)
    counts = {PARSE_OK: 0, PARSE_REPAIRED: 0, PARSE_FAILED: 0}
    for answer in answers:
        counts[answer.parse_status] += 1
    stats = {
        **counts,
        "transport_failures": transport_failures,
        "n_cases": len(answers),
        "ok_rate": counts[PARSE_OK] / len(answers),
    }
    report.notes += (
        f"; parse ok/repaired/failed: {counts[PARSE_OK]}/"
        f"{counts[PARSE_REPAIRED]}/{counts[PARSE_FAILED]}")
    return answers, report, stats


@dataclass(frozen=True)
class SftConfig:
    """Stopping rule for supervised fine-tuning through the client."""

    loss_threshold: float = 0.005
    max_examples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.loss_threshold <= 0:
            raise ConfigurationError("loss_threshold must be positive")
        if self.max_examples <= 0:
            raise ConfigurationError("max_examples must be positive")


@dataclass
class SftResult:
    handle: Optional[str]
    examples_consumed: int
    final_loss: float
    converged: bool


def run_sft(client: GenerationClient, train_cases: Sequence,
            config: SftConfig, schema: Optional[LabelSchema] = None,
            instruction: str = DEFAULT_INSTRUCTION) -> SftResult:
    """Stream (prompt, target) pairs until the loss threshold or the budget.

    Pairs are zero-shot prompts with canonical answers, drawn in seeded
    shuffled passes over the training split (re-shuffled each pass).  If
    the budget runs out above the threshold the run completes with a
    warning, never an error.
    """
    if not train_cases:
        raise TrainingError("training split is empty")
    schema = schema or default_schema()
    spec = PromptSpec(instruction=instruction, k=0)
    empty_pool = ExemplarPool(cases=(), schema=schema)
    rng = np.random.default_rng(config.seed)
    consumed = 0
    final_loss = float("inf")
    converged = False
    order: list = []
    while consumed < config.max_examples:
        if not order:
            order = [int(i) for i in rng.permutation(len(train_cases))]
        case = train_cases[order.pop()]
        prompt = build_prompt(case.normalized_text, spec, empty_pool)
        target = render_labels(case.gold.bits, schema)
        final_loss = float(client.train_step(prompt, target))
        consumed += 1
        if final_loss < config.loss_threshold:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"loss never fell below {config.loss_threshold} within "
            f"{config.max_examples} examples (last: {final_loss:.4f})")
    handle = None
    finalize = getattr(client, "finalize", None)
    if callable(finalize):
        handle = finalize()
    return SftResult(handle=handle, examples_consumed=consumed,
                     final_loss=final_loss, converged=converged)
