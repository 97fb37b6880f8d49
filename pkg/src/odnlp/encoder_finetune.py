"""Fine-tuning of bidirectional encoders with a multi-label sigmoid head.

The classifier pools the final hidden layer by attention-masked mean, feeds
one linear layer of width |classes|, and trains with element-wise binary
cross-entropy.  The checkpoint returned is the epoch with the best
validation macro F1.  Training is CPU-deterministic for a fixed seed;
accelerator backends may introduce their own nondeterminism.
"""

from __future__ import annotations

import json
import logging
import os
import time
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import LabelSchema, LabelVector, default_schema, gold_matrix, schema_fingerprint
from .embeddings import encoder_max_length
from .errors import ConfigurationError, TrainingError, ValidationError
from .eval_metrics import macro_f1, subset_accuracy

logger = logging.getLogger("odnlp.encoder_finetune")

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class FineTuneConfig:
    """Training hyperparameters; every field lands in the checkpoint manifest."""

    encoder_id: str
    batch_size: int = 32
    weight_decay: float = 0.01
    learning_rate: float = 2e-5
    epochs: int = 5
    selection_metric: str = "macro_f1"
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0
    max_length: Optional[int] = None

    def __post_init__(self):
        if not self.encoder_id:
            raise ConfigurationError("encoder_id must be set")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.epochs <= 0:
            raise ConfigurationError("epochs must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.selection_metric != "macro_f1":
            raise ConfigurationError(
                "selection_metric supports only 'macro_f1'")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")

    def as_dict(self) -> dict:
        return {
            "encoder_id": self.encoder_id,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "selection_metric": self.selection_metric,
            "threshold": self.threshold,
            "seed": self.seed,
            "max_length": self.max_length,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FineTuneConfig":
        return cls(**payload)


@dataclass(frozen=True)
class ProbabilityMatrix:
    """Per-class sigmoid outputs, rows in input order, columns in schema order."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("probability matrix must be 2-dimensional")
        if values.size and (not np.all(np.isfinite(values))
                            or values.min() < 0.0 or values.max() > 1.0):
            raise ValidationError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


class EncoderClassifier(nn.Module):
    """Encoder plus a linear head; emits pre-sigmoid logits per class."""

    def __init__(self, encoder, tokenizer, classes, config: FineTuneConfig,
                 schema_hash: str):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(int(encoder.config.hidden_size), len(classes))
        self.tokenizer = tokenizer
        self.classes = tuple(classes)
        self.config_snapshot = config
        self.schema_hash = schema_hash
        self.epoch_log: list = []
        self.best_epoch: Optional[int] = None
        self.max_length = config.max_length or encoder_max_length(
            tokenizer, encoder)

    @staticmethod
    def _pool(hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
        summed = (hidden * mask).sum(dim=1)
        counts = mask.sum(dim=1).clamp(min=1)
        return summed / counts

    def forward(self, input_ids, attention_mask):
        hidden = self.encoder(input_ids=input_ids,
                              attention_mask=attention_mask).last_hidden_state
        return self.head(self._pool(hidden, attention_mask))

    def forward_from_embeds(self, inputs_embeds, attention_mask):
        """Logits from embedding-space inputs; the attribution entry point."""
        hidden = self.encoder(inputs_embeds=inputs_embeds,
                              attention_mask=attention_mask).last_hidden_state
        return self.head(self._pool(hidden, attention_mask))


def _load_encoder(encoder_id: str):
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(encoder_id)
        encoder = AutoModel.from_pretrained(encoder_id)
    except Exception as exc:
        raise ConfigurationError(
            f"cannot load encoder {encoder_id!r}: {exc}") from exc
    return tokenizer, encoder


def _encode_batch(tokenizer, texts, max_length):
    return tokenizer(list(texts), padding=True, truncation=True,
                     max_length=max_length, return_tensors="pt")


def finetune_encoder(train_cases: Sequence, validation_cases: Sequence,
                     config: FineTuneConfig,
                     schema: Optional[LabelSchema] = None) -> EncoderClassifier:
    """Train the multi-label head and encoder jointly; keep the best epoch.

    Validation macro F1 is computed once per epoch at the configured
    threshold; the returned model carries the full epoch log and the index
    of the restored checkpoint.
    """
    if not train_cases:
        raise TrainingError("training split is empty")
    if not validation_cases:
        raise TrainingError("validation split is empty; selection needs it")
    schema = schema or default_schema()
    tokenizer, encoder = _load_encoder(config.encoder_id)

    torch.manual_seed(config.seed)
    model = EncoderClassifier(encoder, tokenizer, schema.classes, config,
                              schema_fingerprint(schema))
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()

    train_texts = [case.normalized_text for case in train_cases]
    train_y = torch.tensor(gold_matrix(train_cases, schema),
                           dtype=torch.float32)
    val_texts = [case.normalized_text for case in validation_cases]
    val_gold = gold_matrix(validation_cases, schema)

    shuffler = np.random.default_rng(config.seed)
    best_state = None
    best_score = -1.0
    for epoch in range(config.epochs):
        model.train()
        order = shuffler.permutation(len(train_texts))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            encoded = _encode_batch(tokenizer,
                                    [train_texts[i] for i in batch_idx],
                                    model.max_length)
            logits = model(encoded["input_ids"], encoded["attention_mask"])
            loss = loss_fn(logits, train_y[batch_idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        probs = predict_probabilities(model, val_texts,
                                      batch_size=config.batch_size)
        pred = np.stack([v.to_array() for v in
                         threshold_labels(probs, config.threshold)])
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_macro_f1": macro_f1(pred, val_gold),
            "val_subset_accuracy": subset_accuracy(pred, val_gold),
        }
        model.epoch_log.append(entry)
        logger.info(
            "epoch %d: train_loss=%.4f val_macro_f1=%.4f val_subset_acc=%.4f",
            epoch, entry["train_loss"], entry["val_macro_f1"],
            entry["val_subset_accuracy"])
        if entry["val_macro_f1"] > best_score:
            best_score = entry["val_macro_f1"]
            best_state = {k: v.detach().clone()
                          for k, v in model.state_dict().items()}
            model.best_epoch = epoch
    model.load_state_dict(best_state)
    model.eval()
    return model


def predict_probabilities(model: EncoderClassifier, texts: Sequence[str],
                          batch_size: int = 32) -> ProbabilityMatrix:
    """Batch inference; per-batch wall clock goes to the module logger."""
    if batch_size <= 0:
        raise ConfigurationError("batch_size must be positive")
    model.eval()
    if not texts:
        return ProbabilityMatrix(np.zeros((0, len(model.classes))))
    rows = []
    started = time.perf_counter()
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            batch = list(texts[start:start + batch_size])
            batch_started = time.perf_counter()
            raw_lengths = [len(ids)
                           for ids in model.tokenizer(batch)["input_ids"]]
            over = sum(1 for n in raw_lengths if n > model.max_length)
            if over:
                warnings.warn(
                    f"{over} text(s) exceed the encoder limit of "
                    f"{model.max_length} tokens and were truncated")
            encoded = _encode_batch(model.tokenizer, batch, model.max_length)
            logits = model(encoded["input_ids"], encoded["attention_mask"])
            rows.append(torch.sigmoid(logits).cpu().numpy())
            logger.debug("batch of %d texts in %.4fs", len(batch),
                         time.perf_counter() - batch_started)
    elapsed = time.perf_counter() - started
    logger.info("encoded %d texts in %.2fs (%.0f cases/s)",
                len(texts), elapsed, len(texts) / max(elapsed, 1e-9))
    values = np.concatenate(rows, axis=0).astype(np.float64)
    return ProbabilityMatrix(np.clip(values, 0.0, 1.0))


def threshold_labels(probs: ProbabilityMatrix,
                     threshold: float = DEFAULT_THRESHOLD) -> list:
    """Bit i is 1 exactly when probability i reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    matrix = (probs.values >= threshold).astype(np.int64)
    return [LabelVector(tuple(row)) for row in matrix]


def repair_implications(pred: np.ndarray, schema: LabelSchema) -> np.ndarray:
    """Optional post-hoc fix: force parent=1 wherever a child is 1.

    Off by default everywhere; callers opt in explicitly.
    """
    pred = np.asarray(pred).copy()
    edges = [(schema.index(c), schema.index(p))
             for c, p in schema.implication_edges]
    # iterate to fixpoint; edge chains are at most |classes| long
    for _ in range(len(schema.classes)):
        changed = False
        for ci, pi in edges:
            needs = (pred[:, ci] == 1) & (pred[:, pi] == 0)
            if needs.any():
                pred[needs, pi] = 1
                changed = True
        if not changed:
            break
    return pred


def save_checkpoint(model: EncoderClassifier, directory: str) -> None:
    """Write a self-describing checkpoint: weights, tokenizer, manifest."""
    os.makedirs(directory, exist_ok=True)
    encoder_dir = os.path.join(directory, "encoder")
    model.encoder.save_pretrained(encoder_dir)
    model.tokenizer.save_pretrained(encoder_dir)
    torch.save(model.head.state_dict(), os.path.join(directory, "head.pt"))
    manifest = {
        "kind": "encoder_classifier",
        "classes": list(model.classes),
        "schema_hash": model.schema_hash,
        "config": model.config_snapshot.as_dict(),
        "epoch_log": model.epoch_log,
        "best_epoch": model.best_epoch,
        "max_length": model.max_length,
    }
    with open(os.path.join(directory, "manifest.json"), "w",
              encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)


def load_checkpoint(directory: str) -> EncoderClassifier:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as handle:
            manifest = json.load(handle)
    except OSError as exc:
        raise ConfigurationError(
            f"cannot read checkpoint manifest: {exc}") from exc
    if manifest.get("kind") != "encoder_classifier":
        raise ConfigurationError(f"{directory} is not an encoder checkpoint")
    encoder_dir = os.path.join(directory, "encoder")
    tokenizer, encoder = _load_encoder(encoder_dir)
    config = FineTuneConfig.from_dict(manifest["config"])
    model = EncoderClassifier(encoder, tokenizer, manifest["classes"], config,
                              manifest["schema_hash"])
    model.head.load_state_dict(
        torch.load(os.path.join(directory, "head.pt"), weights_only=True))
    model.epoch_log = manifest.get("epoch_log", [])
    model.best_epoch = manifest.get("best_epoch")
    model.max_length = int(manifest["max_length"])
    model.eval()
    return model
