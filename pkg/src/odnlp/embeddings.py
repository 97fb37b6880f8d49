"""Document vectorization backends: static tables, concept ids, contextual.

All three backends reduce a text to one fixed-dimension vector by arithmetic
mean pooling, so any classic classifier can consume any backend unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, TableParseError, ValidationError

BACKENDS = ("static", "cui", "contextual")
DEFAULT_SEMANTIC_FILTER = "organic chemical"


@dataclass
class VectorTable:
    """Token (or concept id) to vector mapping with a single fixed dimension."""

    dim: int
    entries: dict

    def __post_init__(self):
        if self.dim <= 0:
            raise ValidationError("vector dimension must be positive")

    def get(self, token: str):
        return self.entries.get(token.lower())

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def load_vector_table(path: str) -> VectorTable:
    """Parse a word-per-line vector file: token, then dim decimal numbers.

    The dimension is fixed by the first line; any line disagreeing with it is
    a parse error that names the offending line.  Tokens are lowercased; the
    first occurrence of a token wins.
    """
    entries = {}
    dim = None
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise TableParseError(f"cannot read vector table {path}: {exc}") from exc
    with handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            token = parts[0].lower()
            try:
                values = np.asarray([float(p) for p in parts[1:]], dtype=np.float64)
            except ValueError:
                raise TableParseError(
                    f"{path}:{line_number}: non-numeric vector component") from None
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise TableParseError(
                        f"{path}:{line_number}: first line has no vector components")
            if len(values) != dim:
                raise TableParseError(
                    f"{path}:{line_number}: expected {dim} components, "
                    f"got {len(values)}")
            entries.setdefault(token, values)
    if dim is None:
        raise TableParseError(f"{path}: empty vector table")
    return VectorTable(dim=dim, entries=entries)


@dataclass(frozen=True)
class DocumentVector:
    """One pooled vector per document, tagged with its producing backend."""

    values: np.ndarray
    backend: str
    dim: int
    oov_count: int = 0
    all_oov: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if self.backend not in BACKENDS:
            raise ValidationError(f"unknown backend {self.backend!r}")
        if values.shape != (self.dim,):
            raise ValidationError(
                f"vector shape {values.shape} does not match dim {self.dim}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("document vector has non-finite components")


def _mean_pool(vectors: List[np.ndarray], dim: int, backend: str,
               oov_count: int) -> DocumentVector:
    if not vectors:
        warnings.warn(f"document fully out of vocabulary for {backend} backend")
        return DocumentVector(np.zeros(dim), backend, dim,
                              oov_count=oov_count, all_oov=True)
    pooled = np.mean(np.stack(vectors), axis=0)
    return DocumentVector(pooled, backend, dim, oov_count=oov_count)


def embed_mean_pooled(tokens: Sequence[str], table: VectorTable) -> DocumentVector:
    """Mean of the in-vocabulary token vectors; OOV tokens skipped, counted."""
    hits, oov = [], 0
    for token in tokens:
        vector = table.get(token)
        if vector is None:
            oov += 1
        else:
            hits.append(vector)
    return _mean_pool(hits, table.dim, "static", oov)


@dataclass
class CuiLexicon:
    """Surface-term dictionary mapping to concept ids with semantic classes."""

    term_to_cui: dict
    cui_semantic_type: dict
    max_term_tokens: int = field(init=False)

    def __post_init__(self):
        normalized = {}
        for term, cui in self.term_to_cui.items():
            normalized[" ".join(term.lower().split())] = cui
        self.term_to_cui = normalized
        self.max_term_tokens = max(
            (len(t.split()) for t in normalized), default=0)


def load_cui_lexicon(path: str, delimiter: Optional[str] = None) -> CuiLexicon:
    """Read a lexicon of (term, identifier, semantic class) rows, no header."""
    if delimiter is None:
        delimiter = "\t" if str(path).lower().endswith((".tsv", ".tab")) else ","
    term_to_cui = {}
    cui_semantic_type = {}
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise TableParseError(f"cannot read lexicon {path}: {exc}") from exc
    with handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            if len(parts) != 3:
                raise TableParseError(
                    f"{path}:{line_number}: expected 3 fields, got {len(parts)}")
            term, cui, semantic = (p.strip() for p in parts)
            if not term or not cui:
                raise TableParseError(
                    f"{path}:{line_number}: empty term or identifier")
            term_to_cui[term] = cui
            cui_semantic_type[cui] = semantic
    return CuiLexicon(term_to_cui=term_to_cui, cui_semantic_type=cui_semantic_type)


def text_to_cui_spans(text: str, lexicon: CuiLexicon,
                      semantic_filter: Optional[str] = DEFAULT_SEMANTIC_FILTER):
    """Longest-match, left-to-right, non-overlapping concept scan with spans.

    Returns (cui, start_token, end_token) triples.  A match consumes its span
    even when the semantic filter drops its identifier from the output.
    """
    tokens = text.lower().split()
    spans = []
    i = 0
    while i < len(tokens):
        matched = 0
        cui = None
        longest = min(lexicon.max_term_tokens, len(tokens) - i)
        for length in range(longest, 0, -1):
            candidate = " ".join(tokens[i:i + length])
            if candidate in lexicon.term_to_cui:
                matched = length
                cui = lexicon.term_to_cui[candidate]
                break
        if not matched:
            i += 1
            continue
        keep = (semantic_filter is None
                or lexicon.cui_semantic_type.get(cui) == semantic_filter)
        if keep:
            spans.append((cui, i, i + matched))
        i += matched
    return spans


def text_to_cuis(text: str, lexicon: CuiLexicon,
                 semantic_filter: Optional[str] = DEFAULT_SEMANTIC_FILTER) -> list:
    """Ordered concept identifiers surviving the semantic filter."""
    return [cui for cui, _, _ in text_to_cui_spans(text, lexicon, semantic_filter)]


def cuis_to_vector(cuis: Sequence[str], table: VectorTable) -> DocumentVector:
    """Mean-pool concept vectors with the same OOV semantics as tokens."""
    hits, oov = [], 0
    for cui in cuis:
        vector = table.get(cui)
        if vector is None:
            oov += 1
        else:
            hits.append(vector)
    return _mean_pool(hits, table.dim, "cui", oov)


def embed_contextual(texts: Sequence[str], encoder_id: str,
                     batch_size: int = 32) -> list:
    """Encode texts with a bidirectional encoder, mean over token states.

    The mean runs over real token positions of the final hidden layer
    (padding excluded via the attention mask).  Texts beyond the encoder's
    native length limit are tail-truncated with a warning.
    """
    import torch
    from transformers import AutoModel, AutoTokenizer

    if batch_size <= 0:
        raise ConfigurationError("batch_size must be positive")
    try:
        tokenizer = AutoTokenizer.from_pretrained(encoder_id)
        model = AutoModel.from_pretrained(encoder_id)
    except Exception as exc:
        raise ConfigurationError(
            f"cannot load encoder {encoder_id!r}: {exc}") from exc
    model.eval()
    max_len = encoder_max_length(tokenizer, model)
    dim = int(model.config.hidden_size)

    vectors = []
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            batch = list(texts[start:start + batch_size])
            raw_lengths = [len(ids) for ids in tokenizer(batch)["input_ids"]]
            over = sum(1 for n in raw_lengths if n > max_len)
            if over:
                warnings.warn(
                    f"{over} text(s) exceed the encoder limit of {max_len} "
                    "tokens and were truncated")
            encoded = tokenizer(batch, padding=True, truncation=True,
                                max_length=max_len, return_tensors="pt")
            hidden = model(**encoded).last_hidden_state
            mask = encoded["attention_mask"].unsqueeze(-1).to(hidden.dtype)
            summed = (hidden * mask).sum(dim=1)
            counts = mask.sum(dim=1).clamp(min=1)
            pooled = (summed / counts).cpu().numpy().astype(np.float64)
            for row in pooled:
                vectors.append(DocumentVector(row, "contextual", dim))
    return vectors


def encoder_max_length(tokenizer, model) -> int:
    """Effective input limit: tokenizer limit capped by position embeddings."""
    limit = getattr(tokenizer, "model_max_length", None)
    if limit is None or limit > 1_000_000:
        limit = None
    positions = getattr(model.config, "max_position_embeddings", None)
    candidates = [c for c in (limit, positions) if c]
    return int(min(candidates)) if candidates else 512


@dataclass(frozen=True)
class EmbedderConfig:
    """Backend choice plus the artifact paths it needs."""

    backend: str
    table_path: Optional[str] = None
    lexicon_path: Optional[str] = None
    encoder_id: Optional[str] = None
    semantic_filter: Optional[str] = DEFAULT_SEMANTIC_FILTER
    pooling: str = "mean"
    batch_size: int = 32

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown embedding backend {self.backend!r}")
        if self.pooling != "mean":
            raise ConfigurationError("only mean pooling is supported")
        if self.backend == "static" and not self.table_path:
            raise ConfigurationError("static backend requires table_path")
        if self.backend == "cui" and not (self.table_path and self.lexicon_path):
            raise ConfigurationError(
                "cui backend requires table_path and lexicon_path")
        if self.backend == "contextual" and not self.encoder_id:
            raise ConfigurationError("contextual backend requires encoder_id")

    def as_dict(self) -> dict:
        return {
            "backend": self.backend,
            "table_path": self.table_path,
            "lexicon_path": self.lexicon_path,
            "encoder_id": self.encoder_id,
            "semantic_filter": self.semantic_filter,
            "pooling": self.pooling,
            "batch_size": self.batch_size,
        }


def embed_corpus(texts: Sequence[str], config: EmbedderConfig,
                 table: Optional[VectorTable] = None,
                 lexicon: Optional[CuiLexicon] = None) -> list:
    """Vectorize a text collection under one backend configuration.

    Pre-loaded table/lexicon objects may be injected; otherwise they are read
    from the paths in the config.
    """
    if config.backend == "static":
        table = table or load_vector_table(config.table_path)
        return [embed_mean_pooled(text.split(), table) for text in texts]
    if config.backend == "cui":
        table = table or load_vector_table(config.table_path)
        lexicon = lexicon or load_cui_lexicon(config.lexicon_path)
        return [
            cuis_to_vector(
                text_to_cuis(text, lexicon, config.semantic_filter), table)
            for text in texts
        ]
    return embed_contextual(texts, config.encoder_id, config.batch_size)


def stack_vectors(vectors: Sequence[DocumentVector]) -> np.ndarray:
    """Stack document vectors into an (n_docs, dim) feature matrix."""
    if not vectors:
        raise ValidationError("no document vectors to stack")
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise ValidationError(f"mixed vector dimensions: {sorted(dims)}")
    return np.stack([v.values for v in vectors])
