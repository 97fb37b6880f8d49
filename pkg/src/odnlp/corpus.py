"""Corpus handling: ingestion, text normalization, label schema, and splits.

Everything downstream (feature builders, trainers, the evaluation harness)
consumes the types defined here.  All operations are pure functions of their
inputs; split generation draws from a seeded generator so that a (cases,
strategy, seed) triple always yields the same partition.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    IngestError,
    SplitError,
    TableParseError,
    ValidationError,
)

OTHERS_CLASS = "others"
RARE_CUTOFF_DEFAULT = 1000

DEFAULT_CLASSES = (
    "any_opioids",
    "heroin",
    "fentanyl",
    "prescription_opioids",
    "methamphetamine",
    "cocaine",
    "benzodiazepines",
    "alcohol",
    "others",
    "any_drugs",
)

# Lint-only hierarchy: specific opioids imply the opioid umbrella, and every
# class other than the umbrella itself implies any_drugs.
DEFAULT_IMPLICATION_EDGES = tuple(
    [(c, "any_opioids") for c in ("heroin", "fentanyl", "prescription_opioids")]
    + [(c, "any_drugs") for c in DEFAULT_CLASSES if c != "any_drugs"]
)

STRATEGIES = ("stratified_80_20", "random_60_20_20")

STOP_WORDS_VERSION = "v1"

# Substance tokens that must survive stop-word filtering no matter what list
# a run supplies.  Subtracted from every list loaded through load_stop_words.
PROTECTED_TOKENS = frozenset({
    "acetylfentanyl", "alcohol", "alprazolam", "amphetamine", "benzodiazepine",
    "benzodiazepines", "buprenorphine", "carfentanil", "clonazepam", "cocaine",
    "diazepam", "ethanol", "fentanyl", "gabapentin", "heroin", "hydrocodone",
    "ketamine", "mdma", "methadone", "methamphetamine", "morphine", "opiate",
    "opiates", "opioid", "opioids", "oxycodone", "pcp", "tramadol", "xylazine",
})


def load_stop_words(path: Optional[str] = None) -> frozenset:
    """Load a stop-word list (one token per line, '#' comments allowed).

    With no path, loads the packaged version-1 English list.  Protected
    substance tokens are always removed from the result.
    """
    if path is None:
        text = resources.files("odnlp").joinpath(
            f"data/stopwords_{STOP_WORDS_VERSION}.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    tokens = set()
    for line in text.splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            tokens.add(line)
    return frozenset(tokens - PROTECTED_TOKENS)


DEFAULT_STOP_WORDS = load_stop_words()


def stop_words_fingerprint(stop_list: Iterable[str]) -> str:
    """Stable digest of a stop list, for run manifests."""
    joined = "\n".join(sorted(set(stop_list)))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DeathRecord:
    """One certified death with its free-text cause fields."""

    case_id: str
    jurisdiction: str = ""
    age: Optional[int] = None
    gender: str = ""
    race: str = ""
    date_of_death: Optional[dt.date] = None
    manner_of_death: str = ""
    primary_cause: str = ""
    secondary_cause: str = ""

    def combined_cause(self) -> str:
        return f"{self.primary_cause} {self.secondary_cause}".strip()


@dataclass(frozen=True)
class LabelSchema:
    """Ordered class list plus the lint hierarchy and rare-substance cutoff."""

    classes: tuple = DEFAULT_CLASSES
    implication_edges: tuple = DEFAULT_IMPLICATION_EDGES
    rare_cutoff: int = RARE_CUTOFF_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "implication_edges",
                           tuple((c, p) for c, p in self.implication_edges))
        if not self.classes:
            raise ValidationError("schema needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("schema classes must be unique")
        known = set(self.classes)
        for child, parent in self.implication_edges:
            if child not in known or parent not in known:
                raise ValidationError(
                    f"implication edge ({child!r}, {parent!r}) references an unknown class")
        self._check_acyclic()

    def _check_acyclic(self):
        children = {}
        for child, parent in self.implication_edges:
            children.setdefault(parent, []).append(child)
        # colors: 0 unseen, 1 on stack, 2 done
        color = {c: 0 for c in self.classes}

        def visit(node):
            color[node] = 1
            for nxt in children.get(node, ()):
                if color[nxt] == 1:
                    raise ValidationError("implication edges contain a cycle")
                if color[nxt] == 0:
                    visit(nxt)
            color[node] = 2

        for cls in self.classes:
            if color[cls] == 0:
                visit(cls)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ValidationError(f"unknown class {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "implication_edges": [list(e) for e in self.implication_edges],
            "rare_cutoff": self.rare_cutoff,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LabelSchema":
        return cls(
            classes=tuple(payload.get("classes", DEFAULT_CLASSES)),
            implication_edges=tuple(
                tuple(e) for e in payload.get("implication_edges", DEFAULT_IMPLICATION_EDGES)),
            rare_cutoff=int(payload.get("rare_cutoff", RARE_CUTOFF_DEFAULT)),
        )


def default_schema() -> LabelSchema:
    return LabelSchema()


def schema_fingerprint(schema: LabelSchema) -> str:
    """Stable digest of a schema, recorded in every model manifest."""
    payload = json.dumps(schema.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LabelVector:
    """Binary label assignment aligned to a schema's class order."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValidationError("label bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.int64)


@dataclass(frozen=True)
class LabeledCase:
    """A retained record joined with normalized text and gold labels."""

    record: DeathRecord
    normalized_text: str
    gold: LabelVector

    @property
    def case_id(self) -> str:
        return self.record.case_id


_EDGE_PUNCT = re.compile(r"^[^0-9a-z]+|[^0-9a-z]+$")


def normalize_text(raw: str, stop_list: Optional[Iterable[str]] = None) -> str:
    """Lowercase, strip edge punctuation per token, and drop stop words.

    Token order is preserved and the result is idempotent: applying the
    function to its own output changes nothing.
    """
    if stop_list is None:
        stop_list = DEFAULT_STOP_WORDS
    stop = {s.lower() for s in stop_list}
    kept = []
    for token in raw.lower().split():
        token = _EDGE_PUNCT.sub("", token)
        if token and token not in stop:
            kept.append(token)
    return " ".join(kept)


@dataclass
class ExcludedRow:
    row_number: int
    case_id: str
    reason: str


@dataclass
class ExclusionReport:
    """Accounting for one ingestion pass: retained + excluded = input rows."""

    input_rows: int
    retained: int
    excluded: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def reason_counts(self) -> dict:
        counts = {}
        for row in self.excluded:
            counts[row.reason] = counts.get(row.reason, 0) + 1
        return counts

    def as_dict(self) -> dict:
        return {
            "input_rows": self.input_rows,
            "retained": self.retained,
            "excluded": len(self.excluded),
            "reasons": self.reason_counts(),
            "notes": list(self.notes),
        }


_RECORD_FIELDS = (
    "case_id", "jurisdiction", "age", "gender", "race",
    "date_of_death", "manner_of_death", "primary_cause", "secondary_cause",
)

_DATE_FORMATS = ("%m/%d/%Y", "%m/%d/%y", "%Y/%m/%d")


def _parse_age(value: str) -> Optional[int]:
    value = value.strip()
    if not value:
        return None
    try:
        age = int(value)
    except ValueError:
        return None
    return age if age >= 0 else None


def _parse_date(value: str) -> Optional[dt.date]:
    value = value.strip()
    if not value:
        return None
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        pass
    for fmt in _DATE_FORMATS:
        try:
            return dt.datetime.strptime(value, fmt).date()
        except ValueError:
            continue
    return None


def _infer_delimiter(source: str) -> str:
    lowered = str(source).lower()
    return "\t" if lowered.endswith((".tsv", ".tab")) else ","


def ingest_records(source: str, schema_map: Mapping[str, str],
                   delimiter: Optional[str] = None):
    """Read a delimited table into DeathRecords plus an exclusion report.

    ``schema_map`` maps source column names to record field names and must
    cover at least case_id and primary_cause.  Rows lacking a case id or any
    cause text are excluded with a reason code, never silently dropped.
    Case ids that repeat across jurisdictions are rewritten to
    "jurisdiction:case_id" so ids stay unique within the dataset; a repeat
    within one jurisdiction is an error.
    """
    mapped_fields = set(schema_map.values())
    unknown = mapped_fields - set(_RECORD_FIELDS)
    if unknown:
        raise ConfigurationError(
            f"schema_map targets unknown record fields: {sorted(unknown)}")
    for required in ("case_id", "primary_cause"):
        if required not in mapped_fields:
            raise ConfigurationError(f"schema_map must cover {required!r}")
    if delimiter is None:
        delimiter = _infer_delimiter(source)

    try:
        handle = open(source, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {source}: {exc}") from exc

    rows = []
    with handle:
        reader = csv.DictReader(handle, delimiter=delimiter)
        header = reader.fieldnames or []
        missing_cols = [col for col in schema_map if col not in header]
        if missing_cols:
            raise TableParseError(
                f"{source} is missing mapped columns: {missing_cols}")
        for row_number, raw in enumerate(reader, start=1):
            fields = {name: "" for name in _RECORD_FIELDS}
            for column, target in schema_map.items():
                fields[target] = (raw.get(column) or "").strip()
            rows.append((row_number, fields))

    records = []
    excluded = []
    seen_composite = set()
    by_plain_id = {}
    for row_number, fields in rows:
        case_id = fields["case_id"]
        if not case_id:
            excluded.append(ExcludedRow(row_number, "", "missing_case_id"))
            continue
        combined = f"{fields['primary_cause']} {fields['secondary_cause']}".strip()
        if not combined:
            excluded.append(ExcludedRow(row_number, case_id, "missing_text"))
            continue
        jurisdiction = fields["jurisdiction"]
        composite = (jurisdiction, case_id)
        if composite in seen_composite:
            raise ValidationError(
                f"duplicate case_id {case_id!r} in jurisdiction {jurisdiction!r}")
        seen_composite.add(composite)
        record = DeathRecord(
            case_id=case_id,
            jurisdiction=jurisdiction,
            age=_parse_age(fields["age"]),
            gender=fields["gender"],
            race=fields["race"],
            date_of_death=_parse_date(fields["date_of_death"]),
            manner_of_death=fields["manner_of_death"],
            primary_cause=fields["primary_cause"],
            secondary_cause=fields["secondary_cause"],
        )
        records.append(record)
        by_plain_id.setdefault(case_id, set()).add(jurisdiction)

    notes = []
    colliding = {cid for cid, juris in by_plain_id.items() if len(juris) > 1}
    if colliding:
        records = [
            DeathRecord(**{
                **{f: getattr(r, f) for f in _RECORD_FIELDS},
                "case_id": f"{r.jurisdiction}:{r.case_id}",
            }) if r.case_id in colliding else r
            for r in records
        ]
        notes.append(
            f"{len(colliding)} case_id value(s) repeated across jurisdictions; "
            "rewritten to jurisdiction:case_id")
    final_ids = [r.case_id for r in records]
    if len(set(final_ids)) != len(final_ids):
        raise ValidationError("case ids are not unique after disambiguation")

    report = ExclusionReport(
        input_rows=len(rows), retained=len(records),
        excluded=excluded, notes=notes)
    return records, report


def load_gold_labels(source: str, schema: LabelSchema,
                     delimiter: Optional[str] = None,
                     case_id_column: str = "case_id") -> dict:
    """Read per-case 0/1 gold labels keyed by case id.

    The file must carry one column per schema class, named exactly like the
    class.  Returns case_id -> LabelVector in schema order.
    """
    if delimiter is None:
        delimiter = _infer_delimiter(source)
    try:
        handle = open(source, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {source}: {exc}") from exc
    gold = {}
    with handle:
        reader = csv.DictReader(handle, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in (case_id_column, *schema.classes) if c not in header]
        if missing:
            raise TableParseError(f"{source} is missing label columns: {missing}")
        for raw in reader:
            case_id = (raw.get(case_id_column) or "").strip()
            if not case_id:
                raise ValidationError(f"{source}: label row without a case id")
            if case_id in gold:
                raise ValidationError(f"duplicate case_id {case_id!r} in labels")
            bits = []
            for cls in schema.classes:
                value = (raw.get(cls) or "").strip()
                if value not in ("0", "1"):
                    raise ValidationError(
                        f"label for case {case_id!r}, class {cls!r} must be 0 or 1, "
                        f"got {value!r}")
                bits.append(int(value))
            gold[case_id] = LabelVector(tuple(bits))
    return gold


def assemble_cases(records: Sequence[DeathRecord], gold: Mapping[str, LabelVector],
                   stop_list: Optional[Iterable[str]] = None) -> list:
    """Join records with gold labels and attach normalized text."""
    missing = [r.case_id for r in records if r.case_id not in gold]
    if missing:
        shown = ", ".join(repr(m) for m in missing[:5])
        raise ValidationError(
            f"{len(missing)} record(s) have no gold labels (first: {shown})")
    return [
        LabeledCase(
            record=record,
            normalized_text=normalize_text(record.combined_cause(), stop_list),
            gold=gold[record.case_id],
        )
        for record in records
    ]


def gold_matrix(cases: Sequence[LabeledCase], schema: LabelSchema) -> np.ndarray:
    """Stack gold vectors into an (n_cases, n_classes) 0/1 matrix."""
    if not cases:
        return np.zeros((0, len(schema.classes)), dtype=np.int64)
    matrix = np.stack([case.gold.to_array() for case in cases])
    if matrix.shape[1] != len(schema.classes):
        raise ValidationError(
            f"gold vectors have {matrix.shape[1]} classes, schema has "
            f"{len(schema.classes)}")
    return matrix


def apply_rare_grouping(substance_counts: Mapping[str, int],
                        schema: LabelSchema) -> dict:
    """Map each substance to its class, sending rare ones to the catch-all.

    A substance below the cutoff goes to "others"; one at or above the cutoff
    must have a class of its own name in the schema.
    """
    known = set(schema.classes)
    mapping = {}
    orphans = []
    for name, count in substance_counts.items():
        if count < 0:
            raise ValidationError(f"negative count for substance {name!r}")
        if count < schema.rare_cutoff:
            mapping[name] = OTHERS_CLASS
        elif name in known:
            mapping[name] = name
        else:
            orphans.append(name)
    if orphans:
        raise ConfigurationError(
            "substances at or above the rare cutoff have no schema class: "
            f"{sorted(orphans)}")
    return mapping


@dataclass
class LintWarning:
    case_id: str
    message: str


@dataclass
class LintReport:
    """Advisory label-consistency report; lint never mutates labels."""

    n_cases: int
    positive_counts: dict
    label_count_distribution: dict
    warnings: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"cases: {self.n_cases}", "positives per class:"]
        for cls, count in self.positive_counts.items():
            lines.append(f"  {cls}: {count}")
        lines.append("cases by number of positive labels:")
        for k in sorted(self.label_count_distribution):
            lines.append(f"  {k}: {self.label_count_distribution[k]}")
        lines.append(f"implication warnings: {len(self.warnings)}")
        return "\n".join(lines)


def lint_labels(cases: Sequence[LabeledCase], schema: LabelSchema) -> LintReport:
    """Check gold labels against the implication hierarchy and tally counts."""
    matrix = gold_matrix(cases, schema)
    positives = {cls: int(matrix[:, i].sum())
                 for i, cls in enumerate(schema.classes)}
    row_sums = matrix.sum(axis=1)
    distribution = {int(k): int((row_sums == k).sum())
                    for k in np.unique(row_sums)} if len(cases) else {}
    warnings = []
    edge_idx = [(schema.index(c), schema.index(p), c, p)
                for c, p in schema.implication_edges]
    for case, row in zip(cases, matrix):
        for ci, pi, child, parent in edge_idx:
            if row[ci] == 1 and row[pi] == 0:
                warnings.append(LintWarning(
                    case.case_id, f"{child}=1 but {parent}=0"))
    return LintReport(
        n_cases=len(cases),
        positive_counts=positives,
        label_count_distribution=distribution,
        warnings=warnings,
    )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint, exhaustive train/validation/test partition of case ids."""

    train: tuple
    validation: tuple
    test: tuple
    strategy: str
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "validation", tuple(self.validation))
        object.__setattr__(self, "test", tuple(self.test))
        parts = (set(self.train), set(self.validation), set(self.test))
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ValidationError("split partitions overlap")

    def sizes(self) -> tuple:
        return (len(self.train), len(self.validation), len(self.test))

    def to_manifest(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_manifest(), sort_keys=True, indent=2)

    @classmethod
    def from_manifest(cls, payload: Mapping) -> "DatasetSplit":
        return cls(
            train=tuple(payload["train"]),
            validation=tuple(payload["validation"]),
            test=tuple(payload["test"]),
            strategy=payload["strategy"],
            seed=int(payload["seed"]),
        )

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def make_splits(cases: Sequence[LabeledCase], strategy: str, seed: int,
                target_class: Optional[str] = None,
                schema: Optional[LabelSchema] = None) -> DatasetSplit:
    """Partition cases deterministically under one of two strategies.

    stratified_80_20 needs a target class and keeps its prevalence equal in
    train and test (validation stays empty); random_60_20_20 takes no target
    class and deals 60/20/20 by count rounding.
    """
    if strategy not in STRATEGIES:
        raise SplitError(f"unknown split strategy {strategy!r}")
    ids = sorted(case.case_id for case in cases)
    if len(set(ids)) != len(ids):
        raise SplitError("case ids must be unique before splitting")
    rng = np.random.default_rng(seed)

    if strategy == "stratified_80_20":
        if target_class is None:
            raise SplitError("stratified_80_20 requires a target class")
        schema = schema or default_schema()
        target_idx = schema.index(target_class)
        by_id = {case.case_id: case for case in cases}
        pos = [cid for cid in ids if by_id[cid].gold.bits[target_idx] == 1]
        neg = [cid for cid in ids if by_id[cid].gold.bits[target_idx] == 0]
        if len(pos) < 2:
            raise SplitError(
                f"cannot stratify on {target_class!r}: fewer than 2 positives")
        train, test = [], []
        for stratum in (pos, neg):
            order = rng.permutation(len(stratum))
            n_test = round(0.2 * len(stratum))
            for rank, position in enumerate(order):
                (test if rank < n_test else train).append(stratum[position])
        return DatasetSplit(
            train=tuple(sorted(train)), validation=(),
            test=tuple(sorted(test)), strategy=strategy, seed=seed)

    if target_class is not None:
        raise SplitError("random_60_20_20 does not take a target class")
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(shuffled)
    n_train = round(0.6 * n)
    n_val = round(0.2 * n)
    return DatasetSplit(
        train=tuple(sorted(shuffled[:n_train])),
        validation=tuple(sorted(shuffled[n_train:n_train + n_val])),
        test=tuple(sorted(shuffled[n_train + n_val:])),
        strategy=strategy, seed=seed)


def split_cases(cases: Sequence[LabeledCase], split: DatasetSplit) -> tuple:
    """Materialize (train, validation, test) case lists from a split."""
    by_id = {case.case_id: case for case in cases}
    selected = []
    for part in (split.train, split.validation, split.test):
        missing = [cid for cid in part if cid not in by_id]
        if missing:
            raise ValidationError(
                f"split references unknown case ids (first: {missing[0]!r})")
        selected.append([by_id[cid] for cid in part])
    return tuple(selected)
