"""Experiment orchestration: declarative JSON run configs in, reproducible
run directories out.

A run directory is keyed by the hash of its effective config, owns a lock
file while active, and accumulates artifacts stage by stage (ingest, split,
train, evaluate, report). Completed stages are reused on re-run when their
recorded artifact hashes still verify, so repeating a finished experiment
retrains nothing. Metric JSON files contain no timestamps; for the classic
model families a repeated run reproduces them byte for byte.
"""

import argparse
import csv
import datetime as dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from . import encoder_finetune as enc
from . import llm_harness as llm
from .analysis_explain import (attribute_tokens, build_error_table,
                               render_attribution_report)
from .classic_ml import (HyperGrid, combine_bundle_predict, default_grids,
                         load_bundle, load_multilabel, save_bundle,
                         save_multilabel, train_native_multilabel,
                         train_per_drug_bundle)
from .corpus import (DatasetSplit, DeathRecord, LabelSchema, LabelVector,
                     LabeledCase, assemble_cases, default_schema, gold_matrix,
                     ingest_records, lint_labels, load_gold_labels,
                     make_splits, normalize_text, schema_fingerprint,
                     split_cases)
from .embeddings import EmbedderConfig, embed_corpus, stack_vectors
from .errors import (DATA_ERRORS, ClientError, ConfigurationError, StageError,
                     ToolkitError, TrainingError, ValidationError)
from .eval_metrics import MetricReport, compute_report, render_reports_table

FAMILIES = ("classic_single", "classic_multi", "encoder", "llm")
STAGES = ("ingest", "split", "train", "evaluate", "report")
SPLIT_STRATEGIES = ("stratified_80_20", "random_60_20_20", "external")

_CONFIG_KEYS = frozenset({
    "records", "labels", "out", "family", "families", "schema", "schema_map",
    "delimiter", "split", "family_config", "seed", "dataset_tag",
    "n_bootstrap",
})
_DEFAULT_SCHEMA_MAP = {"case_id": "case_id", "primary_cause": "primary_cause"}


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")


def _apply_env_overrides(payload: dict) -> None:
    """Environment variables may override paths and client endpoints only."""
    env = os.environ
    families = payload.get("family_config", {})
    if env.get("ODNLP_LLM_ENDPOINT"):
        families.setdefault("llm", {})["endpoint"] = env["ODNLP_LLM_ENDPOINT"]
        payload["family_config"] = families
    for fc in families.values():
        embedder = fc.get("embedder")
        if isinstance(embedder, dict):
            if env.get("ODNLP_VECTORS") and embedder.get("table_path"):
                embedder["table_path"] = env["ODNLP_VECTORS"]
            if env.get("ODNLP_LEXICON") and embedder.get("lexicon_path"):
                embedder["lexicon_path"] = env["ODNLP_LEXICON"]
            if env.get("ODNLP_ENCODER_DIR") and embedder.get("encoder_id"):
                embedder["encoder_id"] = env["ODNLP_ENCODER_DIR"]
    encoder_fc = families.get("encoder")
    if encoder_fc is not None and env.get("ODNLP_ENCODER_DIR") \
            and encoder_fc.get("encoder_id"):
        encoder_fc["encoder_id"] = env["ODNLP_ENCODER_DIR"]


@dataclass(frozen=True)
class RunConfig:
    """The fully resolved description of one experiment."""

    records: str
    labels: str
    out: str
    families: tuple
    schema_map: dict
    delimiter: Optional[str]
    schema_payload: Optional[dict]
    split_spec: dict
    family_config: dict
    seed: int
    dataset_tag: str
    n_bootstrap: int
    raw: bytes = field(default=b"", compare=False, repr=False)

    @classmethod
    def from_dict(cls, payload: dict, raw: Optional[bytes] = None) -> "RunConfig":
        payload = json.loads(json.dumps(payload))  # private deep copy
        unknown = set(payload) - _CONFIG_KEYS
        if unknown:
            raise ConfigurationError(
                f"unknown config keys: {sorted(unknown)}")
        for key in ("records", "labels", "out"):
            if not payload.get(key) or not isinstance(payload[key], str):
                raise ConfigurationError(f"config needs a {key!r} path")
        if "families" in payload and "family" in payload:
            raise ConfigurationError("give either 'family' or 'families'")
        families = payload.get("families") or []
        if payload.get("family"):
            families = [payload["family"]]
        if not families:
            raise ConfigurationError("config names no model family")
        bad = [f for f in families if f not in FAMILIES]
        if bad:
            raise ConfigurationError(
                f"unknown families {bad}; choose from {list(FAMILIES)}")
        if len(set(families)) != len(families):
            raise ConfigurationError("families are listed more than once")
        split_spec = dict(payload.get("split") or
                          {"strategy": "random_60_20_20"})
        if split_spec.get("strategy") not in SPLIT_STRATEGIES:
            raise ConfigurationError(
                f"unknown split strategy {split_spec.get('strategy')!r}; "
                f"choose from {list(SPLIT_STRATEGIES)}")
        _apply_env_overrides(payload)
        config = cls(
            records=payload["records"],
            labels=payload["labels"],
            out=payload["out"],
            families=tuple(families),
            schema_map=dict(payload.get("schema_map") or _DEFAULT_SCHEMA_MAP),
            delimiter=payload.get("delimiter"),
            schema_payload=payload.get("schema"),
            split_spec=split_spec,
            family_config=dict(payload.get("family_config") or {}),
            seed=int(payload.get("seed", 0)),
            dataset_tag=str(payload.get("dataset_tag", "internal_test")),
            n_bootstrap=int(payload.get("n_bootstrap", 1000)),
            raw=raw if raw is not None else b"",
        )
        config.schema()  # fail fast on a malformed schema payload
        return config

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "rb") as handle:
                raw = handle.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            payload = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload, raw=raw)

    def schema(self) -> LabelSchema:
        if self.schema_payload is None:
            return default_schema()
        try:
            return LabelSchema.from_dict(self.schema_payload)
        except ValidationError as exc:
            raise ConfigurationError(f"bad schema payload: {exc}") from exc

    def as_dict(self) -> dict:
        return {
            "records": self.records,
            "labels": self.labels,
            "out": self.out,
            "families": list(self.families),
            "schema_map": self.schema_map,
            "delimiter": self.delimiter,
            "schema": self.schema_payload,
            "split": self.split_spec,
            "family_config": self.family_config,
            "seed": self.seed,
            "dataset_tag": self.dataset_tag,
            "n_bootstrap": self.n_bootstrap,
        }

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.as_dict(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @property
    def config_bytes(self) -> bytes:
        if self.raw:
            return self.raw
        return (json.dumps(self.as_dict(), sort_keys=True, indent=2)
                + "\n").encode("utf-8")


@dataclass
class RunManifest:
    """Inventory of one run: stages executed, artifacts produced, hashes."""

    config_hash: str
    toolkit_version: str
    run_dir: str
    created_at: str
    updated_at: str
    stages: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    split_fingerprint: Optional[str] = None
    error: Optional[str] = None

    def stage_status(self, name: str) -> Optional[str]:
        for entry in self.stages:
            if entry["name"] == name:
                return entry["status"]
        return None

    def verify(self) -> list:
        """Names every inventoried artifact that is missing or altered."""
        problems = []
        for relpath, digest in self.artifacts.items():
            path = os.path.join(self.run_dir, relpath)
            if not os.path.exists(path):
                problems.append(f"missing artifact: {relpath}")
            elif _sha256_file(path) != digest:
                problems.append(f"hash mismatch: {relpath}")
        return problems

    def as_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "toolkit_version": self.toolkit_version,
            "run_dir": self.run_dir,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "stages": self.stages,
            "artifacts": self.artifacts,
            "reports": self.reports,
            "split_fingerprint": self.split_fingerprint,
            "error": self.error,
        }

    @classmethod
    def from_file(cls, path: str) -> "RunManifest":
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
        return cls(**payload)


class _Runner:
    """Executes the stage pipeline for one config inside its run directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.schema = config.schema()
        self.run_dir = os.path.join(config.out,
                                    f"run-{config.config_hash[:12]}")
        self.art_dir = os.path.join(self.run_dir, "artifacts")
        self.stage_dir = os.path.join(self.run_dir, "stages")
        self._cases = None
        self._split = None

    # ---- plumbing -------------------------------------------------------

    def _event(self, stage: str, event: str, **detail) -> None:
        line = {"ts": _now(), "stage": stage, "event": event, **detail}
        with open(os.path.join(self.run_dir, "events.jsonl"), "a",
                  encoding="utf-8") as handle:
            handle.write(json.dumps(line, sort_keys=True) + "\n")

    def _artifact(self, *parts) -> str:
        return os.path.join(self.art_dir, *parts)

    def _rel(self, path: str) -> str:
        return os.path.relpath(path, self.run_dir)

    def _hash_paths(self, *paths) -> dict:
        digests = {}
        for path in paths:
            if os.path.isdir(path):
                for root, _, names in os.walk(path):
                    for name in sorted(names):
                        full = os.path.join(root, name)
                        digests[self._rel(full)] = _sha256_file(full)
            else:
                digests[self._rel(path)] = _sha256_file(path)
        return digests

    def _models_dir(self, family: str) -> str:
        return self._artifact("models", family)

    def _family_cfg(self, family: str) -> dict:
        return dict(self.config.family_config.get(family, {}))

    def _embedder(self, family: str, fc: dict) -> EmbedderConfig:
        payload = fc.get("embedder")
        if not isinstance(payload, dict):
            raise ConfigurationError(
                f"family {family!r} needs an 'embedder' config block")
        try:
            return EmbedderConfig(**payload)
        except TypeError as exc:
            raise ConfigurationError(f"bad embedder config: {exc}") from exc

    def _grids(self, fc: dict) -> dict:
        payload = fc.get("grids")
        if payload is None:
            return default_grids()
        return {arch: HyperGrid(arch, dict(grid))
                for arch, grid in payload.items()}

    def _make_client(self, fc: dict) -> llm.HttpGenerationClient:
        endpoint = fc.get("endpoint")
        if not endpoint:
            raise ConfigurationError(
                "llm family needs an 'endpoint' (or ODNLP_LLM_ENDPOINT)")
        return llm.HttpGenerationClient(
            endpoint,
            timeout=float(fc.get("timeout", 30.0)),
            max_retries=int(fc.get("max_retries", 3)),
        )

    def _prompt_spec(self, fc: dict) -> llm.PromptSpec:
        return llm.PromptSpec(
            instruction=fc.get("instruction", llm.DEFAULT_INSTRUCTION),
            k=int(fc.get("k", 0)),
            exemplar_seed=int(fc.get("exemplar_seed", self.config.seed)),
            balanced=bool(fc.get("balanced", False)),
            max_tokens=int(fc.get("max_tokens", 64)),
            temperature=float(fc.get("temperature", 0.0)),
        )

    def _load_cases(self) -> list:
        if self._cases is None:
            path = self._artifact("cases.json")
            with open(path, encoding="utf-8") as handle:
                payload = json.load(handle)
            self._cases = [
                LabeledCase(
                    record=DeathRecord(case_id=row["case_id"],
                                       primary_cause=row["raw_text"]),
                    normalized_text=row["text"],
                    gold=LabelVector(tuple(row["bits"])),
                )
                for row in payload
            ]
        return self._cases

    def _load_split(self) -> DatasetSplit:
        if self._split is None:
            with open(self._artifact("split.json"), encoding="utf-8") as handle:
                self._split = DatasetSplit.from_manifest(json.load(handle))
        return self._split

    def _partitions(self) -> tuple:
        return split_cases(self._load_cases(), self._load_split())

    # ---- stages ---------------------------------------------------------

    def _stage_ingest(self):
        config = self.config
        records, exclusions = ingest_records(config.records, config.schema_map,
                                             config.delimiter)
        gold = load_gold_labels(config.labels, self.schema,
                                delimiter=config.delimiter)
        cases = assemble_cases(records, gold)
        lint = lint_labels(cases, self.schema)
        cases_path = self._artifact("cases.json")
        _write_json(cases_path, [
            {"case_id": c.case_id, "raw_text": c.record.combined_cause(),
             "text": c.normalized_text, "bits": list(c.gold.bits)}
            for c in cases
        ])
        excl_path = self._artifact("exclusions.json")
        _write_json(excl_path, exclusions.as_dict())
        lint_path = self._artifact("lint.json")
        _write_json(lint_path, {
            "n_cases": lint.n_cases,
            "positive_counts": lint.positive_counts,
            "label_count_distribution": {
                str(k): v for k, v in lint.label_count_distribution.items()},
            "warnings": [{"case_id": w.case_id, "message": w.message}
                         for w in lint.warnings],
            "summary": lint.summary(),
        })
        self._cases = cases
        detail = {
            "retained": len(cases),
            "excluded": len(exclusions.excluded),
            "lint_warnings": len(lint.warnings),
            "schema_hash": schema_fingerprint(self.schema),
        }
        return detail, self._hash_paths(cases_path, excl_path, lint_path)

    def _stage_split(self):
        config = self.config
        cases = self._load_cases()
        spec = config.split_spec
        seed = int(spec.get("seed", config.seed))
        if spec["strategy"] == "external":
            split = DatasetSplit(
                train=(), validation=(),
                test=tuple(sorted(c.case_id for c in cases)),
                strategy="external", seed=seed)
        else:
            split = make_splits(cases, spec["strategy"], seed,
                                target_class=spec.get("target_class"),
                                schema=self.schema)
        path = self._artifact("split.json")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(split.to_json() + "\n")
        self._split = split
        detail = {"sizes": list(split.sizes()),
                  "fingerprint": split.fingerprint}
        return detail, self._hash_paths(path)

    def _stage_train(self):
        config = self.config
        train, validation, _ = self._partitions()
        families = {}
        digests = {}
        for family in config.families:
            fc = self._family_cfg(family)
            dest = self._models_dir(family)
            if family == "classic_single":
                bundle = train_per_drug_bundle(
                    train, self._embedder(family, fc), self._grids(fc),
                    config.seed, schema=self.schema)
                if bundle.failures:
                    raise TrainingError(
                        "per-class training failed for "
                        f"{sorted(bundle.failures)}: {bundle.failures}")
                save_bundle(bundle, dest)
                digests.update(self._hash_paths(dest))
                families[family] = {
                    "trained_on": len(train),
                    "architectures": {name: model.architecture
                                      for name, model
                                      in bundle.per_class.items()},
                }
            elif family == "classic_multi":
                if not validation:
                    raise TrainingError(
                        "classic_multi selects on a validation partition; "
                        "use the random_60_20_20 split")
                architecture = fc.get("architecture", "random_forest")
                grid_payload = fc.get("grid")
                if grid_payload is None:
                    defaults = default_grids()
                    if architecture not in defaults:
                        raise ConfigurationError(
                            f"no default grid for {architecture!r}")
                    grid_payload = defaults[architecture].grid
                model = train_native_multilabel(
                    train, validation, self._embedder(family, fc),
                    architecture, HyperGrid(architecture, dict(grid_payload)),
                    config.seed, schema=self.schema)
                save_multilabel(model, dest)
                digests.update(self._hash_paths(dest))
                families[family] = {"architecture": architecture,
                                    "selection": model.selection}
            elif family == "encoder":
                if fc.get("checkpoint"):
                    families[family] = {
                        "status": "skipped (frozen checkpoint)",
                        "checkpoint": fc["checkpoint"],
                    }
                    continue
                if not validation:
                    raise TrainingError(
                        "encoder fine-tuning selects on a validation "
                        "partition; use the random_60_20_20 split")
                payload = {k: v for k, v in fc.items()
                           if k not in ("checkpoint",)}
                payload.setdefault("seed", config.seed)
                try:
                    ft_config = enc.FineTuneConfig.from_dict(payload)
                except TypeError as exc:
                    raise ConfigurationError(
                        f"bad encoder config: {exc}") from exc
                model = enc.finetune_encoder(train, validation, ft_config,
                                             schema=self.schema)
                enc.save_checkpoint(model, dest)
                digests.update(self._hash_paths(dest))
                families[family] = {"best_epoch": model.best_epoch,
                                    "epoch_log": model.epoch_log}
            else:  # llm
                sft = fc.get("sft")
                if not sft:
                    families[family] = {
                        "status": "skipped (no training required)"}
                    continue
                result = llm.run_sft(
                    self._make_client(fc), train, llm.SftConfig(**sft),
                    schema=self.schema,
                    instruction=fc.get("instruction", llm.DEFAULT_INSTRUCTION))
                os.makedirs(dest, exist_ok=True)
                sft_path = os.path.join(dest, "sft.json")
                _write_json(sft_path, {
                    "handle": result.handle,
                    "examples_consumed": result.examples_consumed,
                    "final_loss": result.final_loss,
                    "converged": result.converged,
                })
                digests.update(self._hash_paths(sft_path))
                families[family] = {"converged": result.converged,
                                    "examples_consumed":
                                        result.examples_consumed}
        detail = {"families": families}
        statuses = [entry.get("status", "") for entry in families.values()]
        if families and all(s.startswith("skipped") for s in statuses):
            detail["status"] = "skipped"
        return detail, digests

    def _scores_for_texts(self, family: str, texts, pool_cases):
        """Label matrix plus optional score matrix for arbitrary texts."""
        fc = self._family_cfg(family)
        n_classes = len(self.schema.classes)
        if family in ("classic_single", "classic_multi"):
            embedder = self._embedder(family, fc)
            X = stack_vectors(embed_corpus(texts, embedder))
            if family == "classic_single":
                bundle = load_bundle(self._models_dir(family))
                vectors, scores = combine_bundle_predict(bundle, X)
                pred = (np.stack([v.to_array() for v in vectors])
                        if vectors else np.zeros((0, n_classes), np.int64))
            else:
                model = load_multilabel(self._models_dir(family))
                pred, scores = model.predict(X)
            return pred, scores
        if family == "encoder":
            checkpoint = fc.get("checkpoint") or self._models_dir(family)
            model = enc.load_checkpoint(checkpoint)
            probs = enc.predict_probabilities(
                model, texts, batch_size=int(fc.get("batch_size", 32)))
            vectors = enc.threshold_labels(probs,
                                           model.config_snapshot.threshold)
            pred = (np.stack([v.to_array() for v in vectors])
                    if vectors else np.zeros((0, n_classes), np.int64))
            return pred, probs.values
        client = self._make_client(fc)
        spec = self._prompt_spec(fc)
        pool = llm.ExemplarPool(cases=tuple(pool_cases), schema=self.schema)
        rows = []
        for text in texts:
            prompt = llm.build_prompt(text, spec, pool)
            try:
                raw = client.generate(prompt, spec.max_tokens,
                                      spec.temperature)
            except ClientError:
                rows.append(np.zeros(n_classes, np.int64))
                continue
            rows.append(llm.parse_answer(raw, self.schema).labels.to_array())
        pred = (np.stack(rows) if rows
                else np.zeros((0, n_classes), np.int64))
        return pred, None

    def _write_predictions(self, path: str, ids, pred, scores) -> None:
        classes = list(self.schema.classes)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            header = ["case_id"] + classes
            if scores is not None:
                header += [f"p_{c}" for c in classes]
            writer.writerow(header)
            for i, case_id in enumerate(ids):
                row = [case_id] + [int(v) for v in pred[i]]
                if scores is not None:
                    row += [f"{v:.6f}" for v in scores[i]]
                writer.writerow(row)

    def _stage_evaluate(self):
        config = self.config
        split = self._load_split()
        leaked = set(split.test) & (set(split.train) | set(split.validation))
        if leaked:
            raise StageError(
                f"{len(leaked)} test case(s) appear in the training data")
        train, _, test = self._partitions()
        if not test:
            raise StageError("the test partition is empty")
        texts = [c.normalized_text for c in test]
        ids = [c.case_id for c in test]
        gold = gold_matrix(test, self.schema)
        class_names = list(self.schema.classes)
        digests = {}
        families = {}
        for family in config.families:
            stats = None
            if family == "llm":
                fc = self._family_cfg(family)
                artifact = self._artifact("generations_llm.jsonl")
                answers, report, stats = llm.evaluate_generations(
                    self._make_client(fc), test, self._prompt_spec(fc),
                    llm.ExemplarPool(cases=tuple(train), schema=self.schema),
                    schema=self.schema, model_tag=family,
                    dataset_tag=config.dataset_tag,
                    n_bootstrap=config.n_bootstrap, seed=config.seed,
                    max_in_flight=int(fc.get("max_in_flight", 4)),
                    artifact_path=artifact)
                pred = np.stack([a.labels.to_array() for a in answers])
                scores = None
                digests.update(self._hash_paths(artifact))
            else:
                pred, scores = self._scores_for_texts(family, texts, train)
                report = compute_report(
                    pred, gold, scores=scores, class_names=class_names,
                    model_tag=family, dataset_tag=config.dataset_tag,
                    n_bootstrap=config.n_bootstrap, seed=config.seed)
            repaired = enc.repair_implications(pred, self.schema)
            violations = int((repaired != pred).any(axis=1).sum())
            metrics_path = self._artifact(f"metrics_{family}.json")
            payload = {
                "config_hash": config.config_hash,
                "family": family,
                "dataset_tag": config.dataset_tag,
                "split_fingerprint": split.fingerprint,
                "implication_violations": violations,
                "report": report.as_dict(),
            }
            if stats is not None:
                payload["parse_stats"] = stats
            _write_json(metrics_path, payload)
            pred_path = self._artifact(f"predictions_{family}.csv")
            self._write_predictions(pred_path, ids, pred, scores)
            digests.update(self._hash_paths(metrics_path, pred_path))
            families[family] = {
                "macro_f1": report.metrics["macro_f1"].point,
                "accuracy": report.metrics["accuracy"].point,
                "hamming_loss": report.metrics["hamming_loss"].point,
            }
        detail = {"n_test": len(test), "families": families,
                  "split_fingerprint": split.fingerprint}
        return detail, digests

    def _read_predictions(self, family: str):
        path = self._artifact(f"predictions_{family}.csv")
        ids = []
        rows = []
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            for raw in reader:
                ids.append(raw["case_id"])
                rows.append([int(raw[c]) for c in self.schema.classes])
        return ids, np.asarray(rows, dtype=np.int64)

    def _stage_report(self):
        config = self.config
        reports = []
        report_files = []
        for family in config.families:
            path = self._artifact(f"metrics_{family}.json")
            if not os.path.exists(path):
                raise StageError(f"no metric report for {family}; "
                                 "run evaluate first")
            with open(path, encoding="utf-8") as handle:
                payload = json.load(handle)
            reports.append(MetricReport.from_dict(payload["report"]))
            report_files.append(self._rel(path))
        table = render_reports_table(reports)
        table_path = self._artifact("report.txt")
        with open(table_path, "w", encoding="utf-8") as handle:
            handle.write(table)
        digests = self._hash_paths(table_path)

        cases = {c.case_id: c for c in self._load_cases()}
        for family in config.families:
            ids, pred = self._read_predictions(family)
            gold = np.stack([cases[i].gold.to_array() for i in ids])
            error_table = build_error_table(pred, gold, ids, self.schema)
            tsv_path = self._artifact(f"error_table_{family}.tsv")
            with open(tsv_path, "w", encoding="utf-8") as handle:
                handle.write(error_table.to_delimited())
            json_path = self._artifact(f"error_table_{family}.json")
            with open(json_path, "w", encoding="utf-8") as handle:
                handle.write(error_table.to_json() + "\n")
            digests.update(self._hash_paths(tsv_path, json_path))
        detail = {"reports": report_files}
        return detail, digests

    # ---- orchestration --------------------------------------------------

    def _stage_record_path(self, stage: str) -> str:
        return os.path.join(self.stage_dir, f"{stage}.json")

    def _reusable_record(self, stage: str) -> Optional[dict]:
        path = self._stage_record_path(stage)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as handle:
            record = json.load(handle)
        if record.get("status") not in ("completed", "skipped"):
            return None
        for relpath, digest in record.get("artifacts", {}).items():
            full = os.path.join(self.run_dir, relpath)
            if not os.path.exists(full) or _sha256_file(full) != digest:
                return None
        return record

    def run(self, through_stage: Optional[str] = None) -> RunManifest:
        if through_stage is not None and through_stage not in STAGES:
            raise ConfigurationError(
                f"unknown stage {through_stage!r}; choose from {list(STAGES)}")
        os.makedirs(self.art_dir, exist_ok=True)
        os.makedirs(self.stage_dir, exist_ok=True)
        config_path = os.path.join(self.run_dir, "config.json")
        if not os.path.exists(config_path):
            with open(config_path, "wb") as handle:
                handle.write(self.config.config_bytes)

        manifest_path = os.path.join(self.run_dir, "run.json")
        created = _now()
        if os.path.exists(manifest_path):
            with open(manifest_path, encoding="utf-8") as handle:
                created = json.load(handle).get("created_at", created)
        manifest = RunManifest(
            config_hash=self.config.config_hash,
            toolkit_version=__version__,
            run_dir=self.run_dir,
            created_at=created,
            updated_at=created,
        )

        lock_path = os.path.join(self.run_dir, "lock")
        try:
            lock = open(lock_path, "x")
        except FileExistsError:
            raise StageError(
                f"run directory is locked by another process; remove "
                f"{lock_path} if that run is dead") from None
        lock.write(f"{os.getpid()} {_now()}\n")
        lock.close()

        try:
            for stage in STAGES:
                reusable = self._reusable_record(stage)
                if reusable is not None:
                    status = ("reused" if reusable["status"] == "completed"
                              else reusable["status"])
                    entry = dict(reusable, status=status)
                    manifest.stages.append(entry)
                    manifest.artifacts.update(reusable.get("artifacts", {}))
                    self._event(stage, "reused")
                else:
                    self._event(stage, "start")
                    try:
                        detail, artifacts = getattr(self,
                                                    f"_stage_{stage}")()
                    except ToolkitError as exc:
                        failure = {
                            "name": stage, "status": "failed",
                            "error": f"{type(exc).__name__}: {exc}",
                            "finished_at": _now(),
                        }
                        manifest.stages.append(failure)
                        manifest.error = f"{stage}: {failure['error']}"
                        _write_json(self._stage_record_path(stage), failure)
                        self._event(stage, "failed", error=str(exc))
                        raise
                    status = detail.pop("status", "completed")
                    entry = {
                        "name": stage, "status": status,
                        "detail": detail, "artifacts": artifacts,
                        "finished_at": _now(),
                    }
                    _write_json(self._stage_record_path(stage), entry)
                    manifest.stages.append(entry)
                    manifest.artifacts.update(artifacts)
                    self._event(stage, "done")
                entry_detail = entry.get("detail", {})
                if stage == "split":
                    manifest.split_fingerprint = entry_detail.get(
                        "fingerprint")
                if stage == "report":
                    manifest.reports = entry_detail.get("reports", [])
                if stage == through_stage:
                    break
        finally:
            manifest.updated_at = _now()
            _write_json(manifest_path, manifest.as_dict())
            os.unlink(lock_path)
        return manifest


def run_experiment(config, through_stage: Optional[str] = None) -> RunManifest:
    """Execute (or resume) the experiment a config describes.

    ``config`` may be a RunConfig, a plain dict, or a path to a JSON file.
    Stops after ``through_stage`` when given.
    """
    if isinstance(config, (str, os.PathLike)):
        config = RunConfig.from_file(os.fspath(config))
    elif isinstance(config, dict):
        config = RunConfig.from_dict(config)
    return _Runner(config).run(through_stage)


# ---- command handlers ----------------------------------------------------


def _load_cli_config(args, apply_out: bool = True) -> RunConfig:
    config = RunConfig.from_file(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if apply_out and getattr(args, "out", None):
        overrides["out"] = args.out
    if overrides:
        payload = dict(config.as_dict(), **overrides)
        config = RunConfig.from_dict(payload)
    return config


def _run_through(args, stage: str) -> RunManifest:
    config = _load_cli_config(args)
    manifest = _Runner(config).run(stage)
    return manifest


def cmd_ingest(args) -> int:
    manifest = _run_through(args, "ingest")
    entry = manifest.stages[0]
    detail = entry.get("detail", {})
    print(f"ingest {entry['status']}: retained={detail.get('retained')} "
          f"excluded={detail.get('excluded')} run_dir={manifest.run_dir}")
    return 0


def cmd_split(args) -> int:
    manifest = _run_through(args, "split")
    detail = manifest.stages[-1].get("detail", {})
    print(f"split sizes={detail.get('sizes')} "
          f"fingerprint={manifest.split_fingerprint}")
    return 0


def cmd_train(args) -> int:
    manifest = _run_through(args, "train")
    entry = manifest.stages[-1]
    print(f"train {entry['status']}; run_dir={manifest.run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = _run_through(args, "evaluate")
    detail = manifest.stages[-1].get("detail", {})
    for family, summary in detail.get("families", {}).items():
        print(f"{family}: macro_f1={summary['macro_f1']:.4f} "
              f"accuracy={summary['accuracy']:.4f} "
              f"hamming_loss={summary['hamming_loss']:.4f}")
    print(f"run_dir={manifest.run_dir}")
    return 0


def cmd_predict(args) -> int:
    config = _load_cli_config(args, apply_out=False)
    runner = _Runner(config)
    runner.run("train")
    family = args.family or config.families[0]
    if family not in config.families:
        raise ConfigurationError(
            f"family {family!r} is not part of this config")
    records, _ = ingest_records(args.infile, config.schema_map,
                                config.delimiter)
    texts = [normalize_text(r.combined_cause()) for r in records]
    train, _, _ = runner._partitions()
    pred, scores = runner._scores_for_texts(family, texts, train)
    ids = [r.case_id for r in records]
    runner._write_predictions(args.out, ids, pred, scores)
    print(f"wrote {len(ids)} prediction rows to {args.out}")
    return 0


def cmd_explain(args) -> int:
    config = _load_cli_config(args, apply_out=False)
    if "encoder" not in config.families:
        raise ConfigurationError("explain needs an 'encoder' family run")
    runner = _Runner(config)
    runner.run("train")
    fc = runner._family_cfg("encoder")
    checkpoint = fc.get("checkpoint") or runner._models_dir("encoder")
    model = enc.load_checkpoint(checkpoint)
    amap = attribute_tokens(model, normalize_text(args.text),
                            args.target_class, steps=args.steps)
    document = render_attribution_report([amap], format=args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(document)
        print(f"wrote attribution report to {args.out}")
    else:
        print(document, end="")
    return 0


def cmd_report(args) -> int:
    if args.run:
        config = RunConfig.from_file(os.path.join(args.run, "config.json"))
        table_path = os.path.join(args.run, "artifacts", "report.txt")
        if not os.path.exists(table_path):
            raise StageError(f"{args.run} has no report; run evaluate first")
        with open(table_path, encoding="utf-8") as handle:
            print(handle.read(), end="")
        return 0
    manifest = _run_through(args, "report")
    with open(os.path.join(manifest.run_dir, "artifacts", "report.txt"),
              encoding="utf-8") as handle:
        print(handle.read(), end="")
    return 0


def cmd_llm_eval(args) -> int:
    config = _load_cli_config(args)
    if "llm" not in config.families:
        raise ConfigurationError("llm-eval needs an 'llm' family in the config")
    manifest = _Runner(config).run("evaluate")
    metrics_path = os.path.join(manifest.run_dir, "artifacts",
                                "metrics_llm.json")
    with open(metrics_path, encoding="utf-8") as handle:
        payload = json.load(handle)
    stats = payload.get("parse_stats", {})
    macro = payload["report"]["metrics"]["macro_f1"]["point"]
    print(f"llm: macro_f1={macro:.4f} ok={stats.get('ok')} "
          f"repaired={stats.get('repaired')} failed={stats.get('failed')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odnlp",
        description="Overdose cause-of-death text classification toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    def add(name, handler, help_text, config_required=True, dir_out=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=config_required,
                        help="path to a JSON run config")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        if dir_out:
            sp.add_argument("--out", default=None,
                            help="override the config output directory")
        sp.set_defaults(handler=handler)
        return sp

    add("ingest", cmd_ingest, "load records and labels into a run directory")
    add("split", cmd_split, "partition the ingested cases")
    add("train", cmd_train, "train every configured model family")
    add("evaluate", cmd_evaluate, "score the test partition")

    predict = add("predict", cmd_predict, "label new cases with a trained run",
                  dir_out=False)
    predict.add_argument("--in", dest="infile", required=True,
                         help="delimited file of cases to label")
    predict.add_argument("--out", required=True, help="output CSV path")
    predict.add_argument("--family", default=None,
                         help="which trained family to use (default: first)")

    explain = add("explain", cmd_explain,
                  "token attributions from a fine-tuned encoder",
                  dir_out=False)
    explain.add_argument("--text", required=True,
                         help="cause-of-death text to explain")
    explain.add_argument("--target-class", required=True,
                         help="schema class to attribute")
    explain.add_argument("--steps", type=int, default=50,
                         help="integration steps (default 50)")
    explain.add_argument("--format", choices=("html", "text"),
                         default="text")
    explain.add_argument("--out", default=None,
                         help="write the report here instead of stdout")

    report = add("report", cmd_report, "render the metric table for a run",
                 config_required=False)
    report.add_argument("--run", default=None,
                        help="finished run directory (alternative to --config)")

    add("llm-eval", cmd_llm_eval, "run the generative harness end to end")
    return parser


def dispatch(argv=None) -> int:
    """Entry point with the documented exit-code contract.

    0 success; 1 usage or configuration error; 2 data error; 3 stage or
    client failure.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command == "report" and not (args.config or args.run):
        print("error: report needs --config or --run", file=sys.stderr)
        return 1
    try:
        return args.handler(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ToolkitError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
