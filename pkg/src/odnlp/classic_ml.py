"""Classic classifiers over document vectors.

Two families share this module: per-class binary models selected by
cross-validated AUROC and later combined into one multi-label predictor, and
natively multi-label tree ensembles selected on a validation split.  Four
architectures are supported everywhere a binary model is needed:
logistic_regression, gradient_boosted_trees, random_forest, support_vector.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import joblib
import numpy as np
from sklearn.ensemble import GradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.multioutput import MultiOutputClassifier
from sklearn.svm import SVC

from .corpus import (
    LabelSchema,
    LabelVector,
    default_schema,
    gold_matrix,
    schema_fingerprint,
)
from .embeddings import EmbedderConfig, embed_corpus, stack_vectors
from .errors import ConfigurationError, FoldError, TrainingError, ValidationError
from .eval_metrics import hamming_loss, ranking_metrics

ARCHITECTURES = (
    "logistic_regression",
    "gradient_boosted_trees",
    "random_forest",
    "support_vector",
)
N_FOLDS = 10
DECISION_THRESHOLD = 0.5
GRID_VERSION = "v1"


@dataclass(frozen=True)
class HyperGrid:
    """One architecture plus the hyperparameter candidates to sweep."""

    architecture: str
    grid: dict

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {self.architecture!r}")
        if not self.grid:
            raise ConfigurationError("hyperparameter grid must be non-empty")
        for name, values in self.grid.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigurationError(
                    f"grid entry {name!r} must be a non-empty list")

    def combinations(self) -> list:
        names = list(self.grid)
        return [dict(zip(names, values))
                for values in itertools.product(*(self.grid[n] for n in names))]


def default_grids() -> dict:
    """Shipped per-architecture grids (version v1); run configs may widen."""
    return {
        "logistic_regression": HyperGrid(
            "logistic_regression", {"C": [0.01, 0.1, 1.0, 10.0]}),
        "gradient_boosted_trees": HyperGrid(
            "gradient_boosted_trees",
            {"n_estimators": [100, 200], "learning_rate": [0.05, 0.1],
             "max_depth": [2, 3]}),
        "random_forest": HyperGrid(
            "random_forest",
            {"n_estimators": [200, 400], "max_depth": [None, 16],
             "min_samples_leaf": [1, 3]}),
        "support_vector": HyperGrid(
            "support_vector", {"C": [0.1, 1.0, 10.0], "kernel": ["linear", "rbf"]}),
    }


@dataclass(frozen=True)
class CvResult:
    """Cross-validation outcome for one hyperparameter combination."""

    combination: dict
    fold_scores: tuple
    mean_score: float

    def __post_init__(self):
        object.__setattr__(self, "fold_scores", tuple(float(s) for s in self.fold_scores))
        if len(self.fold_scores) != N_FOLDS:
            raise ValidationError(
                f"expected {N_FOLDS} fold scores, got {len(self.fold_scores)}")

    @classmethod
    def from_scores(cls, combination: dict, fold_scores: Sequence[float]) -> "CvResult":
        scores = tuple(float(s) for s in fold_scores)
        return cls(combination=dict(combination), fold_scores=scores,
                   mean_score=float(np.mean(scores)))


@dataclass
class GridSearchResult:
    best: CvResult
    results: list
    fold_fingerprint: str


def _check_features(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("feature matrix must be 2-dimensional")
    finite = np.isfinite(X).all(axis=1)
    if not finite.all():
        row = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"non-finite feature value at row {row}")
    return X


def balanced_sample_weights(y: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1 over the sample."""
    y = np.asarray(y)
    n = len(y)
    n_pos = int(y.sum())
    n_neg = n - n_pos
    return np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))


def assign_folds(y: np.ndarray, seed: int, n_folds: int = N_FOLDS) -> np.ndarray:
    """Stratified fold ids, dealt round-robin after a seeded shuffle.

    Raises FoldError when any fold would hold fewer than 2 positives or 2
    negatives; folds that thin cannot score AUROC reliably.
    """
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    for value in (0, 1):
        idx = np.flatnonzero(y == value)
        order = rng.permutation(len(idx))
        for rank, position in enumerate(order):
            folds[idx[position]] = rank % n_folds
    for fold in range(n_folds):
        mask = folds == fold
        pos = int((y[mask] == 1).sum())
        neg = int((y[mask] == 0).sum())
        if pos < 2 or neg < 2:
            raise FoldError(
                f"fold {fold} has {pos} positive(s) and {neg} negative(s); "
                "need at least 2 of each")
    return folds


def fold_fingerprint(folds: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(folds, dtype=np.int64).tobytes()).hexdigest()


def _make_estimator(architecture: str, combination: dict, seed: int,
                    probability: bool = False):
    try:
        if architecture == "logistic_regression":
            return LogisticRegression(max_iter=2000, **combination)
        if architecture == "gradient_boosted_trees":
            return GradientBoostingClassifier(random_state=seed, **combination)
        if architecture == "random_forest":
            return RandomForestClassifier(random_state=seed, n_jobs=1,
                                          **combination)
        if architecture == "support_vector":
            return SVC(random_state=seed, probability=probability, **combination)
    except TypeError as exc:
        raise ConfigurationError(
            f"bad hyperparameter for {architecture}: {exc}") from exc
    raise ConfigurationError(f"unknown architecture {architecture!r}")


def _continuous_scores(model, X: np.ndarray) -> np.ndarray:
    if hasattr(model, "decision_function"):
        return np.asarray(model.decision_function(X), dtype=np.float64)
    proba = model.predict_proba(X)
    classes = list(model.classes_)
    return np.asarray(proba[:, classes.index(1)], dtype=np.float64)


def _positive_probability(model, X: np.ndarray) -> np.ndarray:
    proba = model.predict_proba(X)
    classes = list(model.classes_)
    if 1 not in classes:
        return np.zeros(len(X))
    return np.asarray(proba[:, classes.index(1)], dtype=np.float64)


def _fold_auroc(scores: np.ndarray, y: np.ndarray) -> float:
    # midrank AUROC, inlined to avoid a circular import of the public path
    from .eval_metrics import binary_auroc
    return binary_auroc(scores, y)


def select_best(results: Sequence[CvResult]) -> CvResult:
    """Argmax by mean score; ties keep the earliest candidate."""
    if not results:
        raise TrainingError("no cross-validation results to select from")
    best = results[0]
    for candidate in results[1:]:
        if candidate.mean_score > best.mean_score:
            best = candidate
    return best


def grid_search_cv(X: np.ndarray, y: np.ndarray, hyper: HyperGrid,
                   seed: int) -> GridSearchResult:
    """Evaluate every grid combination on identical stratified folds.

    Scores are fold AUROCs from continuous outputs; training always applies
    balanced sample weights.  The winner is the argmax of the fold mean, ties
    broken by grid enumeration order.
    """
    X = _check_features(X)
    y = np.asarray(y)
    if len(X) != len(y):
        raise ValidationError(
            f"feature rows ({len(X)}) and labels ({len(y)}) disagree")
    if y.min() == y.max():
        raise TrainingError("labels are single-class; nothing to separate")
    folds = assign_folds(y, seed)
    weights = balanced_sample_weights(y)
    results = []
    for combination in hyper.combinations():
        fold_scores = []
        for fold in range(N_FOLDS):
            holdout = folds == fold
            model = _make_estimator(hyper.architecture, combination, seed)
            model.fit(X[~holdout], y[~holdout], sample_weight=weights[~holdout])
            scores = _continuous_scores(model, X[holdout])
            fold_scores.append(_fold_auroc(scores, y[holdout]))
        results.append(CvResult.from_scores(combination, fold_scores))
    return GridSearchResult(best=select_best(results), results=results,
                            fold_fingerprint=fold_fingerprint(folds))


@dataclass
class SelectedModel:
    """A refit winner for one class: model plus its selection metadata."""

    class_name: str
    architecture: str
    combination: dict
    cv_mean_auroc: float
    fold_fingerprint: str
    model: object

    def predict(self, X: np.ndarray):
        X = _check_features(X)
        scores = _positive_probability(self.model, X)
        return (scores >= DECISION_THRESHOLD).astype(np.int64), scores


@dataclass
class BinaryClassifierBundle:
    """One selected binary model per class, combinable into a multi-label head."""

    classes: tuple
    embedding_backend: str
    seed: int
    schema_hash: str = ""
    per_class: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "classes": list(self.classes),
            "embedding_backend": self.embedding_backend,
            "seed": self.seed,
            "schema_hash": self.schema_hash,
            "selected": {
                name: {
                    "architecture": sel.architecture,
                    "combination": sel.combination,
                    "cv_mean_auroc": sel.cv_mean_auroc,
                }
                for name, sel in self.per_class.items()
            },
            "failures": dict(self.failures),
        }


def _embed_features(cases, embedder: EmbedderConfig, table, lexicon,
                    cache: dict) -> np.ndarray:
    key = id(cases)
    if key not in cache:
        texts = [case.normalized_text for case in cases]
        vectors = embed_corpus(texts, embedder, table=table, lexicon=lexicon)
        cache[key] = _check_features(stack_vectors(vectors))
    return cache[key]


def train_per_drug_bundle(cases, embedder: EmbedderConfig, grids: Mapping,
                          seed: int, schema: Optional[LabelSchema] = None,
                          classes: Optional[Sequence[str]] = None,
                          table=None, lexicon=None) -> BinaryClassifierBundle:
    """Select and refit one binary model per class.

    ``cases`` is either one shared training list or a mapping class -> list
    when each class carries its own stratified split.  ``grids`` maps
    architecture names to HyperGrids; selection runs across every
    architecture provided and picks the highest CV mean AUROC.  A failing
    class is recorded under ``failures`` without aborting the others.
    """
    schema = schema or default_schema()
    classes = tuple(classes or schema.classes)
    for name in classes:
        schema.index(name)
    for grid in grids.values():
        if not isinstance(grid, HyperGrid):
            raise ConfigurationError("grids must map architecture -> HyperGrid")
    if isinstance(cases, Mapping):
        missing = [c for c in classes if c not in cases]
        if missing:
            raise ConfigurationError(
                f"no training cases supplied for classes: {missing}")
        per_class_cases = {c: cases[c] for c in classes}
    else:
        per_class_cases = {c: cases for c in classes}

    bundle = BinaryClassifierBundle(
        classes=classes, embedding_backend=embedder.backend, seed=seed,
        schema_hash=schema_fingerprint(schema))
    cache: dict = {}
    for name in classes:
        class_cases = per_class_cases[name]
        X = _embed_features(class_cases, embedder, table, lexicon, cache)
        y = gold_matrix(class_cases, schema)[:, schema.index(name)]
        try:
            winner = None
            winner_arch = None
            winner_fp = ""
            for architecture, grid in grids.items():
                if architecture != grid.architecture:
                    raise ConfigurationError(
                        f"grid key {architecture!r} disagrees with its "
                        f"architecture {grid.architecture!r}")
                search = grid_search_cv(X, y, grid, seed)
                if winner is None or search.best.mean_score > winner.mean_score:
                    winner = search.best
                    winner_arch = architecture
                    winner_fp = search.fold_fingerprint
            model = _make_estimator(winner_arch, winner.combination, seed,
                                    probability=True)
            model.fit(X, y, sample_weight=balanced_sample_weights(y))
            bundle.per_class[name] = SelectedModel(
                class_name=name, architecture=winner_arch,
                combination=winner.combination,
                cv_mean_auroc=winner.mean_score,
                fold_fingerprint=winner_fp, model=model)
        except (TrainingError, ValidationError, ConfigurationError) as exc:
            bundle.failures[name] = f"{type(exc).__name__}: {exc}"
    return bundle


def combine_bundle_predict(bundle: BinaryClassifierBundle, X: np.ndarray):
    """Stack per-class decisions and scores into multi-label outputs.

    Returns (one LabelVector per case, score matrix in class order).  Bit i
    comes from the class-i model alone.
    """
    missing = [c for c in bundle.classes if c not in bundle.per_class]
    if missing:
        raise ConfigurationError(f"bundle has no model for classes: {missing}")
    X = _check_features(X)
    if len(X) == 0:
        return [], np.zeros((0, len(bundle.classes)))
    pred_cols = []
    score_cols = []
    for name in bundle.classes:
        pred, scores = bundle.per_class[name].predict(X)
        pred_cols.append(pred)
        score_cols.append(scores)
    pred_matrix = np.column_stack(pred_cols)
    score_matrix = np.column_stack(score_cols)
    vectors = [LabelVector(tuple(row)) for row in pred_matrix]
    return vectors, score_matrix


MULTILABEL_ARCHITECTURES = ("random_forest", "gradient_boosted_trees")


def _make_multilabel_estimator(architecture: str, combination: dict, seed: int):
    if architecture == "random_forest":
        return _make_estimator("random_forest", combination, seed)
    if architecture == "gradient_boosted_trees":
        # one boosted model per output behind a single multi-output interface
        base = _make_estimator("gradient_boosted_trees", combination, seed)
        return MultiOutputClassifier(base)
    raise ConfigurationError(
        f"architecture {architecture!r} has no multi-label form")


def _multilabel_scores(model, X: np.ndarray, n_outputs: int) -> np.ndarray:
    if isinstance(model, MultiOutputClassifier):
        per_output = [(est.predict_proba(X), est.classes_)
                      for est in model.estimators_]
    else:
        probas = model.predict_proba(X)
        if n_outputs == 1:
            probas = [probas]
        per_output = list(zip(probas, model.classes_ if n_outputs > 1
                              else [model.classes_]))
    columns = []
    for proba, classes in per_output:
        classes = list(classes)
        if 1 in classes:
            columns.append(np.asarray(proba)[:, classes.index(1)])
        else:
            columns.append(np.zeros(len(X)))
    return np.column_stack(columns)


@dataclass
class MultiLabelModel:
    """A natively multi-label ensemble with its validation selection record."""

    architecture: str
    combination: dict
    classes: tuple
    seed: int
    selection: dict
    results: list
    model: object
    schema_hash: str = ""

    def predict(self, X: np.ndarray):
        X = _check_features(X)
        if len(X) == 0:
            empty = np.zeros((0, len(self.classes)))
            return empty.astype(np.int64), empty
        scores = _multilabel_scores(self.model, X, len(self.classes))
        return (scores >= DECISION_THRESHOLD).astype(np.int64), scores


def train_native_multilabel(train_cases, validation_cases,
                            embedder: EmbedderConfig, architecture: str,
                            grid: HyperGrid, seed: int,
                            schema: Optional[LabelSchema] = None,
                            table=None, lexicon=None) -> MultiLabelModel:
    """Grid-search a multi-label ensemble on a held-out validation split.

    Selection is by macro average precision on the validation cases, with
    macro AUROC and Hamming loss recorded alongside for every candidate.
    """
    if architecture not in MULTILABEL_ARCHITECTURES:
        raise ConfigurationError(
            f"architecture {architecture!r} has no multi-label form")
    if grid.architecture != architecture:
        raise ConfigurationError(
            f"grid is for {grid.architecture!r}, not {architecture!r}")
    schema = schema or default_schema()
    cache: dict = {}
    X_train = _embed_features(train_cases, embedder, table, lexicon, cache)
    X_val = _embed_features(validation_cases, embedder, table, lexicon, cache)
    Y_train = gold_matrix(train_cases, schema)
    Y_val = gold_matrix(validation_cases, schema)
    if all(Y_train[:, j].min() == Y_train[:, j].max()
           for j in range(Y_train.shape[1])):
        raise TrainingError("every label column is single-class")

    results = []
    candidates = []
    for combination in grid.combinations():
        model = _make_multilabel_estimator(architecture, combination, seed)
        model.fit(X_train, Y_train)
        scores = _multilabel_scores(model, X_val, Y_val.shape[1])
        pred = (scores >= DECISION_THRESHOLD).astype(np.int64)
        ranking = ranking_metrics(scores, Y_val, class_names=list(schema.classes))
        entry = {
            "combination": dict(combination),
            "average_precision": ranking.macro_ap,
            "auroc": ranking.macro_auroc,
            "hamming_loss": hamming_loss(pred, Y_val),
        }
        results.append(entry)
        candidates.append((entry, model))

    best_entry, best_model = candidates[0]
    for entry, model in candidates[1:]:
        if entry["average_precision"] > best_entry["average_precision"]:
            best_entry, best_model = entry, model
    return MultiLabelModel(
        architecture=architecture,
        combination=best_entry["combination"],
        classes=tuple(schema.classes),
        seed=seed,
        selection=dict(best_entry),
        results=results,
        model=best_model,
        schema_hash=schema_fingerprint(schema),
    )


def save_bundle(bundle: BinaryClassifierBundle, directory: str) -> None:
    """Persist a per-class bundle as joblib models plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "kind": "per_drug_bundle",
        "grid_version": GRID_VERSION,
        **bundle.summary(),
    }
    fold_fps = {name: sel.fold_fingerprint
                for name, sel in bundle.per_class.items()}
    manifest["fold_fingerprints"] = fold_fps
    with open(os.path.join(directory, "manifest.json"), "w",
              encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    models_dir = os.path.join(directory, "models")
    os.makedirs(models_dir, exist_ok=True)
    for name, selected in bundle.per_class.items():
        joblib.dump(selected, os.path.join(models_dir, f"{name}.joblib"))


def load_bundle(directory: str) -> BinaryClassifierBundle:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as handle:
            manifest = json.load(handle)
    except OSError as exc:
        raise ConfigurationError(f"cannot read bundle manifest: {exc}") from exc
    if manifest.get("kind") != "per_drug_bundle":
        raise ConfigurationError(
            f"{directory} does not hold a per-class bundle")
    bundle = BinaryClassifierBundle(
        classes=tuple(manifest["classes"]),
        embedding_backend=manifest["embedding_backend"],
        seed=int(manifest["seed"]),
        schema_hash=manifest.get("schema_hash", ""),
        failures=dict(manifest.get("failures", {})),
    )
    for name in manifest["selected"]:
        path = os.path.join(directory, "models", f"{name}.joblib")
        bundle.per_class[name] = joblib.load(path)
    return bundle


def save_multilabel(model: MultiLabelModel, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "kind": "native_multilabel",
        "grid_version": GRID_VERSION,
        "architecture": model.architecture,
        "combination": model.combination,
        "classes": list(model.classes),
        "seed": model.seed,
        "schema_hash": model.schema_hash,
        "selection": model.selection,
        "results": model.results,
    }
    with open(os.path.join(directory, "manifest.json"), "w",
              encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    joblib.dump(model.model, os.path.join(directory, "model.joblib"))


def load_multilabel(directory: str) -> MultiLabelModel:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as handle:
            manifest = json.load(handle)
    except OSError as exc:
        raise ConfigurationError(f"cannot read model manifest: {exc}") from exc
    if manifest.get("kind") != "native_multilabel":
        raise ConfigurationError(
            f"{directory} does not hold a multi-label model")
    return MultiLabelModel(
        architecture=manifest["architecture"],
        combination=manifest["combination"],
        classes=tuple(manifest["classes"]),
        seed=int(manifest["seed"]),
        selection=manifest["selection"],
        results=manifest["results"],
        model=joblib.load(os.path.join(directory, "model.joblib")),
        schema_hash=manifest.get("schema_hash", ""),
    )
