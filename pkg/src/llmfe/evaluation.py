"""Scoring of feature programs against prediction models.

A candidate is scored by transforming the train and validation feature
tables in the sandbox, refitting a model from scratch on the transformed
train split, and measuring it on validation. Scores are signed so that
larger is always better; a program that breaks anywhere along the way gets
a disqualified Score rather than an exception.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.ensemble import HistGradientBoostingClassifier, HistGradientBoostingRegressor
from sklearn.neural_network import MLPClassifier, MLPRegressor

from .dataset import Dataset
from .sandbox import ExecutionLimits, FeatureProgram, execute

logger = logging.getLogger(__name__)

GRADIENT_BOOSTED_TREES = "gradient_boosted_trees"
MLP = "mlp"
MODEL_KINDS = (GRADIENT_BOOSTED_TREES, MLP)

ACCURACY = "accuracy"
N_RMSE = "n_rmse"
METRIC_KINDS = (ACCURACY, N_RMSE)


class EvaluationError(ValueError):
    pass


class ZeroVariance(EvaluationError):
    """n_rmse is undefined when the normalizer is zero."""


class ColumnMismatch(EvaluationError):
    """Transformed train and validation tables disagree on columns."""


def metric_for(task_kind: str) -> str:
    return ACCURACY if task_kind == "classification" else N_RMSE


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise EvaluationError("empty label vectors")
    return float(np.mean(y_true == y_pred))


def n_rmse(y_true, y_pred, normalizer: float) -> float:
    """Root mean squared error divided by a scale, typically std of train labels."""
    if normalizer == 0:
        raise ZeroVariance("normalizer is zero")
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise EvaluationError("empty label vectors")
    rmse = float(np.sqrt(np.mean((y_true - y_pred) ** 2)))
    return rmse / float(normalizer)


def label_scale(train_labels) -> float:
    """Normalizer for n_rmse: population std (ddof=0) of the train labels."""
    return float(np.std(np.asarray(train_labels, dtype=float)))


def _is_numeric(series: pd.Series) -> bool:
    return pd.api.types.is_numeric_dtype(series) and not pd.api.types.is_bool_dtype(series)


def preprocess(train_table: pd.DataFrame, val_table: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    """Turn a pair of feature tables into aligned numeric matrices.

    Everything is fit on the train table only: categorical columns are
    integer-encoded against the train categories (unseen or missing values
    map to -1), numeric columns have non-finite cells replaced by the train
    median. Column kind is decided by the train dtype.
    """
    if list(train_table.columns) != list(val_table.columns):
        raise ColumnMismatch(
            f"train columns {list(train_table.columns)} != val columns {list(val_table.columns)}"
        )
    n_train, n_val = len(train_table), len(val_table)
    cols_train, cols_val = [], []
    for name in train_table.columns:
        tr = train_table[name]
        va = val_table[name]
        if _is_numeric(tr):
            tr = np.asarray(tr, dtype=float)
            va = np.asarray(pd.to_numeric(va, errors="coerce"), dtype=float)
            finite = tr[np.isfinite(tr)]
            median = float(np.median(finite)) if finite.size else 0.0
            tr = np.where(np.isfinite(tr), tr, median)
            va = np.where(np.isfinite(va), va, median)
        else:
            cats = sorted({str(v) for v in tr[tr.notna()]})
            lookup = {c: i for i, c in enumerate(cats)}
            tr = np.array(
                [lookup.get(str(v), -1) if pd.notna(v) else -1 for v in tr], dtype=float
            )
            va = np.array(
                [lookup.get(str(v), -1) if pd.notna(v) else -1 for v in va], dtype=float
            )
        cols_train.append(tr)
        cols_val.append(va)
    x_train = np.column_stack(cols_train) if cols_train else np.empty((n_train, 0))
    x_val = np.column_stack(cols_val) if cols_val else np.empty((n_val, 0))
    return x_train, x_val


def _make_estimator(model_kind: str, classification: bool, seed: int, hyperparameters: dict):
    params = dict(hyperparameters or {})
    if model_kind == GRADIENT_BOOSTED_TREES:
        cls = HistGradientBoostingClassifier if classification else HistGradientBoostingRegressor
        return cls(random_state=seed, **params)
    if model_kind == MLP:
        cls = MLPClassifier if classification else MLPRegressor
        defaults = dict(
            hidden_layer_sizes=(64, 64),
            early_stopping=True,
            validation_fraction=0.1,
        )
        defaults.update(params)
        return cls(random_state=seed, **defaults)
    raise EvaluationError(f"unknown model kind {model_kind!r}, expected one of {MODEL_KINDS}")


class PredictionModel:
    """Thin wrapper binding a model kind to a task and a seed."""

    def __init__(self, kind: str, classification: bool, seed: int = 0, hyperparameters: dict | None = None):
        self.kind = kind
        self.classification = classification
        self.seed = seed
        self.hyperparameters = dict(hyperparameters or {})
        self._estimator = None

    def fit(self, x, y) -> "PredictionModel":
        est = _make_estimator(self.kind, self.classification, self.seed, self.hyperparameters)
        est.fit(x, np.asarray(y))
        self._estimator = est
        return self

    def predict(self, x) -> np.ndarray:
        if self._estimator is None:
            raise EvaluationError("predict called before fit")
        return np.asarray(self._estimator.predict(x))


@dataclass(frozen=True)
class Score:
    """A signed validation score; larger is better.

    value is the signed quantity used for search (accuracy as-is, n_rmse
    negated); raw_metric keeps the metric's natural sign for reporting.
    Disqualified scores carry no value and order below every valid score.
    """

    value: float | None
    raw_metric: float | None
    disqualified: bool = False
    reason: str | None = None

    @property
    def ordering(self) -> tuple[int, float]:
        if self.disqualified or self.value is None:
            return (0, float("-inf"))
        return (1, self.value)

    @staticmethod
    def failed(reason: str) -> "Score":
        return Score(value=None, raw_metric=None, disqualified=True, reason=reason)


def _score_tables(
    model_kind: str,
    train_table: pd.DataFrame,
    val_table: pd.DataFrame,
    train_ds: Dataset,
    val_ds: Dataset,
    metric: str,
    seed: int,
) -> Score:
    try:
        x_train, x_val = preprocess(train_table, val_table)
    except ColumnMismatch as exc:
        return Score.failed(f"column_mismatch: {exc}")
    try:
        model = PredictionModel(model_kind, train_ds.task.is_classification, seed)
        model.fit(x_train, train_ds.labels)
        preds = model.predict(x_val)
    except ZeroVariance:
        raise
    except Exception as exc:
        logger.debug("model failed: %s", exc)
        return Score.failed(f"model_error: {type(exc).__name__}")
    if metric == ACCURACY:
        raw = accuracy(val_ds.labels, preds)
        return Score(value=raw, raw_metric=raw)
    raw = n_rmse(val_ds.labels, preds, label_scale(train_ds.labels))
    return Score(value=-raw, raw_metric=raw)


def feature_score(
    model_kind: str,
    program: FeatureProgram,
    train: Dataset,
    val: Dataset,
    metric: str | None = None,
    limits: ExecutionLimits = ExecutionLimits(),
    seed: int = 0,
) -> Score:
    """Score one program: sandbox-transform train and val, refit, measure.

    Deterministic given the seed. Any disqualification along the way
    (sandbox, schema mismatch, model failure) is returned as a value, not
    raised; ZeroVariance still raises because it is a property of the
    dataset, not of the candidate.
    """
    metric = metric or metric_for(train.task.kind)
    if metric not in METRIC_KINDS:
        raise EvaluationError(f"unknown metric {metric!r}")
    label_name = train.labels.name
    out_train = execute(program, train.features, limits, label_name)
    if not out_train.ok:
        return Score.failed(f"train/{out_train.reason}: {out_train.detail}".rstrip(": "))
    out_val = execute(program, val.features, limits, label_name)
    if not out_val.ok:
        return Score.failed(f"val/{out_val.reason}: {out_val.detail}".rstrip(": "))
    return _score_tables(model_kind, out_train.table, out_val.table, train, val, metric, seed)


def base_score(
    model_kind: str,
    train: Dataset,
    val: Dataset,
    metric: str | None = None,
    seed: int = 0,
) -> Score:
    """Score the untransformed feature tables; the reference point for search."""
    metric = metric or metric_for(train.task.kind)
    return _score_tables(
        model_kind,
        train.features.reset_index(drop=True),
        val.features.reset_index(drop=True),
        train,
        val,
        metric,
        seed,
    )


@dataclass(frozen=True)
class Evaluator:
    """Bundles model kind, metric, and limits for use inside the search loop."""

    model_kind: str = GRADIENT_BOOSTED_TREES
    metric: str | None = None
    limits: ExecutionLimits = field(default_factory=ExecutionLimits)

    def score(self, program: FeatureProgram, train: Dataset, val: Dataset, seed: int) -> Score:
        return feature_score(
            self.model_kind, program, train, val, self.metric, self.limits, seed
        )

    def baseline(self, train: Dataset, val: Dataset, seed: int) -> Score:
        return base_score(self.model_kind, train, val, self.metric, seed)
