"""Tabular dataset handling.

Loading from CSV plus a JSON descriptor, deterministic train/val/test
splitting, natural-language row serialization, schema anonymization, and
Gaussian noise injection for robustness studies.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

logger = logging.getLogger(__name__)

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASK_KINDS = (CLASSIFICATION, REGRESSION)


class DatasetError(ValueError):
    """Malformed dataset or descriptor."""


class MissingLabelColumn(DatasetError):
    pass


class HeaderMetadataMismatch(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class ClassTooSmall(DatasetError):
    pass


@dataclass(frozen=True)
class TaskKind:
    kind: str
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}")
        if self.kind == CLASSIFICATION and (self.n_classes is None or self.n_classes < 2):
            raise DatasetError("classification needs at least 2 classes")

    @property
    def is_classification(self) -> bool:
        return self.kind == CLASSIFICATION


@dataclass(frozen=True)
class DatasetMetadata:
    task_description: str = ""
    feature_descriptions: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Dataset:
    """A feature table with aligned labels.

    Treated as immutable after construction; operations that change
    anything return a new Dataset. Classification labels are integer
    class indices 0..K-1, regression labels finite floats.
    """

    name: str
    features: pd.DataFrame
    labels: pd.Series
    task: TaskKind
    metadata: DatasetMetadata = field(default_factory=DatasetMetadata)

    def __post_init__(self):
        n, d = self.features.shape
        if n < 1:
            raise EmptyDataset(f"{self.name}: no rows")
        if d < 1:
            raise DatasetError(f"{self.name}: no feature columns")
        if len(self.labels) != n:
            raise DatasetError(f"{self.name}: {len(self.labels)} labels for {n} rows")
        if self.features.columns.duplicated().any():
            raise DatasetError(f"{self.name}: duplicated feature names")
        if self.labels.name in self.features.columns:
            raise DatasetError(f"{self.name}: label column among features")
        for key in self.metadata.feature_descriptions:
            if key not in self.features.columns:
                raise DatasetError(f"{self.name}: description for unknown feature {key!r}")
        if self.task.is_classification:
            vals = np.asarray(self.labels)
            k = self.task.n_classes
            if not np.issubdtype(vals.dtype, np.integer):
                raise DatasetError(f"{self.name}: classification labels must be integers")
            if vals.min() < 0 or vals.max() >= k:
                raise DatasetError(f"{self.name}: labels outside 0..{k - 1}")
        else:
            vals = np.asarray(self.labels, dtype=float)
            if not np.isfinite(vals).all():
                raise DatasetError(f"{self.name}: regression labels must be finite")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(self.features.columns)

    @property
    def n_rows(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction"):
            frac = getattr(self, name)
            if not 0.0 < frac < 1.0:
                raise DatasetError(f"{name} must be in (0, 1), got {frac}")


_DESCRIPTOR_KEYS = {"name", "task_description", "label", "task_kind", "features"}


def load_dataset(data_path: str | Path, metadata_path: str | Path) -> Dataset:
    """Load a CSV data file and its JSON descriptor into a Dataset.

    The descriptor carries name, task_description, label, task_kind and a
    features map (column name -> free-text description). Feature columns in
    the CSV and in the descriptor must match exactly. An optional
    "categorical" list forces listed columns to string dtype, which every
    later stage treats as categorical regardless of how the values parse.
    """
    metadata_path = Path(metadata_path)
    data_path = Path(data_path)
    try:
        meta = json.loads(metadata_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{metadata_path}: invalid descriptor: {exc}") from exc
    missing = _DESCRIPTOR_KEYS - meta.keys()
    if missing:
        raise DatasetError(f"{metadata_path}: descriptor missing keys {sorted(missing)}")

    df = pd.read_csv(data_path, float_precision="round_trip")
    if len(df) == 0:
        raise EmptyDataset(f"{data_path}: zero data rows")

    label = meta["label"]
    if label not in df.columns:
        raise MissingLabelColumn(f"label column {label!r} not in {list(df.columns)}")

    declared = set(meta["features"])
    present = set(df.columns) - {label}
    if declared != present:
        extra_meta = sorted(declared - present)
        extra_file = sorted(present - declared)
        raise HeaderMetadataMismatch(
            f"feature mismatch: only in descriptor {extra_meta}, only in data file {extra_file}"
        )

    feature_cols = [c for c in df.columns if c != label]
    features = df[feature_cols].copy()
    for col in meta.get("categorical", []):
        if col in features.columns:
            features[col] = _as_string_column(features[col])

    task_kind = meta["task_kind"]
    if task_kind not in TASK_KINDS:
        raise DatasetError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
    labels, task = _coerce_labels(df[label], task_kind, label)

    descriptions = {k: str(v) for k, v in meta["features"].items()}
    return Dataset(
        name=str(meta["name"]),
        features=features,
        labels=labels,
        task=task,
        metadata=DatasetMetadata(
            task_description=str(meta["task_description"]),
            feature_descriptions=descriptions,
        ),
    )


def save_dataset(ds: Dataset, data_path: str | Path, metadata_path: str | Path) -> None:
    """Inverse of load_dataset: write the CSV and descriptor for a Dataset."""
    label = ds.labels.name or "target"
    table = ds.features.copy()
    table[label] = np.asarray(ds.labels)
    table.to_csv(data_path, index=False)
    meta = {
        "name": ds.name,
        "task_description": ds.metadata.task_description,
        "label": label,
        "task_kind": ds.task.kind,
        "features": {c: ds.metadata.feature_descriptions.get(c, "") for c in ds.feature_names},
    }
    Path(metadata_path).write_text(json.dumps(meta, indent=2) + "\n")


def _as_string_column(col: pd.Series) -> pd.Series:
    out = col.astype(object)
    mask = out.notna()
    out[mask] = col[mask].astype(str)
    return out


def _coerce_labels(raw: pd.Series, task_kind: str, label_name: str) -> tuple[pd.Series, TaskKind]:
    if raw.isna().any():
        raise DatasetError(f"label column {label_name!r} has missing values")
    if task_kind == REGRESSION:
        try:
            vals = pd.to_numeric(raw)
        except (ValueError, TypeError) as exc:
            raise DatasetError(f"regression labels must be numeric: {exc}") from exc
        labels = pd.Series(np.asarray(vals, dtype=float), name=label_name)
        return labels, TaskKind(REGRESSION)
    uniques = pd.unique(raw)
    as_ints = None
    if pd.api.types.is_integer_dtype(raw):
        as_ints = np.asarray(raw, dtype=np.int64)
    if as_ints is not None and as_ints.min() == 0 and set(np.unique(as_ints)) == set(range(len(uniques))):
        labels = pd.Series(as_ints, name=label_name)
        return labels, TaskKind(CLASSIFICATION, n_classes=len(uniques))
    # map arbitrary label values onto 0..K-1 in sorted string order
    cats = sorted(str(u) for u in uniques)
    lookup = {c: i for i, c in enumerate(cats)}
    encoded = np.array([lookup[str(v)] for v in raw], dtype=np.int64)
    logger.info("encoded %d label values of %r onto 0..%d", len(cats), label_name, len(cats) - 1)
    labels = pd.Series(encoded, name=label_name)
    return labels, TaskKind(CLASSIFICATION, n_classes=len(cats))


def split_indices(ds: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positional (train, val, test) index arrays for a split.

    Test rows are drawn first, then validation rows from the remaining
    train pool. Classification splits are stratified on the labels and
    require at least 3 instances of every class.
    """
    n = ds.n_rows
    idx = np.arange(n)
    y = np.asarray(ds.labels)
    strat = None
    if ds.task.is_classification:
        counts = np.bincount(y, minlength=ds.task.n_classes)
        small = np.nonzero((counts > 0) & (counts < 3))[0]
        if small.size:
            raise ClassTooSmall(f"classes {small.tolist()} have fewer than 3 instances")
        strat = y
    rest, test = train_test_split(
        idx, test_size=spec.test_fraction, random_state=spec.seed,
        stratify=strat if strat is not None else None,
    )
    train, val = train_test_split(
        rest, test_size=spec.val_fraction, random_state=spec.seed,
        stratify=y[rest] if strat is not None else None,
    )
    return np.sort(train), np.sort(val), np.sort(test)


def _take(ds: Dataset, idx: np.ndarray) -> Dataset:
    return replace(
        ds,
        features=ds.features.iloc[idx].reset_index(drop=True),
        labels=ds.labels.iloc[idx].reset_index(drop=True),
    )


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Split a dataset into (train, val, test) Datasets."""
    train_idx, val_idx, test_idx = split_indices(ds, spec)
    return _take(ds, train_idx), _take(ds, val_idx), _take(ds, test_idx)


def serialize_row(x, y, feature_names) -> str:
    """Render one row as an English sentence.

    Format: ``If c1 is v1, c2 is v2. Then Result is y`` with cell values
    written verbatim.
    """
    x = list(x)
    feature_names = list(feature_names)
    if len(x) != len(feature_names):
        raise ValueError(f"{len(x)} values for {len(feature_names)} feature names")
    clauses = ", ".join(f"{c} is {v}" for c, v in zip(feature_names, x))
    return f"If {clauses}. Then Result is {y}"


def anonymize(ds: Dataset) -> Dataset:
    """Strip domain knowledge: feature names become C1..Cd, all prose is dropped.

    Data values are unchanged. Idempotent.
    """
    names = [f"C{i + 1}" for i in range(len(ds.feature_names))]
    features = ds.features.set_axis(names, axis=1)
    return replace(
        ds,
        features=features,
        metadata=DatasetMetadata(task_description="", feature_descriptions={}),
    )


def numeric_feature_columns(ds: Dataset) -> list[str]:
    """Feature columns treated as numeric (bool counts as categorical)."""
    return [
        c for c in ds.features.columns
        if pd.api.types.is_numeric_dtype(ds.features[c])
        and not pd.api.types.is_bool_dtype(ds.features[c])
    ]


def inject_noise(ds: Dataset, sigma: float, seed: int) -> Dataset:
    """Add N(0, (sigma * column std)^2) noise to every numeric feature column.

    Labels and categorical columns are untouched. sigma=0 returns the
    dataset unchanged (integer columns keep their dtype in that case).
    Column scale uses the sample std (ddof=1).
    """
    if sigma < 0:
        raise DatasetError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(ds, features=ds.features.copy())
    rng = np.random.default_rng(seed)
    features = ds.features.copy()
    for col in numeric_feature_columns(ds):
        scale = features[col].std()
        draws = rng.standard_normal(len(features))
        if not np.isfinite(scale):
            scale = 0.0
        features[col] = features[col].astype(float) + sigma * float(scale) * draws
    return replace(ds, features=features)
