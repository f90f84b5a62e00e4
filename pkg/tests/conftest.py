"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from llmfe import synthetic
from llmfe.dataset import Dataset, DatasetMetadata, TaskKind, save_dataset
from llmfe.sandbox import ExecutionLimits, FeatureProgram

# Small limits keep sandbox-heavy tests quick; candidate programs in tests
# finish in well under a second unless they are meant to blow a limit.
FAST_LIMITS = ExecutionLimits(wall_time_s=10.0, memory_bytes=512 * 1024**2)


def fenced(body: str, version: int = 2) -> str:
    """A chat completion containing one fenced feature function."""
    return (
        "Here is an improved version.\n\n"
        f"```python\ndef modify_features_v{version}(df):\n{body}\n```\n"
    )


def program(body: str, version: int = 2) -> FeatureProgram:
    name = f"modify_features_v{version}"
    return FeatureProgram(
        source=f"def {name}(df):\n{body}\n",
        function_name=name,
        version=version,
    )


BODY_COPY = "    return df.copy()"
BODY_TOTAL_WEIGHT = (
    "    df = df.copy()\n"
    '    df["total_weight"] = df["left_weight"] + df["right_weight"]\n'
    "    return df"
)
BODY_WEIGHT_RATIO = (
    "    df = df.copy()\n"
    '    df["weight_ratio"] = df["left_weight"] / df["right_weight"]\n'
    "    return df"
)
BODY_LEFT_TORQUE = (
    "    df = df.copy()\n"
    '    df["lw_ld_product"] = df["left_weight"] * df["left_distance"]\n'
    "    return df"
)
BODY_TORQUE_DIFF = (
    "    df = df.copy()\n"
    '    df["torque_diff"] = df["left_weight"] * df["left_distance"] '
    '- df["right_weight"] * df["right_distance"]\n'
    "    return df"
)
BODY_TORQUE_PLUS = (
    "    df = df.copy()\n"
    '    df["torque_diff"] = df["left_weight"] * df["left_distance"] '
    '- df["right_weight"] * df["right_distance"]\n'
    '    df["balanced_hint"] = (df["torque_diff"] == 0).astype(int)\n'
    "    return df"
)
BODY_TORQUE_BOTH = (
    "    df = df.copy()\n"
    '    df["torque_diff"] = df["left_weight"] * df["left_distance"] '
    '- df["right_weight"] * df["right_distance"]\n'
    '    df["lw_ld_product"] = df["left_weight"] * df["left_distance"]\n'
    "    return df"
)


def balance_search_script() -> list:
    """A plausible proposer transcript: the torque feature lands in batch 3
    and keeps getting refined afterwards."""
    return [
        [fenced(BODY_TOTAL_WEIGHT), fenced(BODY_COPY), fenced(BODY_WEIGHT_RATIO)],
        [fenced(BODY_WEIGHT_RATIO), fenced(BODY_LEFT_TORQUE), fenced(BODY_TOTAL_WEIGHT)],
        [fenced(BODY_TORQUE_DIFF), fenced(BODY_TOTAL_WEIGHT), fenced(BODY_WEIGHT_RATIO)],
        [fenced(BODY_TORQUE_BOTH), fenced(BODY_WEIGHT_RATIO), fenced(BODY_TOTAL_WEIGHT)],
        [fenced(BODY_TORQUE_PLUS), fenced(BODY_COPY), fenced(BODY_TOTAL_WEIGHT)],
        [fenced(BODY_TORQUE_BOTH), fenced(BODY_TORQUE_PLUS), fenced(BODY_COPY)],
        [fenced(BODY_TORQUE_DIFF), fenced(BODY_TORQUE_PLUS)],
    ]


@pytest.fixture(scope="session")
def balance_ds() -> Dataset:
    return synthetic.balance_scale()


@pytest.fixture(scope="session")
def separable_ds() -> Dataset:
    return synthetic.separable_pair(n=120, seed=3)


@pytest.fixture(scope="session")
def regression_ds() -> Dataset:
    return synthetic.product_surface(n=150, seed=5)


@pytest.fixture(scope="session")
def mixed_ds() -> Dataset:
    return synthetic.mixed_types(n=150, seed=7)


def tiny_dataset(n: int = 24) -> Dataset:
    """A small deterministic classification dataset for cheap unit tests."""
    rng = np.random.default_rng(11)
    features = pd.DataFrame(
        {
            "alpha": rng.standard_normal(n),
            "beta": rng.integers(0, 4, n).astype(np.int64),
            "color": rng.choice(["red", "blue"], n),
        }
    )
    labels = pd.Series((features["alpha"] > 0).astype(np.int64).to_numpy(), name="hit")
    return Dataset(
        name="tiny",
        features=features,
        labels=labels,
        task=TaskKind("classification", n_classes=2),
        metadata=DatasetMetadata(
            task_description="Say whether alpha is positive.",
            feature_descriptions={"alpha": "A real number.", "beta": "A small count."},
        ),
    )


def write_dataset_files(ds: Dataset, directory) -> tuple[str, str]:
    data_path = str(directory / f"{ds.name}.csv")
    metadata_path = str(directory / f"{ds.name}.json")
    save_dataset(ds, data_path, metadata_path)
    return data_path, metadata_path
