"""Synthetic dataset generators for demos and tests."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .dataset import CLASSIFICATION, REGRESSION, Dataset, DatasetMetadata, TaskKind


def balance_scale() -> Dataset:
    """Full 5^4 factorial balance-scale task: 625 rows, three classes.

    Each side of a scale has a weight and a distance in 1..5. The class is
    the sign of the torque difference left_weight*left_distance -
    right_weight*right_distance, mapped to {0: tips right, 1: balanced,
    2: tips left}.
    """
    vals = np.arange(1, 6)
    grid = np.array(np.meshgrid(vals, vals, vals, vals, indexing="ij")).reshape(4, -1).T
    names = ["left_weight", "left_distance", "right_weight", "right_distance"]
    features = pd.DataFrame(grid, columns=names).astype(np.int64)
    torque = grid[:, 0] * grid[:, 1] - grid[:, 2] * grid[:, 3]
    labels = pd.Series(np.sign(torque).astype(np.int64) + 1, name="tilt")
    descriptions = {
        "left_weight": "Weight placed on the left side (1-5).",
        "left_distance": "Distance of the left weight from the pivot (1-5).",
        "right_weight": "Weight placed on the right side (1-5).",
        "right_distance": "Distance of the right weight from the pivot (1-5).",
    }
    return Dataset(
        name="balance-scale",
        features=features,
        labels=labels,
        task=TaskKind(CLASSIFICATION, n_classes=3),
        metadata=DatasetMetadata(
            task_description=(
                "Predict which way a balance scale tips given the weight and "
                "distance on each arm, or whether it stays balanced."
            ),
            feature_descriptions=descriptions,
        ),
    )


def separable_pair(n: int = 400, seed: int = 0) -> Dataset:
    """Two-class task separable by the sign of x1 + x2; all features numeric."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    features = pd.DataFrame(x, columns=["x1", "x2", "x3"])
    labels = pd.Series((x[:, 0] + x[:, 1] > 0).astype(np.int64), name="side")
    return Dataset(
        name="separable-pair",
        features=features,
        labels=labels,
        task=TaskKind(CLASSIFICATION, n_classes=2),
        metadata=DatasetMetadata(
            task_description="Decide which side of the plane x1 + x2 = 0 a point lies on.",
            feature_descriptions={
                "x1": "First coordinate.",
                "x2": "Second coordinate.",
                "x3": "Distractor coordinate, unrelated to the outcome.",
            },
        ),
    )


def product_surface(n: int = 300, seed: int = 0) -> Dataset:
    """Regression task y = x1 * x2 + 0.5 * x3 with mild observation noise."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    y = x[:, 0] * x[:, 1] + 0.5 * x[:, 2] + 0.05 * rng.standard_normal(n)
    features = pd.DataFrame(x, columns=["x1", "x2", "x3"])
    labels = pd.Series(y, name="response")
    return Dataset(
        name="product-surface",
        features=features,
        labels=labels,
        task=TaskKind(REGRESSION),
        metadata=DatasetMetadata(
            task_description="Estimate a response driven by the product of the first two inputs.",
            feature_descriptions={
                "x1": "First input.",
                "x2": "Second input.",
                "x3": "Additive input with a smaller effect.",
            },
        ),
    )


def mixed_types(n: int = 240, seed: int = 0) -> Dataset:
    """Classification task mixing numeric and categorical columns."""
    rng = np.random.default_rng(seed)
    hue = rng.choice(["red", "green", "blue"], n)
    size = rng.standard_normal(n)
    count = rng.integers(0, 10, n)
    score = size + (hue == "red") * 1.5 + 0.1 * count
    features = pd.DataFrame({"hue": hue, "size": size, "count": count.astype(np.int64)})
    labels = pd.Series((score > 0.8).astype(np.int64), name="flagged")
    return Dataset(
        name="mixed-types",
        features=features,
        labels=labels,
        task=TaskKind(CLASSIFICATION, n_classes=2),
        metadata=DatasetMetadata(
            task_description="Flag items whose combined hue bonus and size pass a threshold.",
            feature_descriptions={
                "hue": "Item color, one of red/green/blue.",
                "size": "Standardized size measurement.",
                "count": "How many units were observed.",
            },
        ),
    )
