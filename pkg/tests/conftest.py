"""Shared fixtures for magnetrec tests."""

from __future__ import annotations

from typing import Any

import numpy as np
import pytest

from magnetrec.data import (
    FeatureMatrix,
    InteractionSet,
    SplitBundle,
    SyntheticSpec,
    generate_synthetic,
    split_interactions,
)
from magnetrec.models import RunConfig
from magnetrec.train import Trainer, TrainingData

SMALL_SPEC = SyntheticSpec(
    num_users=40,
    num_items=24,
    num_blocks=4,
    feature_dim_a=6,
    feature_dim_s=4,
    density=0.2,
    noise=0.1,
    seed=7,
)


@pytest.fixture
def small_dataset() -> tuple[InteractionSet, FeatureMatrix, FeatureMatrix]:
    """A 40-user, 24-item planted dataset."""
    return generate_synthetic(SMALL_SPEC)


@pytest.fixture
def small_split(
    small_dataset: tuple[InteractionSet, FeatureMatrix, FeatureMatrix],
) -> SplitBundle:
    return split_interactions(small_dataset[0], (0.8, 0.1, 0.1), seed=3)


def small_config(**overrides: Any) -> RunConfig:
    """Fast settings for the 40-user dataset."""
    settings: dict[str, Any] = {
        "seed": 11,
        "embed_dim": 8,
        "gnn_layers": 2,
        "knn_k": 3,
        "expand_r": 4,
        "top_k": 2,
        "batch_size": 64,
        "max_epochs": 2,
        "patience": 5,
        "lr": 0.01,
        "log_wallclock": False,
    }
    settings.update(overrides)
    return RunConfig.model_validate(settings)


def build_trainer(
    dataset: tuple[InteractionSet, FeatureMatrix, FeatureMatrix],
    split: SplitBundle,
    **overrides: Any,
) -> Trainer:
    config = small_config(**overrides)
    data = TrainingData.build(config, split, dataset[1], dataset[2])
    return Trainer.create(config, data)


def random_distribution(rng: np.random.Generator, size: int) -> np.ndarray:
    values = rng.random(size)
    return values / values.sum()
