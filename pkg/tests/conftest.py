"""Shared fixtures: a small synthetic dataset and a fast run configuration."""

from pathlib import Path
from typing import Any

import pytest

from audio_bow.config_manager import RunConfig, build_run_config
from audio_bow.fixture import make_synthetic_fixture


SMALL_CLIPS = 40
SMALL_CLASSES = 4


def fast_config(manifest_path: Path, **overrides: Any) -> RunConfig:
    """Run config with training budgets small enough for unit tests."""
    data: dict[str, Any] = {
        "manifest_path": str(manifest_path),
        "vocabulary_path": str(manifest_path.parent / "vocabulary.csv"),
        "allow_overrides": True,
        "compression_factor": 10,
        "codebook_size": 16,
        "head_width": 32,
        "head_dropout": 0.1,
        "mask_p": 0.0,
        "workers": 2,
        "autoencoder": {
            "hidden_width": 16,
            "dropout": 0.1,
            "steps": 20,
            "batch_size": 64,
            "eval_every": 10,
        },
        "kmeans": {"max_iter": 50},
        "head": {"max_epochs": 5, "patience": 3, "batch_size": 32},
    }
    data.update(overrides)
    return build_run_config(data)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Manifest path of a 40-clip, 4-class synthetic dataset."""
    return make_synthetic_fixture(
        tmp_path_factory.mktemp("small_fixture"),
        seed=0,
        n_clips=SMALL_CLIPS,
        n_classes=SMALL_CLASSES,
    )
