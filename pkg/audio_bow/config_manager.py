"""Configuration management for the audio bag-of-codewords pipeline."""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ValidationFailure


logger = logging.getLogger(__name__)

COMPRESSION_GRID = (10, 20)
CODEBOOK_GRID = (16, 64, 256, 1024)
HEAD_WIDTH_GRID = (256, 512, 2048, 4096)
HEAD_DROPOUT_GRID = (0.1, 0.4)
MASK_GRID = (0.0, 0.10, 0.20, 0.25, 0.30, 0.35, 0.40, 0.50)


class ConfigError(ValidationFailure):
    """Exception raised when a configuration cannot be loaded or validated."""

    pass


class ConfigManager(BaseSettings):
    """
    Process-wide settings for the pipeline.

    Handles configuration from environment variables (prefix ``AUDIO_BOW_``)
    and .env files. Per-run hyperparameters live in ``RunConfig``.
    """

    model_config = SettingsConfigDict(
        env_prefix="AUDIO_BOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging
    log_level: str = Field(
        default="INFO",
        description="Logging level",
    )

    # Storage
    store_dir: str = Field(
        default="artifacts",
        description="Root directory of the artifact store",
    )

    # Execution
    workers: int = Field(
        default=4,
        description="Worker threads for file-level parallelism",
    )
    default_seed: int = Field(
        default=0,
        description="Seed used when a run config does not name one",
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level value."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"log_level must be one of {valid_levels}, got {v}")
        return v.upper()

    @field_validator("workers")
    @classmethod
    def validate_workers(cls, v: int) -> int:
        """Validate worker count."""
        if v < 1:
            raise ValueError(f"workers must be at least 1, got {v}")
        return v

    def setup_logging(self, log_level: Optional[str] = None) -> None:
        """
        Set up logging configuration.

        Args:
            log_level: Overrides the configured level when given

        Raises:
            ConfigError: If the level is not a known logging level
        """
        try:
            effective_level = self.validate_log_level(log_level or self.log_level)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        logging.basicConfig(
            level=getattr(logging, effective_level),
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            handlers=[logging.StreamHandler(sys.stderr)],
        )
        logger.debug("Logging configured with level: %s", effective_level)


class AutoencoderTrainConfig(BaseModel):
    """Training budget for each patch-family autoencoder."""

    hidden_width: int = Field(default=2048, gt=0)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, gt=0)
    steps: int = Field(default=2000, gt=0)
    eval_every: int = Field(default=100, gt=0)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    max_patches: int = Field(default=200_000, gt=0)


class KMeansConfig(BaseModel):
    """Lloyd iteration limits and sampling cap for codebook fitting."""

    max_iter: int = Field(default=300, gt=0)
    tol: float = Field(default=1e-4, gt=0.0)
    max_vectors: int = Field(default=100_000, gt=0)


class HeadTrainConfig(BaseModel):
    """Optimizer and stopping settings for the classification head."""

    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=128, gt=0)
    max_epochs: int = Field(default=200, gt=0)
    patience: int = Field(default=10, gt=0)
    huber_delta: float = Field(default=1.0, gt=0.0)


class SweepGrid(BaseModel):
    """Cartesian grid swept by the ``sweep`` command."""

    compression_factors: list[int] = Field(default_factory=lambda: [10])
    codebook_sizes: list[int] = Field(default_factory=lambda: list(CODEBOOK_GRID))
    head_widths: list[int] = Field(default_factory=lambda: [256, 512, 2048, 4096])
    head_dropouts: list[float] = Field(default_factory=lambda: list(HEAD_DROPOUT_GRID))
    mask_ps: list[float] = Field(default_factory=lambda: [0.0])

    @field_validator(
        "compression_factors", "codebook_sizes", "head_widths", "head_dropouts", "mask_ps"
    )
    @classmethod
    def validate_non_empty(cls, v: list[Any]) -> list[Any]:
        """Every axis needs at least one value."""
        if not v:
            raise ValueError("sweep axes must not be empty")
        return v

    def cell_count(self) -> int:
        """Number of cells in the grid."""
        return (
            len(self.compression_factors)
            * len(self.codebook_sizes)
            * len(self.head_widths)
            * len(self.head_dropouts)
            * len(self.mask_ps)
        )


class RunConfig(BaseModel):
    """
    Hyperparameters and inputs of one pipeline run.

    Grid-valued fields are checked against the declared grids unless
    ``allow_overrides`` marks the run as an explicit override.
    """

    manifest_path: Optional[str] = None
    vocabulary_path: Optional[str] = None

    compression_factor: int = 10
    codebook_size: int = 256
    head_width: int = 512
    head_dropout: float = 0.4
    mask_p: float = 0.35
    allow_overrides: bool = False

    seed: int = 0
    workers: int = Field(default=4, gt=0)
    head_artifact: Optional[str] = None

    autoencoder: AutoencoderTrainConfig = Field(default_factory=AutoencoderTrainConfig)
    kmeans: KMeansConfig = Field(default_factory=KMeansConfig)
    head: HeadTrainConfig = Field(default_factory=HeadTrainConfig)
    sweep: SweepGrid = Field(default_factory=SweepGrid)

    @field_validator("mask_p")
    @classmethod
    def validate_mask_range(cls, v: float) -> float:
        """Masking probability is a probability."""
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"mask_p must be between 0.0 and 1.0, got {v}")
        return v

    @field_validator("head_dropout")
    @classmethod
    def validate_dropout_range(cls, v: float) -> float:
        """Dropout must leave some units alive."""
        if not 0.0 <= v < 1.0:
            raise ValueError(f"head_dropout must be in [0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def validate_grids(self) -> "RunConfig":
        """Reject off-grid values unless the run is marked as an override."""
        if self.allow_overrides:
            return self
        checks: list[tuple[str, Any, tuple[Any, ...]]] = [
            ("compression_factor", self.compression_factor, COMPRESSION_GRID),
            ("codebook_size", self.codebook_size, CODEBOOK_GRID),
            ("head_width", self.head_width, HEAD_WIDTH_GRID),
            ("head_dropout", self.head_dropout, HEAD_DROPOUT_GRID),
            ("mask_p", self.mask_p, MASK_GRID),
        ]
        for name, value, grid in checks:
            if not any(abs(float(value) - float(g)) < 1e-12 for g in grid):
                raise ValueError(
                    f"{name}={value} is outside the grid {list(grid)}; "
                    "set allow_overrides to use it"
                )
        sweep_checks: list[tuple[str, list[Any], tuple[Any, ...]]] = [
            ("compression_factors", self.sweep.compression_factors, COMPRESSION_GRID),
            ("codebook_sizes", self.sweep.codebook_sizes, CODEBOOK_GRID),
            ("head_widths", self.sweep.head_widths, HEAD_WIDTH_GRID),
            ("head_dropouts", self.sweep.head_dropouts, HEAD_DROPOUT_GRID),
            ("mask_ps", self.sweep.mask_ps, MASK_GRID),
        ]
        for name, values, grid in sweep_checks:
            for value in values:
                if not any(abs(float(value) - float(g)) < 1e-12 for g in grid):
                    raise ValueError(
                        f"sweep.{name} value {value} is outside the grid {list(grid)}; "
                        "set allow_overrides to use it"
                    )
        return self

    def with_overrides(self, **updates: Any) -> "RunConfig":
        """
        Return a validated copy with the given fields replaced.

        ``None`` values are ignored so CLI flags that were not passed leave
        the file values alone.

        Raises:
            ConfigError: If the updated config fails validation
        """
        data = self.model_dump()
        data.update({k: v for k, v in updates.items() if v is not None})
        return build_run_config(data)


def build_run_config(data: dict[str, Any]) -> RunConfig:
    """
    Validate a raw mapping into a RunConfig.

    Raises:
        ConfigError: If validation fails
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a RunConfig from a JSON file, or the defaults when no file is given.

    Args:
        path: JSON file with RunConfig fields

    Returns:
        RunConfig: Validated run configuration

    Raises:
        ConfigError: If the file is unreadable or invalid
    """
    if path is None:
        return build_run_config({"seed": get_config().default_seed})
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    logger.info("Loaded run configuration from %s", path)
    return build_run_config(data)


# Global configuration instance
_config: Optional[ConfigManager] = None


def get_config() -> ConfigManager:
    """
    Get the global configuration instance.

    Creates a new instance if none exists.

    Returns:
        ConfigManager: Global configuration instance
    """
    global _config
    if _config is None:
        _config = ConfigManager()
    return _config


def set_config(config: ConfigManager) -> None:
    """
    Set the global configuration instance.

    Useful for testing.

    Args:
        config: ConfigManager instance to set as global
    """
    global _config
    _config = config
