"""
Typed, validated settings for models, training runs and evaluation.

Configuration is split into sections (model, train, evaluation, logging) that are combined
in one `Settings` object. Files can be sectioned YAML or flat `key = value` text whose keys
are the ModelConfig / TrainConfig field names.
"""
import logging
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

ProjectRootPath = Path(__file__).parents[1]
ConfigsPath = ProjectRootPath / "configs"

DEFAULT_TAUS: tuple[float, ...] = (0.05, 0.10, 0.15, 0.20, 0.25)


class ConfigError(ValueError):
    """ Raised on unreadable or invalid configuration input """


class Objective(StrEnum):
    MLM = "mlm"
    ROLLOUT = "rollout"
    RELAY_SG = "relay_sg"
    RELAY = "relay"

    @property
    def uses_relay(self) -> bool:
        return self in (Objective.RELAY, Objective.RELAY_SG)


class Slice(StrEnum):
    UNFILTERED = "unfiltered"
    DEDUCTION_ONLY = "deduction_only"


class ModelConfig(BaseModel):
    """Backbone architecture hyperparameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(default=4, description="Number of transformer blocks")
    d_model: int = Field(default=384, description="Residual stream width")
    d_ff: int = Field(default=1536, description="MLP hidden width")
    n_heads: int = Field(default=6, description="Attention heads")
    head_dim: int = Field(default=64, description="Per-head width")
    rotary_width: int = Field(default=64, description="Leading head dims rotated by RoPE")
    dropout: float = Field(default=0.1, description="Dropout probability")
    vocab_size: int = Field(default=17, description="Token vocabulary size")
    tie_embeddings: bool = Field(default=False, description="Share embedding and unembedding")
    relay_enabled: bool = Field(default=True, description="Allocate the relay normalization")
    relay_gamma_init: Literal["ones", "zeros"] = Field(default="ones", description="Relay norm scale init")
    seq_len: int = Field(default=81, description="Sequence length")

    @field_validator("n_layers", "d_model", "d_ff", "n_heads", "head_dim", "seq_len")
    @classmethod
    def validate_positive_int(cls, v):
        if v <= 0:
            raise ValueError("Value must be positive")
        return v

    @field_validator("dropout")
    @classmethod
    def validate_dropout(cls, v):
        if not (0.0 <= v < 1.0):
            raise ValueError("Dropout must be in [0, 1)")
        return v

    @field_validator("vocab_size")
    @classmethod
    def validate_vocab(cls, v):
        # digits 1-9, blank and mask are the task tokens
        if v < 11:
            raise ValueError("vocab_size must be at least 11")
        return v

    @model_validator(mode="after")
    def validate_dims(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(f"d_model ({self.d_model}) must equal n_heads * head_dim "
                             f"({self.n_heads} * {self.head_dim})")
        if not (0 <= self.rotary_width <= self.head_dim):
            raise ValueError("rotary_width must be within [0, head_dim]")
        if self.rotary_width % 2:
            raise ValueError("rotary_width must be even")
        return self


class TrainConfig(BaseModel):
    """Optimization and rollout settings for one training run."""

    model_config = ConfigDict(extra="forbid")

    objective: Objective = Field(default=Objective.RELAY, description="Training objective")
    K: int = Field(default=2, description="Unroll horizon of one rollout window")
    batch_size: int = Field(default=512, description="Episodes per optimizer step")
    lr: float = Field(default=5e-4, description="Peak learning rate")
    weight_decay: float = Field(default=1e-2, description="AdamW weight decay")
    warmup_steps: int = Field(default=2000, description="Linear warmup length")
    grad_clip: float = Field(default=0.5, description="Global gradient norm bound")
    threshold_mean: float = Field(default=0.15, description="Mean of the rollout threshold")
    threshold_std: float = Field(default=0.1, description="Std of the rollout threshold")
    threshold_per_window: bool = Field(default=False, description="Draw tau once per window")
    mlm_time_floor: float = Field(default=1e-3, description="Lower bound of the MLM time draw")
    total_steps: int = Field(default=300_000, description="Optimizer steps")
    log_every: int = Field(default=100, description="Metrics log interval")
    val_every: int = Field(default=5000, description="Validation and checkpoint interval")
    val_size: int = Field(default=2000, description="Held-out records used for validation")
    val_taus: list[float] = Field(default_factory=lambda: list(DEFAULT_TAUS))
    val_data: Path | None = Field(default=None, description="Optional separate validation file")
    seed: int = Field(default=0, description="Seed of every random stream")
    device: str = Field(default="cpu", description="Torch device")

    @field_validator("K")
    @classmethod
    def validate_k(cls, v):
        if not (1 <= v <= 4):
            raise ValueError("K must be between 1 and 4")
        return v

    @field_validator("batch_size", "log_every", "val_every", "val_size")
    @classmethod
    def validate_positive_int(cls, v):
        if v <= 0:
            raise ValueError("Value must be positive")
        return v

    @field_validator("total_steps", "warmup_steps")
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("Value must not be negative")
        return v

    @field_validator("lr", "weight_decay", "threshold_std")
    @classmethod
    def validate_non_negative_float(cls, v):
        if v < 0:
            raise ValueError("Value must not be negative")
        return v

    @field_validator("grad_clip", "threshold_mean", "mlm_time_floor")
    @classmethod
    def validate_positive_float(cls, v):
        if v <= 0:
            raise ValueError("Value must be positive")
        return v

    @field_validator("val_taus")
    @classmethod
    def validate_taus(cls, v):
        if not v or any(t <= 0 for t in v):
            raise ValueError("val_taus must be a nonempty list of positive thresholds")
        return sorted(v)

    @model_validator(mode="after")
    def validate_objective(self):
        # single forward per step, there is nothing to unroll
        if self.objective is Objective.MLM and self.K != 1:
            logging.info(f"Objective mlm runs with K = 1 (configured K = {self.K})")
            self.K = 1
        return self


class EvalConfig(BaseModel):
    """Evaluation protocol settings."""

    model_config = ConfigDict(extra="forbid")

    taus: list[float] = Field(default_factory=lambda: list(DEFAULT_TAUS))
    batch_size: int = Field(default=256, description="Puzzles decoded per batch")
    n: int = Field(default=2000, description="Records taken in dataset order")
    slice: Slice = Field(default=Slice.UNFILTERED)

    @field_validator("taus")
    @classmethod
    def validate_taus(cls, v):
        if not v or any(t <= 0 for t in v):
            raise ValueError("taus must be a nonempty list of positive thresholds")
        return sorted(v)

    @field_validator("batch_size", "n")
    @classmethod
    def validate_positive_int(cls, v):
        if v <= 0:
            raise ValueError("Value must be positive")
        return v


class LoggingConfig(BaseModel):
    """Logging configuration settings."""

    model_config = ConfigDict(extra="forbid")

    level: str = Field(default="INFO", description="Logging level")
    format: str = Field(
        default="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        description="Log message format"
    )
    datefmt: str = Field(default="%Y-%m-%d %H:%M:%S", description="Date format for logs")

    @field_validator("level")
    @classmethod
    def validate_log_level(cls, v):
        valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        if v.upper() not in valid_levels:
            raise ValueError(f"Invalid log level. Must be one of: {valid_levels}")
        return v.upper()


class Settings(BaseModel):
    """Main settings class that combines all configuration sections."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def validate_baseline_model(self):
        # mlm and rollout never feed the relay, so they train the model without the relay norm
        if not self.train.objective.uses_relay and self.model.relay_enabled:
            self.model = self.model.model_copy(update={"relay_enabled": False})
        return self

    def get_config_summary(self) -> dict[str, dict[str, Any]]:
        return self.model_dump(mode="json")

    def with_overrides(self, model: dict[str, Any] | None = None, train: dict[str, Any] | None = None,
                       evaluation: dict[str, Any] | None = None) -> "Settings":
        """ Returns a re-validated copy, flag values win over file values """
        data = self.model_dump()
        for section, values in (("model", model), ("train", train), ("evaluation", evaluation)):
            data[section].update({k: v for k, v in (values or {}).items() if v is not None})
        try:
            return Settings.model_validate(data)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_yaml(cls, yaml_file: Path, yaml_file_encoding: str = "utf-8") -> "Settings":
        with yaml_file.open("r", encoding=yaml_file_encoding) as f:
            config_file = yaml.load(f, yaml.SafeLoader) or {}

        try:
            return cls.model_validate(config_file)
        except ValidationError as e:
            raise ConfigError(f"{yaml_file}: {e}") from e

    @classmethod
    def from_flat_file(cls, path: Path, encoding: str = "utf-8") -> "Settings":
        """ Parses `key = value` lines, keys are ModelConfig or TrainConfig field names """
        sections: dict[str, dict[str, Any]] = {"model": {}, "train": {}}
        for line_no, raw in enumerate(path.read_text(encoding=encoding).splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in ModelConfig.model_fields:
                section = "model"
            elif key in TrainConfig.model_fields:
                section = "train"
            else:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            if key in sections[section]:
                raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
            sections[section][key] = yaml.safe_load(value) if value else None

        try:
            return cls.model_validate(sections)
        except ValidationError as e:
            raise ConfigError(f"{path}: {e}") from e


def load_settings(path: Path | None) -> Settings:
    """ YAML files are sectioned, anything else is read as flat key-value text """
    if path is None:
        return Settings()
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    if path.suffix in (".yaml", ".yml"):
        return Settings.from_yaml(path)
    return Settings.from_flat_file(path)


def configure_logging(config: LoggingConfig) -> None:
    logging.basicConfig(
        level=config.level,
        format=config.format,
        datefmt=config.datefmt,
        force=True,  # overrides existing logging configuration (useful for repeated runs)
    )


if __name__ == "__main__":
    print("=== Settings Configuration Summary ===")
    import json

    print(json.dumps(Settings().get_config_summary(), indent=2, default=str))
