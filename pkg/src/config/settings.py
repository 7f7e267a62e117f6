"""
Detector configuration.

Model, head, loss, schedule, training and data tunables are typed pydantic
sections loaded from an INI file; every default is the headline setting at
desk dimensions, so an empty file is a valid configuration. Process-level
settings (output directory, log level, worker count) come from environment
variables.
"""

from __future__ import annotations

import configparser
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from pydantic import (
    BaseModel,
    BaseSettings,
    Field,
    ValidationError,
    root_validator,
    validator,
)

from src.models.errors import ConfigError

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("dense", "learnable", "grid", "center", "border")


class _Section(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True


class ModelConfig(_Section):
    d_model: int = Field(32, gt=0)
    encoder_layers: int = Field(3, ge=0)
    decoder_layers: int = Field(1, ge=1, le=6)
    heads: int = Field(8, ge=1)
    points: int = Field(4, ge=1)
    num_classes: int = Field(3, ge=1)
    backbone_channels: Tuple[int, int, int, int] = (8, 16, 32, 32)
    ffn_ratio: int = Field(4, ge=1)

    @validator("backbone_channels", pre=True)
    def parse_channels(cls, value):  # type: ignore[no-untyped-def]
        """
        Allow ``8,16,32,32`` as written in INI files.
        """
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @root_validator(skip_on_failure=True)
    def check_widths(cls, values):  # type: ignore[no-untyped-def]
        d_model, heads = values["d_model"], values["heads"]
        if d_model % heads:
            raise ValueError(
                f"d_model ({d_model}) must be divisible by heads ({heads})."
            )
        if d_model % 8:
            raise ValueError(
                f"d_model ({d_model}) must be a multiple of 8 for the "
                "sinusoidal box encoding."
            )
        return values


class HeadConfig(_Section):
    anchor_scale: float = Field(0.05, gt=0.0, le=1.0)
    hidden_dim: int = Field(256, ge=1)
    init: str = "dense"
    ref: str = "4d"
    objectness: str = "specific"
    share_head: bool = True
    query_init: str = "dense"

    @validator("init")
    def known_init(cls, value: str) -> str:
        if value not in INIT_STRATEGIES:
            raise ValueError(
                f"init must be one of {', '.join(INIT_STRATEGIES)}; "
                f"got '{value}'."
            )
        return value

    @validator("ref")
    def known_ref(cls, value: str) -> str:
        if value not in ("2d", "4d"):
            raise ValueError(f"ref must be 2d or 4d; got '{value}'.")
        return value

    @validator("objectness")
    def known_objectness(cls, value: str) -> str:
        if value not in ("specific", "agnostic"):
            raise ValueError(
                f"objectness must be specific or agnostic; got '{value}'."
            )
        return value

    @validator("query_init")
    def known_query_init(cls, value: str) -> str:
        if value not in ("dense", "learned"):
            raise ValueError(
                f"query_init must be dense or learned; got '{value}'."
            )
        return value

    @property
    def ref_dim(self) -> int:
        return 4 if self.ref == "4d" else 2


class LossConfig(_Section):
    lambda_cls: float = Field(2.0, ge=0.0)
    lambda_l1: float = Field(5.0, ge=0.0)
    lambda_giou: float = Field(2.0, ge=0.0)
    focal_alpha: float = Field(0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(2.0, ge=0.0)
    assign_n: int = Field(1, ge=1)
    aux_loss: bool = True


class ScheduleConfig(_Section):
    proposals_start: int = Field(300, ge=1)
    proposals_end: int = Field(100, ge=1)
    decay_epochs: Optional[int] = Field(None, ge=1)
    mode: str = "linear"

    @validator("decay_epochs", pre=True)
    def empty_means_total(cls, value):  # type: ignore[no-untyped-def]
        if isinstance(value, str) and not value.strip():
            return None
        return value

    @validator("mode")
    def known_mode(cls, value: str) -> str:
        if value not in ("linear", "fixed"):
            raise ValueError(f"mode must be linear or fixed; got '{value}'.")
        return value

    @root_validator(skip_on_failure=True)
    def start_not_below_end(cls, values):  # type: ignore[no-untyped-def]
        if values["proposals_start"] < values["proposals_end"]:
            raise ValueError(
                "proposals_start must be >= proposals_end "
                f"({values['proposals_start']} < {values['proposals_end']})."
            )
        return values


class TrainConfig(_Section):
    epochs: int = Field(36, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    lr_drop_epoch: int = Field(24, ge=0)
    lr_drop_factor: float = Field(0.1, gt=0.0, le=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    seed: int = 0
    batch_size: int = Field(1, ge=1)
    max_grad_norm: float = Field(0.0, ge=0.0)

    @root_validator(skip_on_failure=True)
    def drop_within_run(cls, values):  # type: ignore[no-untyped-def]
        if values["lr_drop_epoch"] > values["epochs"]:
            raise ValueError(
                f"lr_drop_epoch ({values['lr_drop_epoch']}) must not exceed "
                f"epochs ({values['epochs']})."
            )
        return values


class DataConfig(_Section):
    source: str = "synthetic"
    image_size: int = Field(64, ge=32)
    train_count: int = Field(500, ge=1)
    eval_count: int = Field(100, ge=0)
    max_objects: int = Field(3, ge=1)
    seed: int = 0
    coco_train: Optional[str] = None
    coco_eval: Optional[str] = None

    @validator("source")
    def known_source(cls, value: str) -> str:
        if value not in ("synthetic", "coco"):
            raise ValueError(
                f"source must be synthetic or coco; got '{value}'."
            )
        return value

    @root_validator(skip_on_failure=True)
    def coco_needs_paths(cls, values):  # type: ignore[no-untyped-def]
        if values["source"] == "coco" and not values.get("coco_train"):
            raise ValueError("source = coco requires coco_train.")
        return values


class DetectorConfig(_Section):
    """
    Complete configuration of one detector and its training run.
    """

    model: ModelConfig = Field(default_factory=ModelConfig)
    heads: HeadConfig = Field(default_factory=HeadConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        raw = self.dict()
        raw["model"]["backbone_channels"] = list(
            raw["model"]["backbone_channels"]
        )
        return raw


SECTIONS = tuple(DetectorConfig.__fields__)


def _format_errors(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
        for err in exc.errors()
    )


def _build(raw: Mapping[str, Mapping[str, Any]]) -> DetectorConfig:
    unknown = []
    for section, values in raw.items():
        if section not in SECTIONS:
            unknown.append(section)
            continue
        allowed = DetectorConfig.__fields__[section].type_.__fields__
        unknown.extend(
            f"{section}.{key}" for key in values if key not in allowed
        )
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return DetectorConfig.parse_obj(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from exc


def config_from_dict(raw: Mapping[str, Mapping[str, Any]]) -> DetectorConfig:
    """
    Validate a nested ``{section: {key: value}}`` mapping, as stored in
    checkpoints.
    """
    return _build(raw)


def load_config(path: Optional[str | Path]) -> DetectorConfig:
    """
    Read an INI file with one section per config group.

    Raises:
        ConfigError: if the file is missing, malformed, has unknown sections
            or keys, or any value fails validation.
    """
    if path is None:
        return DetectorConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    raw = {section: dict(parser.items(section)) for section in parser.sections()}
    config = _build(raw)
    logger.debug("Loaded config from %s", path)
    return config


def apply_overrides(
    config: DetectorConfig, overrides: Mapping[str, Any]
) -> DetectorConfig:
    """
    Return a revalidated copy with dotted ``section.key`` values replaced.
    """
    raw = config.to_dict()
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override '{dotted}' must be section.key")
        raw.setdefault(section, {})[key] = value
    return _build(raw)


class Settings(BaseSettings):
    """
    Process-level settings loaded from environment variables.

    Optional:
    - EDETR_OUTPUT_DIR
    - EDETR_LOG_LEVEL
    - EDETR_NUM_WORKERS
    """

    output_dir: str = Field(
        "runs",
        env="EDETR_OUTPUT_DIR",
        description="Directory for checkpoints, metric logs and tables.",
    )
    log_level: str = Field(
        "INFO",
        env="EDETR_LOG_LEVEL",
        description="Root logging level for entry points.",
    )
    num_workers: int = Field(
        1,
        env="EDETR_NUM_WORKERS",
        description="Worker processes for ablation matrices.",
    )

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"

    @validator("log_level")
    def validate_log_level(cls, value: str) -> str:
        value = value.upper()
        if value not in logging._nameToLevel:
            raise ValueError(f"EDETR_LOG_LEVEL '{value}' is not a log level.")
        return value

    @validator("num_workers")
    def validate_num_workers(cls, value: int) -> int:
        if value < 1:
            raise ValueError("EDETR_NUM_WORKERS must be a positive integer.")
        return value


@lru_cache()
def get_settings() -> Settings:
    """
    Load and cache process settings.

    Raises:
        ValidationError: if any environment value is invalid.
    """
    try:
        return Settings()  # type: ignore[arg-type]
    except ValidationError as exc:
        logger.error("Settings validation failed: %s", exc)
        raise
