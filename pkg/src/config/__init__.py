# Convenience imports for configuration.
from .settings import (
    DataConfig,
    DetectorConfig,
    HeadConfig,
    LossConfig,
    ModelConfig,
    ScheduleConfig,
    Settings,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    get_settings,
    load_config,
)

__all__ = [
    "DataConfig",
    "DetectorConfig",
    "HeadConfig",
    "LossConfig",
    "ModelConfig",
    "ScheduleConfig",
    "Settings",
    "TrainConfig",
    "apply_overrides",
    "config_from_dict",
    "get_settings",
    "load_config",
]
