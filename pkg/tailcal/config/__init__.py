from .loader import (
    ConfigLoader,
    TailCalSettings,
    initialize_config,
    get_config,
    get_settings
)
from .schema import (
    STRATEGIES,
    TRAINING_MODES,
    PRESETS,
    WorldConfig,
    TrainSchedule,
    BalancedSamplerConfig,
    CalibrationConfig,
    DecodeConfig,
    EvalConfig,
    ExperimentConfig,
)

__all__ = [
    "ConfigLoader",
    "TailCalSettings",
    "initialize_config",
    "get_config",
    "get_settings",
    "STRATEGIES",
    "TRAINING_MODES",
    "PRESETS",
    "WorldConfig",
    "TrainSchedule",
    "BalancedSamplerConfig",
    "CalibrationConfig",
    "DecodeConfig",
    "EvalConfig",
    "ExperimentConfig",
]
