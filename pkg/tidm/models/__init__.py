from .schemas import (
    AnchorMode,
    AppConfig,
    CodecConfig,
    DatasetConfig,
    DenoiserConfig,
    DreamboothConfig,
    EvalConfig,
    EvalReport,
    ProbeConfig,
    SamplerConfig,
    ScheduleConfig,
    SceneSpec,
    TextConfig,
    TrainConfig,
)

__all__ = [
    "AnchorMode",
    "AppConfig",
    "CodecConfig",
    "DatasetConfig",
    "DenoiserConfig",
    "DreamboothConfig",
    "EvalConfig",
    "EvalReport",
    "ProbeConfig",
    "SamplerConfig",
    "ScheduleConfig",
    "SceneSpec",
    "TextConfig",
    "TrainConfig",
]
