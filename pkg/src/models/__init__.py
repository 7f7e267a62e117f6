from .annotations import BoxCXCYWH, CocoFile, GroundTruth
from .detection import (
    AnchorSet,
    ContainerSet,
    DetectionSet,
    EncoderMemory,
    FeaturePyramid,
    ImageSample,
    MatchResult,
    Prediction,
)
from .errors import (
    ConfigError,
    ContractError,
    DetectorError,
    NumericError,
    ParseError,
    ShapeError,
)

__all__ = [
    "AnchorSet",
    "BoxCXCYWH",
    "CocoFile",
    "ConfigError",
    "ContainerSet",
    "ContractError",
    "DetectionSet",
    "DetectorError",
    "EncoderMemory",
    "FeaturePyramid",
    "GroundTruth",
    "ImageSample",
    "MatchResult",
    "NumericError",
    "ParseError",
    "Prediction",
    "ShapeError",
]
