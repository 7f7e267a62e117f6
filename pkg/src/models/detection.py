"""
Result containers passed between the model components.

Unlike the pydantic boundary types these hold tensors, so they are plain
dataclasses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.models.annotations import GroundTruth
from src.models.errors import ShapeError
from src.services.tensor import Tensor, sigmoid


@dataclass
class ImageSample:
    """
    One training or evaluation image.

    Attributes:
        pixels: Tensor[3, H, W] with values in [0, 1].
        truth: Boxes and labels of the image.
        id: Stable identifier.
    """

    pixels: Tensor
    truth: GroundTruth
    id: str

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"pixels must be [3,H,W], got {self.pixels.shape}")
        if min(self.pixels.shape[1:]) < 32:
            raise ShapeError(
                f"images must be at least 32x32, got {self.pixels.shape[1:]}"
            )
        data = self.pixels.data
        if data.min() < 0.0 or data.max() > 1.0:
            raise ShapeError("pixel values must lie in [0, 1]")


@dataclass
class FeaturePyramid:
    """
    Four feature maps ``[D, H_l, W_l]`` at strides 8/16/32/64.
    """

    levels: List[Tensor]
    strides: Tuple[int, ...] = (8, 16, 32, 64)

    def __post_init__(self) -> None:
        if len(self.levels) != 4:
            raise ShapeError(f"expected 4 levels, got {len(self.levels)}")
        channels = {level.shape[0] for level in self.levels}
        if len(channels) != 1:
            raise ShapeError(f"levels disagree on channel count: {channels}")

    @property
    def d_model(self) -> int:
        return self.levels[0].shape[0]

    @property
    def spatial_shapes(self) -> List[Tuple[int, int]]:
        return [(level.shape[1], level.shape[2]) for level in self.levels]


@dataclass
class EncoderMemory:
    """
    Flattened multi-scale tokens after the encoder.

    Attributes:
        features: Tensor[S, D].
        level_index: int array [S], pyramid level of every token.
        positions: float array [S, 2], normalized cell centers (cx, cy).
        spatial_shapes: (H_l, W_l) per level, in flattening order.
    """

    features: Tensor
    level_index: np.ndarray
    positions: np.ndarray
    spatial_shapes: List[Tuple[int, int]]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class AnchorSet:
    """
    One square anchor per encoder token, boxes [S, 4] in cxcywh.
    """

    boxes: np.ndarray
    base_scale: float = 0.05

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class DetectionSet:
    """
    Predictions of one head application.

    Attributes:
        logits: Tensor[N, C] class logits.
        boxes: Tensor[N, 4] predicted cxcywh boxes.
        references: References the predictions were refined from ([N, 4] or
            [N, 2]); anchors for the dense part.
        objectness_logits: Tensor[N, 1] from the class-agnostic head, if any.
    """

    logits: Tensor
    boxes: Tensor
    references: Optional[np.ndarray] = None
    objectness_logits: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass
class ContainerSet:
    """
    Object containers kept as stacked tensors: row ``i`` of ``queries`` and
    ``references`` is one detection hypothesis.

    Attributes:
        queries: Tensor[k, D]; differentiable back to its source.
        references: Tensor[k, 4] boxes or [k, 2] centers.
        source_index: Encoder-token index per container (dense strategy).
        strategy: Initialization strategy that produced the batch.
    """

    queries: Tensor
    references: Tensor
    source_index: Optional[np.ndarray] = None
    strategy: str = "dense"

    def __len__(self) -> int:
        return self.queries.shape[0]

    @property
    def ref_dim(self) -> int:
        return self.references.shape[1]


@dataclass
class MatchResult:
    """
    Injective prediction -> truth assignment, pairs sorted by prediction.
    """

    pairs: List[Tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def prediction_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    def truth_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


@dataclass
class Prediction:
    """
    Scored detections of one image, used for evaluation.
    """

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_detection_set(cls, detections: DetectionSet) -> "Prediction":
        probs = sigmoid(detections.logits).data
        return cls(
            boxes=detections.boxes.data.copy(),
            scores=probs.max(axis=1),
            labels=probs.argmax(axis=1),
        )

    @classmethod
    def from_truth(
        cls, truth: GroundTruth, scores: Optional[Sequence[float]] = None
    ) -> "Prediction":
        count = len(truth)
        return cls(
            boxes=truth.boxes_array(),
            scores=np.ones(count) if scores is None else np.asarray(scores),
            labels=truth.labels_array(),
        )

    def __len__(self) -> int:
        return len(self.scores)


__all__ = [
    "AnchorSet",
    "ContainerSet",
    "DetectionSet",
    "EncoderMemory",
    "FeaturePyramid",
    "ImageSample",
    "MatchResult",
    "Prediction",
]
