"""
Validated annotation types: normalized boxes, per-image ground truth and the
COCO-style JSON schema accepted by the loader.

These schemas enforce the box invariants at the boundary, before any sample
reaches the model.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator


class BoxCXCYWH(BaseModel):
    """
    Center-format box in fractions of the image width/height.
    """

    cx: float = Field(..., ge=0.0, le=1.0)
    cy: float = Field(..., ge=0.0, le=1.0)
    w: float = Field(..., gt=0.0, le=1.0)
    h: float = Field(..., gt=0.0, le=1.0)

    class Config:
        allow_mutation = False

    @classmethod
    def from_array(cls, values) -> "BoxCXCYWH":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx=cx, cy=cy, w=w, h=h)

    @classmethod
    def from_pixel_xywh(
        cls, x: float, y: float, w: float, h: float, width: int, height: int
    ) -> "BoxCXCYWH":
        return cls(
            cx=(x + w / 2.0) / width,
            cy=(y + h / 2.0) / height,
            w=w / width,
            h=h / height,
        )

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def to_pixel_xywh(
        self, width: int, height: int
    ) -> Tuple[float, float, float, float]:
        w = self.w * width
        h = self.h * height
        return self.cx * width - w / 2.0, self.cy * height - h / 2.0, w, h

    def corners(self) -> Tuple[float, float, float, float]:
        """
        (x0, y0, x1, y1) clamped to the unit square.
        """
        x0 = min(max(self.cx - self.w / 2.0, 0.0), 1.0)
        y0 = min(max(self.cy - self.h / 2.0, 0.0), 1.0)
        x1 = min(max(self.cx + self.w / 2.0, 0.0), 1.0)
        y1 = min(max(self.cy + self.h / 2.0, 0.0), 1.0)
        return x0, y0, x1, y1


class GroundTruth(BaseModel):
    """
    Boxes and class indices of one image. May be empty.
    """

    boxes: List[BoxCXCYWH] = Field(default_factory=list)
    labels: List[int] = Field(default_factory=list)

    class Config:
        allow_mutation = False

    @validator("labels", each_item=True)
    def non_negative_label(cls, value: int) -> int:
        if value < 0:
            raise ValueError("labels must be non-negative class indices.")
        return value

    @root_validator(skip_on_failure=True)
    def boxes_match_labels(cls, values):  # type: ignore[no-untyped-def]
        if len(values["boxes"]) != len(values["labels"]):
            raise ValueError(
                f"{len(values['boxes'])} boxes but "
                f"{len(values['labels'])} labels."
            )
        return values

    def __len__(self) -> int:
        return len(self.labels)

    def boxes_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4))
        return np.stack([box.to_array() for box in self.boxes])

    def labels_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)


class CocoImage(BaseModel):
    id: int
    file_name: str
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)


class CocoAnnotation(BaseModel):
    image_id: int
    bbox: List[float] = Field(..., min_items=4, max_items=4)
    category_id: int
    id: Optional[int] = None


class CocoCategory(BaseModel):
    id: int
    name: str


class CocoFile(BaseModel):
    """
    Top-level COCO detection JSON. Extra keys (info, licenses, ...) are
    tolerated; the three lists below are required.
    """

    images: List[CocoImage]
    annotations: List[CocoAnnotation]
    categories: List[CocoCategory]


__all__ = [
    "BoxCXCYWH",
    "CocoAnnotation",
    "CocoCategory",
    "CocoFile",
    "CocoImage",
    "GroundTruth",
]
