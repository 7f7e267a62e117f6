"""
Box format conversions, IoU and generalized IoU.

Tensor versions are differentiable and used by the losses; the ndarray
versions serve matching, assignment and evaluation.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from src.models.annotations import BoxCXCYWH
from src.services.tensor import Tensor, as_tensor, maximum, minimum, stack


def cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    boxes = as_tensor(boxes)
    cx, cy, w, h = (boxes[..., i] for i in range(4))
    return stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1
    )


def cxcywh_to_xyxy_np(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], -1)


def _area_np(xyxy: np.ndarray) -> np.ndarray:
    return np.clip(xyxy[..., 2] - xyxy[..., 0], 0, None) * np.clip(
        xyxy[..., 3] - xyxy[..., 1], 0, None
    )


def _pairwise_parts(
    a: np.ndarray, b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.clip(cxcywh_to_xyxy_np(a), 0.0, 1.0)[:, None, :]
    b = np.clip(cxcywh_to_xyxy_np(b), 0.0, 1.0)[None, :, :]
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    union = _area_np(a) + _area_np(b) - inter
    enclose_lt = np.minimum(a[..., :2], b[..., :2])
    enclose_rb = np.maximum(a[..., 2:], b[..., 2:])
    enclose = np.prod(np.clip(enclose_rb - enclose_lt, 0, None), axis=-1)
    return inter, union, enclose


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    IoU matrix [N, G] between cxcywh boxes, corners clamped to [0, 1].
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    inter, union, _ = _pairwise_parts(a, b)
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    inter, union, enclose = _pairwise_parts(a, b)
    safe_union = np.where(union > 0, union, 1.0)
    safe_enclose = np.where(enclose > 0, enclose, 1.0)
    iou = np.where(union > 0, inter / safe_union, 0.0)
    return iou - np.where(enclose > 0, (enclose - union) / safe_enclose, 0.0)


def giou_xyxy(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """
    Elementwise GIoU of corner boxes ``a[..., 4]`` and ``b[..., 4]``.

    Corners are used as given, so boxes outside the unit square are valid
    input here.
    """
    a, b = as_tensor(a), as_tensor(b)
    ax0, ay0, ax1, ay1 = (a[..., i] for i in range(4))
    bx0, by0, bx1, by1 = (b[..., i] for i in range(4))
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)

    iw = (minimum(ax1, bx1) - maximum(ax0, bx0)).clip(0.0, None)
    ih = (minimum(ay1, by1) - maximum(ay0, by0)).clip(0.0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / (union + eps)

    ew = maximum(ax1, bx1) - minimum(ax0, bx0)
    eh = maximum(ay1, by1) - minimum(ay0, by0)
    enclose = ew * eh
    return iou - (enclose - union) / (enclose + eps)


def giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise GIoU of cxcywh boxes with corners clamped to the image.
    """
    return giou_xyxy(
        cxcywh_to_xyxy(a).clip(0.0, 1.0), cxcywh_to_xyxy(b).clip(0.0, 1.0)
    )


def giou(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    """
    Generalized IoU of two validated boxes, in [-1, 1].
    """
    value = pairwise_giou(a.to_array()[None], b.to_array()[None])
    return float(value[0, 0])


__all__ = [
    "cxcywh_to_xyxy",
    "cxcywh_to_xyxy_np",
    "giou",
    "giou_tensor",
    "giou_xyxy",
    "pairwise_giou",
    "pairwise_iou",
]
