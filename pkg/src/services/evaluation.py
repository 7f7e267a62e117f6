"""
Detection metrics: average precision, recall and the reference-gathering
distance.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.models.annotations import GroundTruth
from src.models.detection import ImageSample, Prediction
from src.services.box_ops import pairwise_iou
from src.services.matching_loss import hungarian
from src.services.tensor import no_grad

logger = logging.getLogger(__name__)

COCO_THRESHOLDS = np.linspace(0.5, 0.95, 10)


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """
    Area under the precision envelope, sampled at every recall change.
    """
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _class_sweep(
    predictions: Sequence[Prediction],
    truths: Sequence[GroundTruth],
    label: int,
    iou_threshold: float,
) -> Tuple[float, int, int]:
    """
    AP, true positives and ground-truth count for one class.
    """
    truth_boxes = []
    for truth in truths:
        labels = truth.labels_array()
        truth_boxes.append(truth.boxes_array()[labels == label])
    num_truth = sum(len(boxes) for boxes in truth_boxes)

    entries = []  # (score, image, box)
    for image, pred in enumerate(predictions):
        for index in np.flatnonzero(pred.labels == label):
            entries.append((float(pred.scores[index]), image, pred.boxes[index]))
    if not entries:
        return 0.0, 0, num_truth

    scores = np.array([score for score, _, _ in entries])
    order = np.argsort(-scores, kind="stable")
    claimed = [np.zeros(len(boxes), dtype=bool) for boxes in truth_boxes]
    hits = np.zeros(len(entries))
    for rank, entry in enumerate(order):
        _, image, box = entries[entry]
        candidates = truth_boxes[image]
        if not len(candidates):
            continue
        ious = pairwise_iou(box[None], candidates)[0]
        ious[claimed[image]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            claimed[image][best] = True
            hits[rank] = 1.0

    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / num_truth
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return _interpolated_ap(recall, precision), int(tp[-1]), num_truth


def average_precision(
    predictions: Sequence[Prediction],
    truths: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> Tuple[float, float]:
    """
    All-points interpolated AP averaged over classes with ground truth, and
    recall over all ground-truth boxes.

    Detections are swept by descending score across all images; each one
    claims the highest-IoU unclaimed truth of its class in its image if that
    IoU reaches ``iou_threshold``.
    """
    if len(predictions) != len(truths):
        raise ValueError(
            f"{len(predictions)} predictions for {len(truths)} images"
        )
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    labels = sorted({int(label) for truth in truths for label in truth.labels})
    if not labels:
        logger.warning("Evaluating against an empty ground-truth set")
        return 0.0, 0.0

    aps: List[float] = []
    matched = total = 0
    for label in labels:
        ap, tp, count = _class_sweep(predictions, truths, label, iou_threshold)
        aps.append(ap)
        matched += tp
        total += count
    return float(np.mean(aps)), matched / total


def evaluate_predictions(
    predictions: Sequence[Prediction], truths: Sequence[GroundTruth]
) -> Dict[str, float]:
    """
    ``{ap50, ap75, map, recall}``; ``map`` averages AP over IoU 0.50:0.05:0.95
    and ``recall`` is taken at IoU 0.5.
    """
    ap50, recall = average_precision(predictions, truths, 0.5)
    ap75, _ = average_precision(predictions, truths, 0.75)
    per_threshold = [
        average_precision(predictions, truths, float(t))[0] for t in COCO_THRESHOLDS
    ]
    return {
        "ap50": ap50,
        "ap75": ap75,
        "map": float(np.mean(per_threshold)),
        "recall": recall,
    }


def mean_center_distance(
    centers: np.ndarray, truth: GroundTruth
) -> Optional[float]:
    """
    Mean distance from each truth center to the reference center assigned
    to it by minimum-distance matching. None when the image has no truth.
    """
    if not len(truth):
        return None
    centers = np.asarray(centers, dtype=np.float64)[:, :2]
    truth_centers = truth.boxes_array()[:, :2]
    distance = np.linalg.norm(
        centers[:, None, :] - truth_centers[None, :, :], axis=-1
    )
    match = hungarian(distance)
    return match.total_cost / len(match.pairs)


def gathering_distances(
    model, samples: Sequence[ImageSample], k: Optional[int] = None
) -> Tuple[Optional[float], Optional[float]]:
    """
    Mean center distance to ground truth of the initial container references
    and of the final predicted boxes, averaged over images with truth.
    """
    initial: List[float] = []
    final: List[float] = []
    for sample in samples:
        if not len(sample.truth):
            continue
        with no_grad():
            output = model(sample.pixels, k)
        initial.append(
            mean_center_distance(output.containers.references.data, sample.truth)
        )
        final.append(mean_center_distance(output.final.boxes.data, sample.truth))
    if not initial:
        return None, None
    return float(np.mean(initial)), float(np.mean(final))


def evaluate_detector(
    model, samples: Sequence[ImageSample], k: Optional[int] = None
) -> Dict[str, float]:
    """
    Run ``model.predict`` on every sample and score the results.
    """
    predictions = [model.predict(sample.pixels, k) for sample in samples]
    return evaluate_predictions(predictions, [s.truth for s in samples])


__all__ = [
    "COCO_THRESHOLDS",
    "average_precision",
    "evaluate_detector",
    "evaluate_predictions",
    "gathering_distances",
    "mean_center_distance",
]
