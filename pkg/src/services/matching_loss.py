"""
Set-prediction matching and losses.

Predictions are matched to ground truth by minimum-cost bipartite
assignment with the same weighted focal, L1 and GIoU terms the loss uses.
The dense part may instead use a 1-to-N rule that marks the top-IoU
predictions of every truth as positives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config.settings import LossConfig
from src.models.annotations import GroundTruth
from src.models.detection import DetectionSet, MatchResult
from src.models.errors import NumericError, ShapeError
from src.services.box_ops import giou_tensor, pairwise_giou, pairwise_iou
from src.services.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

LossWeights = LossConfig


# --------------------------------------------------------------------------- #
# Hungarian assignment
# --------------------------------------------------------------------------- #


def _solve_rows(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Shortest augmenting path assignment with potentials for ``n <= m``.

    Returns ``(col_of_row, u, v)`` where ``u``/``v`` are optimal row/column
    potentials: ``cost - u[:, None] - v[None, :] >= 0`` with equality on
    every assigned cell, and ``v == 0`` on unassigned columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 1-based row per column, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)

    for row in range(1, n + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    col_of_row = np.full(n, -1, dtype=np.int64)
    for col in range(1, m + 1):
        if owner[col]:
            col_of_row[owner[col] - 1] = col - 1
    return col_of_row, u[1:], v[1:]


def _assign(cost: np.ndarray) -> Tuple[List[Tuple[int, int]], np.ndarray]:
    """
    Optimal pairs (row, col) in any orientation, plus the reduced-cost
    matrix of the optimal potentials.
    """
    n, g = cost.shape
    if n == 0 or g == 0:
        return [], np.zeros_like(cost)
    if n <= g:
        cols, u, v = _solve_rows(cost)
        pairs = [(r, int(c)) for r, c in enumerate(cols)]
        reduced = cost - u[:, None] - v[None, :]
    else:
        rows, u, v = _solve_rows(cost.T)
        pairs = sorted((int(r), t) for t, r in enumerate(rows))
        reduced = (cost.T - u[:, None] - v[None, :]).T
    return pairs, reduced


def _pairs_cost(cost: np.ndarray, pairs: Sequence[Tuple[int, int]]) -> float:
    return float(sum(cost[p, t] for p, t in pairs))


def _canonical(
    cost: np.ndarray,
    pairs: List[Tuple[int, int]],
    reduced: np.ndarray,
) -> List[Tuple[int, int]]:
    """
    Among all optimal assignments, return the lexicographically smallest
    pair list (pairs sorted by prediction index).

    Predictions are fixed in index order. Each is matched whenever some
    optimal completion allows it, to the smallest such truth. Only tight
    cells (zero reduced cost) can belong to an optimal assignment, so other
    cells are never tried; a candidate is accepted when re-solving the
    remaining rows and columns still reaches the optimum.
    """
    n, g = cost.shape
    size = min(n, g)
    optimum = _pairs_cost(cost, pairs)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = reduced <= tol

    current = dict(pairs)
    decided: Dict[int, int] = {}  # prediction -> truth, -1 when skipped
    for p in range(n):
        assigned = current.get(p, -1)
        limit = assigned if assigned >= 0 else g
        taken = {t for t in decided.values() if t >= 0}
        for t in np.flatnonzero(tight[p, :limit]):
            t = int(t)
            if t in taken:
                continue
            attempt = _complete(cost, decided, p, t, size)
            if attempt is not None and _pairs_cost(cost, attempt) <= optimum + tol:
                current = dict(attempt)
                assigned = t
                break
        decided[p] = assigned
    return sorted((p, t) for p, t in decided.items() if t >= 0)


def _complete(
    cost: np.ndarray,
    decided: Dict[int, int],
    p: int,
    t: int,
    size: int,
) -> Optional[List[Tuple[int, int]]]:
    """
    Best full assignment with earlier decisions kept and ``p -> t`` fixed,
    or None if it cannot reach ``size`` pairs.
    """
    fixed = [(q, s) for q, s in decided.items() if s >= 0] + [(p, t)]
    used = {s for _, s in fixed}
    rows = np.arange(p + 1, cost.shape[0])
    cols = np.array([s for s in range(cost.shape[1]) if s not in used], dtype=np.int64)
    rest: List[Tuple[int, int]] = []
    if len(rows) and len(cols):
        sub_pairs, _ = _assign(cost[np.ix_(rows, cols)])
        rest = [(int(rows[r]), int(cols[c])) for r, c in sub_pairs]
    if len(fixed) + len(rest) != size:
        return None
    return fixed + rest


def hungarian(cost: np.ndarray) -> MatchResult:
    """
    Minimum-cost injective assignment of ``min(N, G)`` pairs.

    Ties resolve to the lexicographically smallest pair list.

    Raises:
        NumericError: if any entry is not finite.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {cost.shape}")
    if cost.size and not np.all(np.isfinite(cost)):
        raise NumericError("hungarian received a non-finite cost entry")
    pairs, reduced = _assign(cost)
    if pairs:
        pairs = _canonical(cost, pairs, reduced)
    return MatchResult(pairs=pairs, total_cost=_pairs_cost(cost, pairs))


# --------------------------------------------------------------------------- #
# Costs and assignment rules
# --------------------------------------------------------------------------- #


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def focal_cost(
    logits: np.ndarray, labels: np.ndarray, alpha: float, gamma: float
) -> np.ndarray:
    """
    Positive minus negative focal term at each truth's class, [N, G].
    """
    x = logits[:, labels]
    prob = np.exp(_log_sigmoid(x))
    positive = -alpha * (1.0 - prob) ** gamma * _log_sigmoid(x)
    negative = -(1.0 - alpha) * prob**gamma * _log_sigmoid(-x)
    return positive - negative


def l1_cdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def match_cost(
    pred: DetectionSet, truth: GroundTruth, weights: LossWeights
) -> np.ndarray:
    """
    Matching cost [N, G]: weighted focal class cost, L1 distance of cxcywh
    boxes and ``1 - GIoU``.
    """
    n, g = len(pred), len(truth)
    if g == 0:
        return np.zeros((n, 0))
    boxes = pred.boxes.data
    truth_boxes = truth.boxes_array()
    return (
        weights.lambda_cls
        * focal_cost(
            pred.logits.data,
            truth.labels_array(),
            weights.focal_alpha,
            weights.focal_gamma,
        )
        + weights.lambda_l1 * l1_cdist(boxes, truth_boxes)
        + weights.lambda_giou * (1.0 - pairwise_giou(boxes, truth_boxes))
    )


def assign_1toN(
    iou: np.ndarray, n: int, cost: Optional[np.ndarray] = None
) -> MatchResult:
    """
    Positive predictions for every truth.

    ``n == 1`` is one-to-one Hungarian matching on ``cost`` (``-iou`` when
    no cost is given). For larger ``n`` each truth claims its ``n``
    highest-IoU predictions; a prediction claimed twice stays with the truth
    it overlaps most.
    """
    iou = np.asarray(iou, dtype=np.float64)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n == 1:
        return hungarian(-iou if cost is None else cost)

    num_pred, num_truth = iou.shape
    best: Dict[int, Tuple[float, int]] = {}
    for t in range(num_truth):
        ranked = np.argsort(-iou[:, t], kind="stable")[:n]
        for p in ranked:
            p = int(p)
            claim = (iou[p, t], -t)
            if p not in best or claim > (best[p][0], -best[p][1]):
                best[p] = (iou[p, t], t)
    pairs = sorted((p, t) for p, (_, t) in best.items())
    total = _pairs_cost(cost, pairs) if cost is not None else 0.0
    return MatchResult(pairs=pairs, total_cost=total)


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float = 1.0,
) -> Tensor:
    """
    Sigmoid focal loss summed over every element, divided by
    ``normalizer``.
    """
    logits = as_tensor(logits)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.shape)
    prob = logits.sigmoid()
    log_p = -(-logits).softplus()
    log_not_p = -logits.softplus()
    positive = -alpha * (1.0 - prob) ** gamma * log_p
    negative = -(1.0 - alpha) * prob**gamma * log_not_p
    return (positive * targets + negative * (1.0 - targets)).sum() * (
        1.0 / normalizer
    )


@dataclass
class LossBreakdown:
    """
    Attributes:
        total: Weighted scalar loss, differentiable.
        terms: Unweighted per-term sums (``loss_cls``, ``loss_l1``,
            ``loss_giou`` and ``loss_objectness`` when present).
        matches: Assignment used per supervised output, decoder layers
            first and the dense part last.
    """

    total: Tensor
    terms: Dict[str, float] = field(default_factory=dict)
    matches: List[MatchResult] = field(default_factory=list)


def _detection_terms(
    det: DetectionSet,
    truth: GroundTruth,
    match: MatchResult,
    weights: LossWeights,
    normalizer: float,
) -> Tuple[Tensor, Tensor, Tensor]:
    targets = np.zeros(det.logits.shape)
    pred_idx = match.prediction_indices()
    truth_idx = match.truth_indices()
    labels = truth.labels_array()
    if len(pred_idx):
        targets[pred_idx, labels[truth_idx]] = 1.0
    cls = focal_loss(
        det.logits, targets, weights.focal_alpha, weights.focal_gamma, normalizer
    )
    if not len(pred_idx):
        zero = Tensor(0.0)
        return cls, zero, zero
    pred_boxes = det.boxes[pred_idx]
    truth_boxes = Tensor(truth.boxes_array()[truth_idx])
    l1 = (pred_boxes - truth_boxes).abs().sum() * (1.0 / normalizer)
    giou = (1.0 - giou_tensor(pred_boxes, truth_boxes)).sum() * (1.0 / normalizer)
    return cls, l1, giou


def _dense_match(
    dense: DetectionSet, truth: GroundTruth, weights: LossWeights
) -> MatchResult:
    cost = match_cost(dense, truth, weights)
    if weights.assign_n == 1:
        return hungarian(cost)
    iou = pairwise_iou(dense.boxes.data, truth.boxes_array())
    return assign_1toN(iou, weights.assign_n, cost)


def set_loss(
    all_layer_outputs: Sequence[DetectionSet],
    dense_output: Optional[DetectionSet],
    truth: GroundTruth,
    weights: LossWeights,
    fixed_matches: Optional[Sequence[MatchResult]] = None,
) -> LossBreakdown:
    """
    Set-prediction loss over decoder layers and the dense part.

    Every supervised output is matched independently; matched predictions
    pay the weighted focal, L1 and GIoU terms, all others only the
    negative focal term. Terms are normalized by ``max(G, 1)``. With
    ``aux_loss`` off only the last decoder layer is supervised. A dense
    output carrying foreground logits additionally pays a binary focal
    term on its positives.

    ``fixed_matches`` replaces the assignments (same order as
    ``LossBreakdown.matches``), e.g. for gradient checks.
    """
    if not all_layer_outputs:
        raise ValueError("set_loss needs at least one decoder output")
    layers = list(all_layer_outputs)
    if not weights.aux_loss:
        layers = layers[-1:]
    parts: List[Tuple[DetectionSet, bool]] = [(out, False) for out in layers]
    if dense_output is not None:
        parts.append((dense_output, True))
    if fixed_matches is not None and len(fixed_matches) != len(parts):
        raise ValueError(
            f"{len(fixed_matches)} fixed matches for {len(parts)} outputs"
        )

    normalizer = float(max(len(truth), 1))
    total = Tensor(0.0)
    sums = {"loss_cls": 0.0, "loss_l1": 0.0, "loss_giou": 0.0}
    matches: List[MatchResult] = []

    for index, (det, is_dense) in enumerate(parts):
        if fixed_matches is not None:
            match = fixed_matches[index]
        elif is_dense:
            match = _dense_match(det, truth, weights)
        else:
            match = hungarian(match_cost(det, truth, weights))
        matches.append(match)

        cls, l1, giou = _detection_terms(det, truth, match, weights, normalizer)
        total = (
            total
            + weights.lambda_cls * cls
            + weights.lambda_l1 * l1
            + weights.lambda_giou * giou
        )
        sums["loss_cls"] += cls.item()
        sums["loss_l1"] += l1.item()
        sums["loss_giou"] += giou.item()

        if is_dense and det.objectness_logits is not None:
            foreground = np.zeros(det.objectness_logits.shape)
            if match.pairs:
                foreground[match.prediction_indices(), 0] = 1.0
            objectness = focal_loss(
                det.objectness_logits,
                foreground,
                weights.focal_alpha,
                weights.focal_gamma,
                normalizer,
            )
            total = total + weights.lambda_cls * objectness
            sums["loss_objectness"] = objectness.item()

    return LossBreakdown(total=total, terms=sums, matches=matches)


__all__ = [
    "LossBreakdown",
    "LossWeights",
    "assign_1toN",
    "focal_cost",
    "focal_loss",
    "hungarian",
    "l1_cdist",
    "match_cost",
    "set_loss",
]
