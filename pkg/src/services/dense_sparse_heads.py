"""
Dense part of the detector and object-container initialization.

Every encoder token gets one square anchor and a detection-head prediction
(the dense part). The most confident tokens then seed the decoder's object
containers: their predicted boxes become reference boxes and their memory
features become object queries. Four alternative initializations without
the dense prior (learnable, grid, center, border) are kept for comparison.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Union

import numpy as np

from src.config.settings import INIT_STRATEGIES, ScheduleConfig
from src.models.detection import AnchorSet, ContainerSet, DetectionSet, EncoderMemory
from src.models.errors import ConfigError, ContractError, ShapeError
from src.services.layers import MLP, Linear, Module, Parameter
from src.services.tensor import (
    Tensor,
    as_tensor,
    concat,
    inverse_sigmoid,
)

logger = logging.getLogger(__name__)

# Classification bias so every class starts at probability 0.01.
PRIOR_PROBABILITY = 0.01

ProposalSchedule = ScheduleConfig


def refine_boxes(references: Union[Tensor, np.ndarray], delta: Tensor) -> Tensor:
    """
    Apply predicted offsets in inverse-sigmoid space.

    4-d references are refined as whole boxes. For 2-d references only the
    center is refined and the size is ``sigmoid(delta[:, 2:])``.
    """
    refs = as_tensor(references)
    if refs.shape[-1] == 4:
        return (inverse_sigmoid(refs) + delta).sigmoid()
    if refs.shape[-1] == 2:
        centers = (inverse_sigmoid(refs) + delta[:, :2]).sigmoid()
        return concat([centers, delta[:, 2:].sigmoid()], axis=1)
    raise ShapeError(f"references must be [N,2] or [N,4], got {refs.shape}")


class DetectionHead(Module):
    """
    Class logits ``Linear(D, C)`` and box offsets from a 3-layer MLP
    ``D -> hidden -> hidden -> 4``. The last MLP layer starts at zero so an
    untrained head returns its references unchanged.

    With ``agnostic`` an extra ``Linear(D, 1)`` scores foreground for the
    class-agnostic objectness of the dense part.
    """

    def __init__(
        self,
        d_model: int,
        num_classes: int,
        hidden_dim: int,
        rng: np.random.Generator,
        agnostic: bool = False,
    ) -> None:
        prior = -math.log((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
        self.class_embed = Linear(d_model, num_classes, rng)
        self.class_embed.bias.assign(np.full(num_classes, prior))
        self.bbox_embed = MLP(d_model, hidden_dim, 4, 3, rng, zero_last=True)
        self.objectness_embed: Optional[Linear] = None
        if agnostic:
            self.objectness_embed = Linear(d_model, 1, rng)
            self.objectness_embed.bias.assign(np.array([prior]))

    def forward(
        self, features: Tensor, references: Union[Tensor, np.ndarray]
    ) -> DetectionSet:
        logits = self.class_embed(features)
        boxes = refine_boxes(references, self.bbox_embed(features))
        foreground = (
            self.objectness_embed(features)
            if self.objectness_embed is not None
            else None
        )
        return DetectionSet(
            logits=logits,
            boxes=boxes,
            references=as_tensor(references).numpy(),
            objectness_logits=foreground,
        )


class QueryBank(Module):
    """
    Learned object queries for the strategies that do not take queries from
    the encoder, plus the projection that turns a query into a 2-d
    reference for the ``learnable`` strategy.
    """

    def __init__(self, size: int, d_model: int, rng: np.random.Generator) -> None:
        self.query_embed = Parameter(rng.normal(0.0, 1.0, size=(size, d_model)))
        self.ref_proj = Linear(d_model, 2, rng)

    @property
    def size(self) -> int:
        return self.query_embed.shape[0]

    def queries(self, k: int) -> Tensor:
        if k > self.size:
            raise ConfigError(f"requested {k} learned queries, bank holds {self.size}")
        return self.query_embed[:k]


def generate_anchors(memory: EncoderMemory, base_scale: float = 0.05) -> AnchorSet:
    """
    One square anchor per token, centered on its cell, of side
    ``base_scale * 2**level`` (capped at 1).
    """
    sizes = np.minimum(base_scale * 2.0 ** memory.level_index, 1.0)
    boxes = np.concatenate(
        [memory.positions, np.stack([sizes, sizes], axis=-1)], axis=-1
    )
    return AnchorSet(boxes=boxes, base_scale=base_scale)


def dense_predict(
    memory: EncoderMemory, anchors: AnchorSet, head: DetectionHead
) -> DetectionSet:
    if len(anchors) != len(memory):
        raise ShapeError(
            f"{len(anchors)} anchors for {len(memory)} encoder tokens"
        )
    return head(memory.features, anchors.boxes)


def _mode(mode: str) -> str:
    if mode in ("specific", "class_specific"):
        return "specific"
    if mode in ("agnostic", "class_agnostic"):
        return "agnostic"
    raise ConfigError(f"unknown objectness mode '{mode}'")


def objectness(
    logits: Union[Tensor, np.ndarray],
    mode: str = "specific",
    foreground_logits: Union[Tensor, np.ndarray, None] = None,
) -> np.ndarray:
    """
    Foreground score per prediction, [N].

    ``specific`` takes the highest class probability; ``agnostic`` uses the
    sigmoid of the auxiliary foreground logit.
    """
    if _mode(mode) == "specific":
        return as_tensor(logits).sigmoid().data.max(axis=1)
    if foreground_logits is None:
        raise ContractError("class-agnostic objectness needs foreground logits")
    return as_tensor(foreground_logits).sigmoid().data.reshape(-1)


def grid_centers(k: int) -> np.ndarray:
    side = math.ceil(math.sqrt(k))
    ticks = (np.arange(side) + 0.5) / side
    cx, cy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([cx.ravel(), cy.ravel()], axis=-1)[:k]


def border_centers(k: int) -> np.ndarray:
    """
    ``k`` points evenly spaced along the image border, clockwise from the
    top-left corner.
    """
    t = 4.0 * np.arange(k) / k
    side = np.floor(t).astype(int)
    f = t - side
    x = np.select([side == 0, side == 1, side == 2], [f, 1.0, 1.0 - f], 0.0)
    y = np.select([side == 0, side == 1, side == 2], [0.0, f, 1.0], 1.0 - f)
    return np.stack([x, y], axis=-1)


def _with_size(centers: Tensor, ref_dim: int, base_scale: float) -> Tensor:
    if ref_dim == 2:
        return centers
    sizes = Tensor(np.full(centers.shape, base_scale))
    return concat([centers, sizes], axis=1)


def init_containers(
    memory: EncoderMemory,
    dense: DetectionSet,
    k: int,
    strategy: str = "dense",
    *,
    ref_dim: int = 4,
    query_init: str = "dense",
    bank: Optional[QueryBank] = None,
    base_scale: float = 0.05,
    mode: str = "specific",
) -> ContainerSet:
    """
    Build ``k`` object containers.

    ``dense`` keeps the top-k tokens by objectness (stable, lower index wins
    ties): references are their predicted boxes (or centers for 2-d
    references) and queries their memory features, or learned queries when
    ``query_init`` is ``learned``. The other strategies pair learned queries
    with fixed references; box references then get side ``base_scale``.

    Raises:
        ConfigError: on an unknown strategy, on ``k`` above the token count
            for ``dense``, or when learned queries are needed without a bank.
    """
    if strategy not in INIT_STRATEGIES:
        raise ConfigError(f"unknown init strategy '{strategy}'")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    if ref_dim not in (2, 4):
        raise ConfigError(f"ref_dim must be 2 or 4, got {ref_dim}")
    needs_bank = strategy != "dense" or query_init == "learned"
    if needs_bank and bank is None:
        raise ConfigError(f"strategy '{strategy}' needs a learned query bank")

    if strategy == "dense":
        if k > len(memory):
            raise ConfigError(
                f"k={k} exceeds the {len(memory)} encoder tokens"
            )
        foreground = None
        if dense.objectness_logits is not None:
            foreground = dense.objectness_logits.data
        scores = objectness(dense.logits.data, mode, foreground)
        selected = np.argsort(-scores, kind="stable")[:k]
        refs = dense.boxes.data[selected]
        if ref_dim == 2:
            refs = refs[:, :2]
        queries = (
            memory.features[selected]
            if query_init == "dense"
            else bank.queries(k)
        )
        return ContainerSet(
            queries=queries,
            references=Tensor(refs),
            source_index=selected,
            strategy=strategy,
        )

    queries = bank.queries(k)
    if strategy == "learnable":
        centers = bank.ref_proj(queries).sigmoid()
    elif strategy == "grid":
        centers = Tensor(grid_centers(k))
    elif strategy == "center":
        centers = Tensor(np.full((k, 2), 0.5))
    else:
        centers = Tensor(border_centers(k))
    return ContainerSet(
        queries=queries,
        references=_with_size(centers, ref_dim, base_scale),
        strategy=strategy,
    )


def proposals_at(schedule: ProposalSchedule, epoch: int, total_epochs: int) -> int:
    """
    Live proposal count: linear from ``proposals_start`` down to
    ``proposals_end`` over ``decay_epochs`` (default ``total_epochs``),
    rounded half up. ``fixed`` mode always returns ``proposals_end``.
    """
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{total_epochs}")
    if schedule.mode == "fixed":
        return schedule.proposals_end
    decay = schedule.decay_epochs or total_epochs
    fraction = min(epoch / decay, 1.0) if decay else 1.0
    start, end = schedule.proposals_start, schedule.proposals_end
    return int(math.floor(start + (end - start) * fraction + 0.5))


__all__ = [
    "DetectionHead",
    "ProposalSchedule",
    "QueryBank",
    "border_centers",
    "dense_predict",
    "generate_anchors",
    "grid_centers",
    "init_containers",
    "objectness",
    "proposals_at",
    "refine_boxes",
]
