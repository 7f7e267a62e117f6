"""
Multi-scale deformable attention and plain multi-head self-attention.

Deformable attention lets every query read a few bilinear samples per head
and pyramid level, placed around the query's reference by offsets predicted
from the query itself, and mixes them with softmax weights that are also
predicted from the query.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, root_validator

from src.models.annotations import BoxCXCYWH
from src.models.detection import FeaturePyramid
from src.models.errors import ConfigError, ShapeError
from src.services.layers import Linear, Module
from src.services.tensor import Tensor, as_tensor, concat, grid_sample, matmul, softmax

logger = logging.getLogger(__name__)

References = Union[Tensor, np.ndarray, Sequence[BoxCXCYWH]]


class AttentionConfig(BaseModel):
    d_model: int = Field(..., ge=1)
    num_heads: int = Field(8, ge=1)
    points_per_level: int = Field(4, ge=1)
    num_levels: int = Field(4, ge=1)

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def heads_divide_width(cls, values):  # type: ignore[no-untyped-def]
        if values["d_model"] % values["num_heads"]:
            raise ValueError(
                f"d_model ({values['d_model']}) must be divisible by "
                f"num_heads ({values['num_heads']})."
            )
        return values

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class SamplingField:
    """
    Per-query sampling pattern.

    Attributes:
        offsets: Tensor[N, M, L, K, 2] predicted offsets.
        weights: Tensor[N, M, L, K]; sums to 1 over (L, K) per head.
        locations: Tensor[N, M, L, K, 2] normalized sampling points.
    """

    offsets: Tensor
    weights: Tensor
    locations: Tensor


def radial_offset_bias(
    heads: int, levels: int, points: int, ref_dim: int, base_scale: float
) -> np.ndarray:
    """
    Initial offsets [M, L, K, 2]: head ``m`` looks along direction
    ``2*pi*m/M`` (scaled onto the unit square's boundary) with the ``K``
    points spread from the reference outwards.

    With box references the radius is a fraction of the half box size, so
    the outermost point lands on the box edge. With point references it is
    an absolute normalized distance that grows with the level stride.
    """
    theta = 2.0 * np.pi * np.arange(heads) / heads
    directions = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    directions /= np.abs(directions).max(axis=-1, keepdims=True)
    steps = (np.arange(points) + 1.0) / points
    if ref_dim == 4:
        radius = np.tile(steps, (levels, 1))
    else:
        radius = base_scale * (2.0 ** np.arange(levels))[:, None] * steps[None, :]
    return directions[:, None, None, :] * radius[None, :, :, None]


def flatten_pyramid(pyramid: FeaturePyramid) -> Tensor:
    """Concatenate levels as tokens: [sum(H_l * W_l), D], row-major per level."""
    d_model = pyramid.d_model
    return concat(
        [
            level.reshape(d_model, -1).transpose(1, 0)
            for level in pyramid.levels
        ],
        axis=0,
    )


def _as_reference_tensor(refs: References) -> Tensor:
    if isinstance(refs, Tensor):
        return refs
    if isinstance(refs, np.ndarray):
        return Tensor(refs)
    return Tensor(np.stack([box.to_array() for box in refs]))


class DeformableAttention(Module):
    """
    Multi-scale deformable attention over a flattened pyramid.

    ``forward(queries[N, D], refs, value[S, D], spatial_shapes)`` returns
    ``[N, D]``. ``refs`` are 4-d cxcywh boxes or 2-d centers according to
    ``ref_dim``; with boxes, offsets are fractions of the half box size.
    """

    def __init__(
        self,
        config: AttentionConfig,
        rng: np.random.Generator,
        ref_dim: int = 4,
        base_scale: float = 0.05,
    ) -> None:
        if ref_dim not in (2, 4):
            raise ConfigError(f"ref_dim must be 2 or 4, got {ref_dim}")
        d_model = config.d_model
        heads, levels, points = (
            config.num_heads,
            config.num_levels,
            config.points_per_level,
        )
        self.value_proj = Linear(d_model, d_model, rng)
        self.sampling_offsets = Linear(
            d_model, heads * levels * points * 2, rng, zero_init=True
        )
        self.sampling_offsets.bias.assign(
            radial_offset_bias(heads, levels, points, ref_dim, base_scale).reshape(-1)
        )
        self.attention_weights = Linear(
            d_model, heads * levels * points, rng, zero_init=True
        )
        self.output_proj = Linear(d_model, d_model, rng)
        self.config = config
        self.ref_dim = ref_dim

    def sampling_field(self, queries: Tensor, refs: References) -> SamplingField:
        cfg = self.config
        queries = as_tensor(queries)
        refs = _as_reference_tensor(refs)
        n = queries.shape[0]
        if refs.shape != (n, self.ref_dim):
            raise ShapeError(
                f"expected references [{n}, {self.ref_dim}], got {refs.shape}"
            )
        shape = (n, cfg.num_heads, cfg.num_levels, cfg.points_per_level)
        offsets = self.sampling_offsets(queries).reshape(shape + (2,))
        logits = self.attention_weights(queries).reshape(
            n, cfg.num_heads, cfg.num_levels * cfg.points_per_level
        )
        weights = softmax(logits, axis=-1).reshape(shape)

        if self.ref_dim == 4:
            centers = refs[:, :2].reshape(n, 1, 1, 1, 2)
            half_size = refs[:, 2:].reshape(n, 1, 1, 1, 2) * 0.5
            locations = centers + offsets * half_size
        else:
            locations = refs.reshape(n, 1, 1, 1, 2) + offsets
        return SamplingField(offsets=offsets, weights=weights, locations=locations)

    def forward(
        self,
        queries: Tensor,
        refs: References,
        value: Tensor,
        spatial_shapes: Sequence[Tuple[int, int]],
    ) -> Tensor:
        cfg = self.config
        if len(spatial_shapes) != cfg.num_levels:
            raise ShapeError(
                f"attention has {cfg.num_levels} levels, input has "
                f"{len(spatial_shapes)}"
            )
        value = as_tensor(value)
        tokens = sum(h * w for h, w in spatial_shapes)
        if value.shape != (tokens, cfg.d_model):
            raise ShapeError(
                f"value must be [{tokens}, {cfg.d_model}], got {value.shape}"
            )

        field = self.sampling_field(queries, refs)
        n = field.weights.shape[0]
        heads, points, head_dim = cfg.num_heads, cfg.points_per_level, cfg.head_dim
        projected = self.value_proj(value)

        mixed = None
        start = 0
        for level, (height, width) in enumerate(spatial_shapes):
            stop = start + height * width
            level_value = (
                projected[start:stop]
                .reshape(height, width, heads, head_dim)
                .transpose(2, 3, 0, 1)
            )
            start = stop
            points_l = (
                field.locations[:, :, level]
                .transpose(1, 0, 2, 3)
                .reshape(heads, n * points, 2)
            )
            sampled = grid_sample(level_value, points_l).reshape(
                heads, n, points, head_dim
            )
            weights_l = (
                field.weights[:, :, level]
                .transpose(1, 0, 2)
                .reshape(heads, n, points, 1)
            )
            contribution = (sampled * weights_l).sum(axis=2)
            mixed = contribution if mixed is None else mixed + contribution

        out = mixed.transpose(1, 0, 2).reshape(n, cfg.d_model)
        return self.output_proj(out)


class MultiHeadSelfAttention(Module):
    """
    Scaled dot-product attention among queries, scale ``1/sqrt(D/M)``.

    ``pos`` is added to the query/key inputs only; values see the raw
    queries.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator) -> None:
        if d_model % heads:
            raise ConfigError(
                f"d_model ({d_model}) must be divisible by heads ({heads})"
            )
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.heads = heads
        self.d_model = d_model

    def forward(self, queries: Tensor, pos: Tensor | None = None) -> Tensor:
        queries = as_tensor(queries)
        n = queries.shape[0]
        heads, head_dim = self.heads, self.d_model // self.heads
        qk_input = queries if pos is None else queries + pos

        q = self.q_proj(qk_input).reshape(n, heads, head_dim).transpose(1, 0, 2)
        k = self.k_proj(qk_input).reshape(n, heads, head_dim).transpose(1, 2, 0)
        v = self.v_proj(queries).reshape(n, heads, head_dim).transpose(1, 0, 2)
        scores = matmul(q, k) * (1.0 / np.sqrt(head_dim))
        attn = softmax(scores, axis=-1)
        out = matmul(attn, v).transpose(1, 0, 2).reshape(n, self.d_model)
        return self.out_proj(out)


def deform_attn(
    queries: Tensor,
    ref_boxes: References,
    pyramid: FeaturePyramid,
    params: DeformableAttention,
) -> Tensor:
    """
    Deformable attention of ``queries`` into a feature pyramid.
    """
    if len(pyramid.levels) != params.config.num_levels:
        raise ShapeError(
            f"attention has {params.config.num_levels} levels, pyramid has "
            f"{len(pyramid.levels)}"
        )
    return params(
        queries, ref_boxes, flatten_pyramid(pyramid), pyramid.spatial_shapes
    )


def self_attn(queries: Tensor, params: MultiHeadSelfAttention) -> Tensor:
    return params(queries)


def level_cell_centers(
    spatial_shapes: Sequence[Tuple[int, int]]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normalized cell centers [S, 2] and level index [S] in flattening order.
    """
    centers: List[np.ndarray] = []
    levels: List[np.ndarray] = []
    for level, (height, width) in enumerate(spatial_shapes):
        ys, xs = np.meshgrid(
            (np.arange(height) + 0.5) / height,
            (np.arange(width) + 0.5) / width,
            indexing="ij",
        )
        centers.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
        levels.append(np.full(height * width, level, dtype=np.int64))
    return np.concatenate(centers), np.concatenate(levels)


__all__ = [
    "AttentionConfig",
    "DeformableAttention",
    "MultiHeadSelfAttention",
    "SamplingField",
    "deform_attn",
    "flatten_pyramid",
    "level_cell_centers",
    "radial_offset_bias",
    "self_attn",
]
