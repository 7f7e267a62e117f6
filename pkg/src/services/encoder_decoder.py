"""
Transformer encoder over the flattened pyramid and the decoder over object
containers.

Both stacks are post-norm: each sub-layer output is added to its input and
then layer-normalized. Encoder tokens attend deformably around their own
cell centers; decoder queries first attend to each other, then deformably
into the encoder memory around their reference boxes. After every decoder
layer the shared detection head refines the references.
"""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple, Union

import numpy as np

from src.config.settings import ModelConfig
from src.models.detection import (
    ContainerSet,
    DetectionSet,
    EncoderMemory,
    FeaturePyramid,
)
from src.services.deformable_attention import (
    AttentionConfig,
    DeformableAttention,
    MultiHeadSelfAttention,
    flatten_pyramid,
    level_cell_centers,
)
from src.services.dense_sparse_heads import DetectionHead
from src.services.layers import FeedForward, LayerNorm, Module, ModuleList, Parameter
from src.services.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


def sine_embedding(
    coords: Union[np.ndarray, Tensor],
    d_model: int,
    temperature: float = 10000.0,
) -> Tensor:
    """
    Sinusoidal encoding of normalized coordinates [N, c] into [N, d_model].

    Each coordinate gets ``d_model // c`` channels of interleaved sin/cos at
    geometrically spaced frequencies. The result is a constant.
    """
    coords = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    count = coords.shape[-1]
    per_coord = d_model // count
    dim_t = temperature ** (2 * (np.arange(per_coord) // 2) / per_coord)
    scaled = coords[..., None] * (2.0 * np.pi) / dim_t
    embedded = np.empty_like(scaled)
    embedded[..., 0::2] = np.sin(scaled[..., 0::2])
    embedded[..., 1::2] = np.cos(scaled[..., 1::2])
    return Tensor(embedded.reshape(coords.shape[:-1] + (count * per_coord,)))


def _attention_config(model: ModelConfig) -> AttentionConfig:
    return AttentionConfig(
        d_model=model.d_model,
        num_heads=model.heads,
        points_per_level=model.points,
        num_levels=4,
    )


class EncoderLayer(Module):
    def __init__(
        self, model: ModelConfig, rng: np.random.Generator, base_scale: float
    ) -> None:
        d_model = model.d_model
        self.self_attn = DeformableAttention(
            _attention_config(model), rng, ref_dim=2, base_scale=base_scale
        )
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, model.ffn_ratio * d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def forward(
        self,
        src: Tensor,
        pos: Tensor,
        centers: np.ndarray,
        spatial_shapes: Sequence[Tuple[int, int]],
    ) -> Tensor:
        attended = self.self_attn(src + pos, centers, src, spatial_shapes)
        src = self.norm1(src + attended)
        return self.norm2(src + self.ffn(src))


class Encoder(Module):
    """
    ``encoder_layers`` deformable self-attention layers. Tokens receive a
    sinusoidal encoding of their cell center plus a learned per-level
    embedding on the attention inputs.
    """

    def __init__(
        self, model: ModelConfig, rng: np.random.Generator, base_scale: float = 0.05
    ) -> None:
        self.level_embed = Parameter(rng.normal(0.0, 1.0, size=(4, model.d_model)))
        self.layers = ModuleList(
            [EncoderLayer(model, rng, base_scale) for _ in range(model.encoder_layers)]
        )
        self.d_model = model.d_model

    def forward(self, pyramid: FeaturePyramid) -> EncoderMemory:
        return self.encode(pyramid)

    def encode(self, pyramid: FeaturePyramid) -> EncoderMemory:
        shapes = pyramid.spatial_shapes
        src = flatten_pyramid(pyramid)
        centers, level_index = level_cell_centers(shapes)
        if len(self.layers):
            pos = sine_embedding(centers, self.d_model) + self.level_embed[level_index]
            for layer in self.layers:
                src = layer(src, pos, centers, shapes)
        return EncoderMemory(
            features=src,
            level_index=level_index,
            positions=centers,
            spatial_shapes=shapes,
        )


class DecoderLayer(Module):
    def __init__(
        self,
        model: ModelConfig,
        rng: np.random.Generator,
        ref_dim: int,
        base_scale: float,
    ) -> None:
        d_model = model.d_model
        self.self_attn = MultiHeadSelfAttention(d_model, model.heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = DeformableAttention(
            _attention_config(model), rng, ref_dim=ref_dim, base_scale=base_scale
        )
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, model.ffn_ratio * d_model, rng)
        self.norm3 = LayerNorm(d_model)

    def forward(
        self,
        tgt: Tensor,
        pos: Tensor,
        references: Tensor,
        memory: EncoderMemory,
    ) -> Tensor:
        tgt = self.norm1(tgt + self.self_attn(tgt, pos))
        attended = self.cross_attn(
            tgt + pos, references, memory.features, memory.spatial_shapes
        )
        tgt = self.norm2(tgt + attended)
        return self.norm3(tgt + self.ffn(tgt))


class Decoder(Module):
    """
    ``decoder_layers`` layers with iterative reference refinement.

    Queries get a sinusoidal encoding of their reference (4 or 2
    coordinates) before self-attention and cross-attention. The first
    layer's references are used as given, so gradients reach learned
    references; later layers see detached copies of the previous layer's
    predicted boxes.
    """

    def __init__(
        self,
        model: ModelConfig,
        rng: np.random.Generator,
        ref_dim: int = 4,
        base_scale: float = 0.05,
    ) -> None:
        self.layers = ModuleList(
            [
                DecoderLayer(model, rng, ref_dim, base_scale)
                for _ in range(model.decoder_layers)
            ]
        )
        self.d_model = model.d_model
        self.ref_dim = ref_dim

    def forward(
        self,
        containers: ContainerSet,
        memory: EncoderMemory,
        head: DetectionHead,
    ) -> List[DetectionSet]:
        return decode(containers, memory, self, head)


def decode(
    containers: ContainerSet,
    memory: EncoderMemory,
    decoder: Decoder,
    head: DetectionHead,
    num_layers: int | None = None,
) -> List[DetectionSet]:
    """
    Run the first ``num_layers`` decoder layers (all by default) and return
    one DetectionSet per layer.
    """
    layers = list(decoder.layers)[: num_layers or len(decoder.layers)]
    tgt = as_tensor(containers.queries)
    references = as_tensor(containers.references)
    outputs: List[DetectionSet] = []
    for layer in layers:
        pos = sine_embedding(references, decoder.d_model)
        tgt = layer(tgt, pos, references, memory)
        detections = head(tgt, references)
        outputs.append(detections)
        refined = detections.boxes.data
        if references.shape[1] == 2:
            refined = refined[:, :2]
        references = Tensor(refined.copy())
    return outputs


__all__ = [
    "Decoder",
    "DecoderLayer",
    "Encoder",
    "EncoderLayer",
    "decode",
    "sine_embedding",
]
