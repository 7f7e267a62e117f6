"""
Four-stage convolutional feature extractor producing the detector's
four-level feature pyramid.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from src.models.detection import FeaturePyramid
from src.models.errors import ShapeError
from src.services.layers import Module, ModuleList, Parameter
from src.services.tensor import Tensor, as_tensor, concat, conv2d

logger = logging.getLogger(__name__)

PYRAMID_STRIDE = 64


def _conv_weight(
    rng: np.random.Generator, out_ch: int, in_ch: int, kernel: int
) -> np.ndarray:
    # He-uniform for the ReLU stages.
    fan_in = in_ch * kernel * kernel
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel, kernel))


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        self.weight = Parameter(_conv_weight(rng, out_channels, in_channels, kernel))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ChannelNorm(Module):
    """
    Group normalization with one channel per group: each channel is
    normalized over its spatial extent, independent of any batch.
    """

    def __init__(self, channels: int, eps: float = 1e-5) -> None:
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mean = x.mean(axis=(1, 2), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(1, 2), keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.weight.reshape(-1, 1, 1) + self.bias.reshape(-1, 1, 1)


class ConvBlock(Module):
    """3x3 conv, channel norm, ReLU."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        stride: int = 2,
    ) -> None:
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride, 1)
        self.norm = ChannelNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x)).relu()


class Backbone(Module):
    """
    Plain CNN with four stages followed by the pyramid necks.

    The stem and stage 1 reach stride 4; stages 2-4 each halve the
    resolution and give C3 (stride 8), C4 (16) and C5 (32). C3-C5 are
    projected to ``d_model`` by 1x1 convolutions and a 3x3 stride-2
    convolution on C5 gives the fourth level (stride 64).
    """

    def __init__(
        self,
        d_model: int,
        channels: Sequence[int],
        rng: np.random.Generator,
    ) -> None:
        if len(channels) != 4:
            raise ShapeError(f"expected 4 stage widths, got {len(channels)}")
        c1, c2, c3, c4 = channels
        self.stem = ConvBlock(3, c1, rng)
        self.stages = ModuleList(
            [
                ConvBlock(c1, c1, rng),
                ConvBlock(c1, c2, rng),
                ConvBlock(c2, c3, rng),
                ConvBlock(c3, c4, rng),
            ]
        )
        self.lateral = ModuleList(
            [Conv2d(width, d_model, 1, rng) for width in (c2, c3, c4)]
        )
        self.extra = Conv2d(c4, d_model, 3, rng, stride=2, padding=1)
        self.d_model = d_model

    def forward(self, image: Tensor) -> FeaturePyramid:
        return self.extract_pyramid(image)

    def extract_pyramid(self, image: Tensor) -> FeaturePyramid:
        """
        Raises:
            ShapeError: if the image is not [3, H, W] or smaller than 64 px.
        """
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"image must be [3,H,W], got {image.shape}")
        _, height, width = image.shape
        if min(height, width) < PYRAMID_STRIDE:
            raise ShapeError(
                f"image must be at least {PYRAMID_STRIDE} px, got {height}x{width}"
            )
        x = pad_to_multiple(image, PYRAMID_STRIDE)

        x = self.stem(x)
        stage_outputs = []
        for stage in self.stages:
            x = stage(x)
            stage_outputs.append(x)
        c3, c4, c5 = stage_outputs[1:]
        levels = [proj(c) for proj, c in zip(self.lateral, (c3, c4, c5))]
        levels.append(self.extra(c5))
        return FeaturePyramid(levels=levels)


def pad_to_multiple(image: Tensor, multiple: int) -> Tensor:
    """
    Zero-pad the bottom and right edges so H and W divide ``multiple``.
    """
    _, height, width = image.shape
    pad_h = -height % multiple
    pad_w = -width % multiple
    if not pad_h and not pad_w:
        return image
    channels = image.shape[0]
    rows = Tensor(np.zeros((channels, pad_h, width)))
    tall = concat([image, rows], axis=1)
    cols = Tensor(np.zeros((channels, height + pad_h, pad_w)))
    return concat([tall, cols], axis=2)


__all__ = ["Backbone", "ChannelNorm", "Conv2d", "ConvBlock", "pad_to_multiple"]
