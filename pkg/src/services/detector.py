"""
End-to-end detector: backbone, encoder, dense part, container
initialization and decoder wired together from one DetectorConfig.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from src.config.settings import DetectorConfig
from src.models.detection import (
    AnchorSet,
    ContainerSet,
    DetectionSet,
    EncoderMemory,
    Prediction,
)
from src.services.backbone import Backbone
from src.services.dense_sparse_heads import (
    DetectionHead,
    QueryBank,
    dense_predict,
    generate_anchors,
    init_containers,
)
from src.services.encoder_decoder import Decoder, Encoder
from src.services.layers import Module
from src.services.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class DetectorOutput:
    """
    Everything one forward pass produces, for losses and inspection.
    """

    memory: EncoderMemory
    anchors: AnchorSet
    dense: DetectionSet
    containers: ContainerSet
    layers: List[DetectionSet]

    @property
    def final(self) -> DetectionSet:
        return self.layers[-1]


class EfficientDetector(Module):
    """
    Detector with a dense prior: the dense part's top-scoring tokens
    initialize the decoder's object containers.

    Attribute names double as parameter-name prefixes in checkpoints. With
    ``share_head`` the dense part and the decoder use the same head object.
    """

    def __init__(
        self,
        config: DetectorConfig,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if rng is None:
            rng = np.random.default_rng(config.train.seed)
        model, heads = config.model, config.heads
        self.backbone = Backbone(model.d_model, model.backbone_channels, rng)
        self.encoder = Encoder(model, rng, base_scale=heads.anchor_scale)
        self.decoder = Decoder(
            model, rng, ref_dim=heads.ref_dim, base_scale=heads.anchor_scale
        )
        agnostic = heads.objectness == "agnostic"
        self.head = DetectionHead(
            model.d_model, model.num_classes, heads.hidden_dim, rng, agnostic
        )
        if heads.share_head:
            self.dense_head = self.head
        else:
            self.dense_head = DetectionHead(
                model.d_model, model.num_classes, heads.hidden_dim, rng, agnostic
            )
        self.query_bank: Optional[QueryBank] = None
        if heads.init != "dense" or heads.query_init == "learned":
            self.query_bank = QueryBank(
                config.schedule.proposals_start, model.d_model, rng
            )
        self.config = config

    def effective_k(self, k: Optional[int], tokens: int) -> int:
        """
        Proposal count actually used: ``proposals_end`` by default, capped
        at the token count for the dense strategy.
        """
        wanted = self.config.schedule.proposals_end if k is None else k
        if self.config.heads.init == "dense" and wanted > tokens:
            logger.debug("Clamping %d proposals to %d encoder tokens", wanted, tokens)
            return tokens
        return wanted

    def forward(self, image: Tensor, k: Optional[int] = None) -> DetectorOutput:
        heads = self.config.heads
        pyramid = self.backbone(image)
        memory = self.encoder.encode(pyramid)
        anchors = generate_anchors(memory, heads.anchor_scale)
        dense = dense_predict(memory, anchors, self.dense_head)
        containers = init_containers(
            memory,
            dense,
            self.effective_k(k, len(memory)),
            heads.init,
            ref_dim=heads.ref_dim,
            query_init=heads.query_init,
            bank=self.query_bank,
            base_scale=heads.anchor_scale,
            mode=heads.objectness,
        )
        layers = self.decoder(containers, memory, self.head)
        return DetectorOutput(
            memory=memory,
            anchors=anchors,
            dense=dense,
            containers=containers,
            layers=layers,
        )

    def predict(self, image: Tensor, k: Optional[int] = None) -> Prediction:
        """
        Scored detections from the last decoder layer, without recording
        gradients.
        """
        with no_grad():
            output = self.forward(image, k)
        return Prediction.from_detection_set(output.final)


__all__ = ["DetectorOutput", "EfficientDetector"]
