"""End-to-end detector: backbone -> RPN -> ROI pooling -> detection head."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .backbone import Backbone, EncoderConfig, PatchConfig
from .boxes import generate_anchors
from .detector import RPN, DetectionHead, HeadConfig, RPNConfig, postprocess, propose, roi_pool_batch
from .module import Module
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    patch: PatchConfig
    encoder: EncoderConfig
    rpn: RPNConfig
    head: HeadConfig
    residual_blocks: int = 2

    @property
    def grid(self) -> int:
        return self.patch.patches_per_side

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.patch.image_height, self.patch.image_width)


class DetTransNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.patch, cfg.encoder, cfg.residual_blocks, rng)
        self.rpn = RPN(self.backbone.out_channels, cfg.rpn, rng)
        pooled = cfg.head.pool_size**2 * self.backbone.out_channels
        self.head = DetectionHead(pooled, cfg.head, rng)

    @cached_property
    def anchors(self) -> np.ndarray:
        return generate_anchors(self.cfg.grid, self.cfg.image_size, self.cfg.rpn.anchor_spec)

    def phase1_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("head.")]

    def phase2_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("head.")]

    def features(self, image: Tensor) -> Tensor:
        return self.backbone(image)

    def proposals(self, fmap: Tensor) -> tuple[np.ndarray, np.ndarray]:
        obj, deltas = self.rpn(fmap)
        return propose(obj.data, deltas.data, self.anchors, self.cfg.rpn, self.cfg.image_size)

    def roi_head(self, fmap: Tensor, rois: np.ndarray) -> tuple[Tensor, Tensor]:
        feats = roi_pool_batch(fmap, rois, self.cfg.image_size, self.cfg.head.pool_size)
        return self.head(feats)

    def detect(self, image: Tensor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inference on one normalised H x W x C image; returns boxes, scores, class ids."""
        with no_grad():
            fmap = self.features(image)
            rois, _ = self.proposals(fmap)
            if len(rois) == 0:
                return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
            logits, deltas = self.roi_head(fmap, rois)
            return postprocess(rois, logits.data, deltas.data, self.cfg.head, self.cfg.image_size)
