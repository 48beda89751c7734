"""Region proposal network, ROI pooling and the detection head.

The RPN is a shared s x s convolution followed by two 1 x 1 convolutions. A
1 x 1 convolution applied at every sliding-window position is the same map as
a fully connected layer applied to each window's feature vector, so the two
heads below are the per-window box classifier and box regressor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import (
    AnchorSpec,
    BBox,
    GeometryError,
    as_boxes,
    batched_nms,
    clip_boxes,
    decode_boxes,
    nms,
    score_order,
    valid_mask,
)
from .module import Module, he_conv, param, zeros_param
from .tensor import Tensor


@dataclass(frozen=True)
class RPNConfig:
    kernel_size: int = 3
    hidden_dim: int = 64
    anchor_spec: AnchorSpec = field(default_factory=AnchorSpec)
    nms_iou: float = 0.7
    pre_nms_top: int = 300
    post_nms_top: int = 100

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"RPN kernel size must be odd and positive, got {self.kernel_size}")
        if not 0 < self.nms_iou < 1:
            raise ValueError(f"RPN nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.hidden_dim < 1 or self.pre_nms_top < 1 or self.post_nms_top < 1:
            raise ValueError("RPN hidden_dim, pre_nms_top and post_nms_top must be positive")


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 3
    pool_size: int = 7
    hidden_dim: int = 128
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    # head deltas are predicted in units of these multiples of the raw encoding
    box_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "box_weights", tuple(float(w) for w in self.box_weights))
        if len(self.box_weights) != 4 or min(self.box_weights) <= 0:
            raise ValueError(f"box_weights must be 4 positive numbers, got {self.box_weights}")
        if self.num_classes < 1 or self.pool_size < 1 or self.hidden_dim < 1:
            raise ValueError("num_classes, pool_size and hidden_dim must be positive")


class RPN(Module):
    def __init__(self, in_channels: int, cfg: RPNConfig, rng: np.random.Generator):
        A = cfg.anchor_spec.num_anchors
        self.cfg = cfg
        self.w_conv = he_conv(rng, cfg.kernel_size, in_channels, cfg.hidden_dim)
        self.b_conv = zeros_param(cfg.hidden_dim)
        self.w_obj = param(rng.standard_normal((1, 1, cfg.hidden_dim, A)) * 0.01)
        self.b_obj = zeros_param(A)
        self.w_delta = param(rng.standard_normal((1, 1, cfg.hidden_dim, 4 * A)) * 0.01)
        self.b_delta = zeros_param(4 * A)

    def __call__(self, fmap: Tensor) -> tuple[Tensor, Tensor]:
        """Returns objectness logits (g x g x A) and box deltas (g x g x 4A)."""
        hidden = T.relu(T.conv2d(fmap, self.w_conv, self.b_conv))
        return T.conv2d(hidden, self.w_obj, self.b_obj), T.conv2d(hidden, self.w_delta, self.b_delta)


def rpn_forward(fmap: Tensor, rpn: RPN) -> tuple[Tensor, Tensor]:
    return rpn(fmap)


def propose(
    objectness_logits,
    deltas,
    anchors: np.ndarray,
    cfg: RPNConfig,
    image_size,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode all anchors, clip, drop degenerate, keep ``pre_nms_top`` by
    objectness, NMS at ``cfg.nms_iou``, keep ``post_nms_top``.

    Returns ``(boxes, objectness)`` sorted by descending objectness.
    """
    logits = np.asarray(getattr(objectness_logits, "data", objectness_logits), dtype=np.float64).reshape(-1)
    raw = np.asarray(getattr(deltas, "data", deltas), dtype=np.float64).reshape(-1, 4)
    scores = 1.0 / (1.0 + np.exp(-logits))
    boxes = clip_boxes(decode_boxes(anchors, raw), image_size)
    keep = np.flatnonzero(valid_mask(boxes))
    boxes, scores = boxes[keep], scores[keep]
    top = score_order(scores)[: cfg.pre_nms_top]
    boxes, scores = boxes[top], scores[top]
    kept = nms(boxes, scores, cfg.nms_iou)[: cfg.post_nms_top]
    return boxes[kept], scores[kept]


def roi_sampling_matrix(boxes: np.ndarray, grid: int, image_size, q: int) -> np.ndarray:
    """Bilinear interpolation weights, shape (R*q*q, grid*grid).

    Each box is split into q x q bins and sampled once at every bin centre.
    Feature cell ``(i, j)`` sits at image point ``((j + .5) W/g, (i + .5) H/g)``,
    so image x maps to grid column ``x * g / W - 0.5``; samples are clamped to
    the grid.
    """
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    boxes = as_boxes(boxes)
    R = len(boxes)
    frac = (np.arange(q) + 0.5) / q
    xs = boxes[:, 0:1] + frac[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # R x q
    ys = boxes[:, 1:2] + frac[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    u = np.clip(xs * grid / W - 0.5, 0, grid - 1)
    v = np.clip(ys * grid / H - 0.5, 0, grid - 1)
    u0 = np.minimum(np.floor(u).astype(np.intp), grid - 1)
    v0 = np.minimum(np.floor(v).astype(np.intp), grid - 1)
    u1, v1 = np.minimum(u0 + 1, grid - 1), np.minimum(v0 + 1, grid - 1)
    fu, fv = u - u0, v - v0
    M = np.zeros((R, q, q, grid * grid))
    r = np.arange(R)[:, None, None]
    a = np.arange(q)[None, :, None]  # bin row (y)
    b = np.arange(q)[None, None, :]  # bin column (x)
    for vi, wv in ((v0, 1 - fv), (v1, fv)):
        for ui, wu in ((u0, 1 - fu), (u1, fu)):
            cell = vi[:, :, None] * grid + ui[:, None, :]
            np.add.at(M, (r, a, b, cell), wv[:, :, None] * wu[:, None, :])
    return M.reshape(R * q * q, grid * grid)


def roi_pool_batch(fmap: Tensor, boxes: np.ndarray, image_size, q: int) -> Tensor:
    """Pool every box to a flattened q*q*D vector; returns R x (q*q*D)."""
    g, g2, D = fmap.shape
    boxes = as_boxes(boxes)
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    outside = (boxes[:, 2] <= 0) | (boxes[:, 0] >= W) | (boxes[:, 3] <= 0) | (boxes[:, 1] >= H)
    if np.any(outside):
        raise GeometryError("roi_pool: box does not overlap the image")
    M = T.Tensor(roi_sampling_matrix(boxes, g, image_size, q), dtype=fmap.dtype)
    pooled = T.matmul(M, T.reshape(fmap, (g * g2, D)))
    return T.reshape(pooled, (len(boxes), q * q * D))


def roi_pool(fmap: Tensor, box: BBox, image_size, q: int = 7) -> Tensor:
    """Pool one box to a q x q x D tensor."""
    return T.reshape(roi_pool_batch(fmap, as_boxes(box), image_size, q), (q, q, fmap.shape[2]))


class DetectionHead(Module):
    """Two shared fully connected layers, then class logits (K+1, background
    last) and per-class box deltas (4K)."""

    def __init__(self, in_dim: int, cfg: HeadConfig, rng: np.random.Generator):
        K, Hd = cfg.num_classes, cfg.hidden_dim
        self.cfg = cfg
        self.w_fc1 = param(rng.standard_normal((in_dim, Hd)) * math.sqrt(2.0 / in_dim))
        self.b_fc1 = zeros_param(Hd)
        self.w_fc2 = param(rng.standard_normal((Hd, Hd)) * math.sqrt(2.0 / Hd))
        self.b_fc2 = zeros_param(Hd)
        self.w_cls = param(rng.standard_normal((Hd, K + 1)) * 0.01)
        self.b_cls = zeros_param(K + 1)
        self.w_box = param(rng.standard_normal((Hd, 4 * K)) * 0.001)
        self.b_box = zeros_param(4 * K)

    def __call__(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        h = T.relu(T.linear(roi_feats, self.w_fc1, self.b_fc1))
        h = T.relu(T.linear(h, self.w_fc2, self.b_fc2))
        return T.linear(h, self.w_cls, self.b_cls), T.linear(h, self.w_box, self.b_box)


def detection_head(roi_feats: Tensor, head: DetectionHead) -> tuple[Tensor, Tensor]:
    return head(roi_feats)


def postprocess(
    rois: np.ndarray,
    class_logits: np.ndarray,
    box_deltas: np.ndarray,
    cfg: HeadConfig,
    image_size,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Turn head outputs into final detections.

    Every (roi, foreground class) pair becomes a candidate box decoded from the
    class's delta slice and scored by its softmax probability. Candidates at or
    below ``score_threshold`` or degenerate after clipping are dropped, then
    per-class NMS and the ``max_detections`` cap apply. Returns
    ``(boxes, scores, class_ids)`` in descending score order.
    """
    K = cfg.num_classes
    logits = np.asarray(class_logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    R = len(rois)
    deltas = np.asarray(box_deltas, dtype=np.float64).reshape(R, K, 4) / np.asarray(cfg.box_weights)
    boxes = decode_boxes(np.repeat(rois, K, axis=0), deltas.reshape(-1, 4))
    boxes = clip_boxes(boxes, image_size)
    scores = probs[:, :K].reshape(-1)
    labels = np.tile(np.arange(K), R)
    keep = np.flatnonzero((scores > cfg.score_threshold) & valid_mask(boxes))
    boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
    kept = batched_nms(boxes, scores, labels, cfg.nms_iou)[: cfg.max_detections]
    return boxes[kept], scores[kept], labels[kept]
