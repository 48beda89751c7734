"""Box geometry: corner-form boxes, anchors, delta encoding, IoU and NMS.

Box arrays are ``(N, 4)`` float64 in ``(x_min, y_min, x_max, y_max)`` pixel
coordinates. All orderings that involve ties fall back to input index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# exp() guard for width/height deltas, as in the usual Faster R-CNN decoders
MAX_LOG_SCALE = math.log(1000.0 / 16)


class GeometryError(ValueError):
    """A box is degenerate where a valid box is required."""


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_array(cls, a) -> BBox:
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


@dataclass(frozen=True)
class AnchorSpec:
    scales: tuple[float, ...] = (8.0, 16.0, 24.0)
    aspect_ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        if not self.scales or min(self.scales) <= 0:
            raise ValueError(f"anchor scales must be positive, got {self.scales}")
        if not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise ValueError(f"anchor aspect ratios must be positive, got {self.aspect_ratios}")

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


def as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, BBox):
        return np.array([boxes.as_tuple()], dtype=np.float64)
    if len(boxes) and isinstance(boxes[0], BBox):
        return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def generate_anchors(grid: int, image_size, spec: AnchorSpec) -> np.ndarray:
    """``grid * grid * A`` anchors ordered (row i, column j, anchor a).

    Cell ``(i, j)`` is centred at ``((j + 0.5) * W / grid, (i + 0.5) * H / grid)``;
    an anchor of scale ``s`` and ratio ``r = w / h`` has ``w = s * sqrt(r)``,
    ``h = s / sqrt(r)``. Anchors may extend past the image.
    """
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    sizes = np.array(
        [(s * math.sqrt(r), s / math.sqrt(r)) for s in spec.scales for r in spec.aspect_ratios]
    )
    cy = (np.arange(grid) + 0.5) * (H / grid)
    cx = (np.arange(grid) + 0.5) * (W / grid)
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
    half = sizes.reshape(1, -1, 2) / 2
    anchors = np.concatenate([centers - half, centers + half], axis=-1)
    return anchors.reshape(-1, 4)


def _center_form(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Regression targets ``(tx, ty, tw, th)`` taking each anchor to its paired box."""
    anchors, gts = as_boxes(anchors), as_boxes(gts)
    acx, acy, aw, ah = _center_form(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("encode: anchor with non-positive width or height")
    gcx, gcy, gw, gh = _center_form(gts)
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise GeometryError("encode: target box with non-positive width or height")
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes` (no clipping)."""
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _center_form(anchors)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, image_size) -> np.ndarray:
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    out = boxes.copy()
    out[:, [0, 2]] = out[:, [0, 2]].clip(0, W)
    out[:, [1, 3]] = out[:, [1, 3]].clip(0, H)
    return out


def valid_mask(boxes: np.ndarray, min_size: float = 0.0) -> np.ndarray:
    return ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)


def encode_box(anchor: BBox, gt: BBox) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(anchor, gt)[0])


def decode_box(anchor: BBox, deltas: Sequence[float], image_size=None) -> BBox | None:
    """Decode one box; clip when ``image_size`` is given. Degenerate results give ``None``."""
    box = decode_boxes(anchor, deltas)
    if image_size is not None:
        box = clip_boxes(box, image_size)
    if not valid_mask(box)[0]:
        return None
    return BBox.from_array(box[0])


def iou_matrix(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a, b)[0, 0])


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept input indices in descending score order.

    A box is suppressed when its IoU with an already-kept box is strictly
    greater than ``iou_threshold``.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    order = score_order(scores)
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.intp)


def batched_nms(boxes, scores, labels, iou_threshold: float) -> np.ndarray:
    """NMS run independently per label; merged result in descending score order."""
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    keep = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        keep.extend(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    keep = np.asarray(keep, dtype=np.intp)
    return keep[score_order(scores[keep])] if len(keep) else keep


def to_proposals(boxes: np.ndarray, scores: np.ndarray) -> list[Proposal]:
    return [Proposal(BBox.from_array(b), float(s)) for b, s in zip(boxes, scores)]
