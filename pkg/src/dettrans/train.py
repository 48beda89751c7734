"""Losses, anchor/ROI sampling, Adam and the two-phase training schedule.

Phase 1 trains backbone + RPN on the RPN loss. Phase 2 freezes both and
trains only the detection head on proposals from the frozen RPN.

All randomness (data order, flips, anchor and ROI sampling) is drawn from
generators seeded by ``(seed, phase, iteration)`` or ``(seed, epoch)``, so a
run resumed at any iteration continues exactly as an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .boxes import encode_boxes, iou_matrix
from .data import DatasetManifest, ImageSample, hflip, normalize
from .model import DetTransNet
from .tensor import NumericalError, Tensor, no_grad

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainSchedule:
    phase1_iters: int = 2000
    phase2_iters: int = 2000
    batch_size: int = 2
    rois_per_image: int = 64
    seed: int = 0
    lr: float = 0.001
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_iters: int = 100
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    roi_pos_fraction: float = 0.25
    hflip: bool = True

    def __post_init__(self):
        if self.rois_per_image <= 0:
            raise ValueError(f"rois_per_image must be positive, got {self.rois_per_image}")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters


# ------------------------------------------------------------------ labels
def assign_anchor_labels(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Label anchors 1 (object), 0 (background) or -1 (ignored).

    Positive: IoU >= ``pos_iou`` with some ground-truth box, or the best anchor
    for some box (all anchors tied at that maximum). Negative: max IoU <=
    ``neg_iou``. Returns ``(labels, matched_gt_index)``.
    """
    labels = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.intp)
    ious = iou_matrix(anchors, gt_boxes)
    matched = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    gt_best = ious.max(axis=0)
    for j in np.flatnonzero(gt_best > 0):
        winners = np.flatnonzero(ious[:, j] == gt_best[j])
        labels[winners] = 1
        matched[winners] = j
    return labels, matched


def sample_labels(labels: np.ndarray, batch: int, pos_fraction: float, rng: np.random.Generator):
    """Subsample positives (at most ``batch * pos_fraction``) and fill with negatives.

    Returns sorted indices of positives and negatives.
    """
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    if n_pos < len(pos):
        pos = np.sort(rng.choice(pos, n_pos, replace=False))
    if n_neg < len(neg):
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    return pos, neg


# ------------------------------------------------------------------- losses
def rpn_loss(
    objectness_logits: Tensor,
    deltas: Tensor,
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    rng: np.random.Generator | None = None,
    batch: int = 256,
    pos_fraction: float = 0.5,
    beta: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """BCE over sampled anchors + smooth-L1 on positive-anchor deltas, both
    summed and divided by the number of sampled anchors."""
    rng = rng if rng is not None else np.random.default_rng(0)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels, matched = assign_anchor_labels(anchors, gt_boxes)
    pos, neg = sample_labels(labels, batch, pos_fraction, rng)
    sampled = np.concatenate([pos, neg])
    n = max(len(sampled), 1)
    logits = T.take(T.reshape(objectness_logits, (-1,)), sampled)
    targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    cls = T.sum_(T.bce_with_logits(logits, targets)) * (1.0 / n)
    if len(pos):
        pred = T.take(T.reshape(deltas, (-1, 4)), pos, axis=0)
        reg_targets = encode_boxes(anchors[pos], gt_boxes[matched[pos]])
        reg = T.sum_(T.smooth_l1(pred, reg_targets, beta)) * (1.0 / n)
    else:
        reg = Tensor(0.0, dtype=objectness_logits.dtype)
    loss = cls + reg
    return loss, {"rpn_cls": float(cls.data), "rpn_reg": float(reg.data)}


@dataclass
class RoiSample:
    boxes: np.ndarray  # R x 4
    labels: np.ndarray  # R, background == num_classes
    matched_gt: np.ndarray  # R, index into gt boxes (meaningful for positives)

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels < self.num_classes)

    num_classes: int = 0


def sample_rois(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    num_classes: int,
    rois_per_image: int = 64,
    pos_fraction: float = 0.25,
    fg_iou: float = 0.5,
    rng: np.random.Generator | None = None,
) -> RoiSample:
    """Sample ROIs at up to 1:3 positive:negative from proposals plus the GT boxes.

    A candidate is positive (label = its matched GT's class) iff its best IoU
    with a GT box is >= ``fg_iou``; otherwise it is background (label K).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cands = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt_boxes])
    if len(gt_boxes):
        ious = iou_matrix(cands, gt_boxes)
        matched, best = ious.argmax(axis=1), ious.max(axis=1)
    else:
        matched, best = np.zeros(len(cands), dtype=np.intp), np.zeros(len(cands))
    is_fg = best >= fg_iou
    labels = np.where(is_fg, 1, 0)
    pos, neg = sample_labels(labels, rois_per_image, pos_fraction, rng)
    keep = np.concatenate([pos, neg])
    cls = np.full(len(keep), num_classes, dtype=np.int64)
    if len(pos):
        cls[: len(pos)] = np.asarray(gt_classes)[matched[pos]]
    return RoiSample(cands[keep], cls, matched[keep], num_classes)


def roi_loss(
    class_logits: Tensor,
    box_deltas: Tensor,
    rois: RoiSample,
    gt_boxes: np.ndarray,
    beta: float = 1.0,
    box_weights=(1.0, 1.0, 1.0, 1.0),
) -> tuple[Tensor, dict[str, float]]:
    """Mean cross-entropy over K+1 classes plus smooth-L1 on each positive ROI's
    ground-truth-class delta slice (summed, divided by the ROI count).

    Regression targets are ``encode_boxes(roi, gt) * box_weights``.
    """
    R, C = class_logits.shape
    K = C - 1
    if box_deltas.shape != (R, 4 * K):
        raise T.ShapeError(f"roi_loss: deltas {box_deltas.shape} do not match logits {class_logits.shape}")
    n = max(R, 1)
    logp = T.reshape(T.log_softmax(class_logits, axis=1), (-1,))
    picked = T.take(logp, np.arange(R) * C + rois.labels)
    cls = T.sum_(picked) * (-1.0 / n)
    pos = rois.positive
    if len(pos):
        lab = rois.labels[pos]
        flat_idx = (pos[:, None] * 4 * K + 4 * lab[:, None] + np.arange(4)[None, :]).reshape(-1)
        pred = T.reshape(T.take(T.reshape(box_deltas, (-1,)), flat_idx), (len(pos), 4))
        targets = encode_boxes(rois.boxes[pos], np.asarray(gt_boxes, dtype=np.float64)[rois.matched_gt[pos]])
        targets = targets * np.asarray(box_weights, dtype=np.float64)
        reg = T.sum_(T.smooth_l1(pred, targets, beta)) * (1.0 / n)
    else:
        reg = Tensor(0.0, dtype=class_logits.dtype)
    return cls + reg, {"roi_cls": float(cls.data), "roi_reg": float(reg.data)}


# ---------------------------------------------------------------- optimiser
@dataclass
class OptimizerState:
    lr: float = 0.001
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Iterable[tuple[str, Tensor]], lr: float | None = None) -> None:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Parameters without a gradient are treated as having zero gradient.
    """
    params = list(params)
    grads = {}
    for name, p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    t = state.step + 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    staged = []
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in params:
            g = grads[name] + state.weight_decay * p.data if state.weight_decay else grads[name]
            m = state.m.get(name, 0.0) * b1 + (1.0 - b1) * g
            v = state.v.get(name, 0.0) * b2 + (1.0 - b2) * g * g
            new = p.data - (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
                raise TrainingError(f"Adam update overflowed for parameter {name!r}")
            staged.append((name, p, m.astype(p.dtype), v.astype(p.dtype), new.astype(p.dtype)))
    # commit only once every parameter's update is known to be finite
    for name, p, m, v, new in staged:
        state.m[name], state.v[name], p.data = m, v, new
    state.step = t


# ------------------------------------------------------------------ training
@dataclass
class LossRecord:
    iteration: int
    phase: int
    loss: float
    components: dict[str, float]


CSV_COMPONENTS = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg")


def records_to_csv(records: list[LossRecord]) -> str:
    lines = ["iteration,phase,loss," + ",".join(CSV_COMPONENTS)]
    for r in records:
        comps = ",".join(repr(float(r.components.get(k, 0.0))) for k in CSV_COMPONENTS)
        lines.append(f"{r.iteration},{r.phase},{float(r.loss)!r},{comps}")
    return "\n".join(lines) + "\n"


class Trainer:
    """Stateful two-phase trainer; ``iteration`` counts completed steps across phases."""

    def __init__(self, model: DetTransNet, data: DatasetManifest, schedule: TrainSchedule):
        if len(data) == 0:
            raise ValueError("training set is empty")
        self.model = model
        self.data = data
        self.schedule = schedule
        self.iteration = 0
        self.opt = {1: self._new_state(), 2: self._new_state()}
        self.records: list[LossRecord] = []
        self._cache: dict[tuple[int, bool], tuple[Tensor, np.ndarray]] = {}

    def _new_state(self) -> OptimizerState:
        s = self.schedule
        return OptimizerState(s.lr, s.weight_decay, s.beta1, s.beta2, s.eps)

    @property
    def phase(self) -> int:
        return 1 if self.iteration < self.schedule.phase1_iters else 2

    @property
    def done(self) -> bool:
        return self.iteration >= self.schedule.total_iters

    def batch_indices(self, iteration: int) -> list[int]:
        """Images for a global iteration: consecutive slices of per-epoch permutations."""
        n, b = len(self.data), self.schedule.batch_size
        out = []
        for k in range(iteration * b, iteration * b + b):
            epoch, pos = divmod(k, n)
            perm = np.random.default_rng([self.schedule.seed, 7, epoch]).permutation(n)
            out.append(int(perm[pos]))
        return out

    def _sample(self, idx: int, flip: bool) -> ImageSample:
        s = self.data.samples[idx]
        return hflip(s) if flip else s

    def _lr(self, phase_step: int) -> float:
        w = self.schedule.warmup_iters
        return self.schedule.lr * min(1.0, (phase_step + 1) / w) if w > 0 else self.schedule.lr

    def step(self) -> LossRecord:
        if self.done:
            raise RuntimeError("training schedule already complete")
        it, phase, sch = self.iteration, self.phase, self.schedule
        rng = np.random.default_rng([sch.seed, phase, it])
        indices = self.batch_indices(it)
        flips = [bool(f) for f in rng.random(len(indices)) < 0.5] if sch.hflip else [False] * len(indices)
        params = self.model.phase1_parameters() if phase == 1 else self.model.phase2_parameters()
        for _, p in params:
            p.zero_grad()
        total, comps = 0.0, {}
        scale = 1.0 / len(indices)
        try:
            for idx, flip in zip(indices, flips):
                sample = self._sample(idx, flip)
                if phase == 1:
                    loss, parts = self._phase1_loss(sample, rng)
                else:
                    loss, parts = self._phase2_loss(idx, flip, sample, rng)
                (loss * scale).backward()
                total += float(loss.data) * scale
                for k, v in parts.items():
                    comps[k] = comps.get(k, 0.0) + v * scale
            if not math.isfinite(total):
                raise NumericalError("loss is not finite")
            phase_step = it if phase == 1 else it - sch.phase1_iters
            adam_step(self.opt[phase], params, lr=self._lr(phase_step))
        except (NumericalError, TrainingError) as exc:
            raise TrainingError(f"non-finite value at iteration {it} (phase {phase}): {exc}") from exc
        record = LossRecord(it, phase, total, comps)
        self.records.append(record)
        self.iteration += 1
        return record

    def _phase1_loss(self, sample: ImageSample, rng):
        fmap = self.model.features(Tensor(normalize(sample.image)))
        obj, deltas = self.model.rpn(fmap)
        return rpn_loss(
            obj, deltas, self.model.anchors, sample.boxes, rng,
            self.schedule.rpn_batch, self.schedule.rpn_pos_fraction,
        )

    def _frozen_features(self, idx: int, flip: bool, sample: ImageSample):
        key = (idx, flip)
        if key not in self._cache:
            with no_grad():
                fmap = self.model.features(Tensor(normalize(sample.image)))
                rois, _ = self.model.proposals(fmap)
            self._cache[key] = (fmap, rois)
        return self._cache[key]

    def _phase2_loss(self, idx: int, flip: bool, sample: ImageSample, rng):
        fmap, rois = self._frozen_features(idx, flip, sample)
        roi_sample = sample_rois(
            rois, sample.boxes, sample.classes, self.model.cfg.head.num_classes,
            self.schedule.rois_per_image, self.schedule.roi_pos_fraction, rng=rng,
        )
        logits, deltas = self.model.roi_head(fmap, roi_sample.boxes)
        return roi_loss(logits, deltas, roi_sample, sample.boxes, box_weights=self.model.cfg.head.box_weights)

    def run(self, until: int | None = None, callback: Callable[[LossRecord], None] | None = None) -> list[LossRecord]:
        until = self.schedule.total_iters if until is None else min(until, self.schedule.total_iters)
        while self.iteration < until:
            if self.iteration == self.schedule.phase1_iters:
                self._cache.clear()
            rec = self.step()
            if callback is not None:
                callback(rec)
        return self.records


def train_two_phase(
    model: DetTransNet,
    data: DatasetManifest,
    schedule: TrainSchedule,
    callback: Callable[[LossRecord], None] | None = None,
) -> tuple[DetTransNet, list[LossRecord]]:
    trainer = Trainer(model, data, schedule)
    trainer.run(callback=callback)
    return model, trainer.records
