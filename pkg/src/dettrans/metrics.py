"""COCO-style detection evaluation: greedy matching and 101-point AP.

Size buckets follow the COCO convention on box area in pixels of the evaluated
image: small < 32^2, medium in [32^2, 96^2], large > 96^2. Within a bucket,
ground truth outside the range is ignored: detections matched to an ignored
box count as neither TP nor FP, and unmatched detections whose own area is
out of range are likewise ignored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .boxes import Detection, area, as_boxes, iou_matrix, score_order
from .data import DatasetManifest

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# recall grid k/100; the exact evaluator compares tp * 100 >= k * n_gt in integers
RECALL_POINTS = np.arange(101) / 100
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, math.inf),
}


class EvaluationError(ValueError):
    pass


def in_bucket(areas: np.ndarray, bucket: str) -> np.ndarray:
    lo, hi = AREA_RANGES[bucket]
    if bucket == "all":
        return np.ones(len(areas), dtype=bool)
    if bucket == "small":
        return areas < hi
    if bucket == "medium":
        return (areas >= lo) & (areas <= hi)
    return areas > lo


def match_image(
    det_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    iou_thresh: float,
    gt_ignore: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching of score-sorted detections against one class's GT in one image.

    Each detection takes the highest-IoU unmatched GT with IoU >= ``iou_thresh``,
    preferring non-ignored GT. Returns ``(matched_gt, matched_ignored)`` where
    ``matched_gt`` is -1 for unmatched detections.
    """
    det_boxes, gt_boxes = as_boxes(det_boxes), as_boxes(gt_boxes)
    nd, ng = len(det_boxes), len(gt_boxes)
    matched = np.full(nd, -1, dtype=np.intp)
    hit_ignored = np.zeros(nd, dtype=bool)
    if nd == 0 or ng == 0:
        return matched, hit_ignored
    ignore = np.zeros(ng, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(ng, dtype=bool)
    for d in range(nd):
        for pool in (~ignore, ignore):
            cand = np.flatnonzero(pool & ~taken & (ious[d] >= iou_thresh))
            if len(cand):
                # highest IoU; ties to the lowest GT index
                g = cand[np.argmax(ious[d, cand])]
                taken[g] = True
                matched[d] = g
                hit_ignored[d] = ignore[g]
                break
    return matched, hit_ignored


def match_detections(dets: list[Detection], gts: list[tuple], iou_thresh: float) -> list[bool]:
    """TP flags for ``dets`` (already sorted by descending score), matched per class.

    ``gts`` holds ``(box, class_id)`` pairs.
    """
    flags = [False] * len(dets)
    classes = {d.class_id for d in dets}
    for c in classes:
        di = [i for i, d in enumerate(dets) if d.class_id == c]
        gb = [g[0] for g in gts if int(g[1]) == c]
        if not gb:
            continue
        matched, _ = match_image(as_boxes([dets[i].box for i in di]), as_boxes(gb), iou_thresh)
        for i, m in zip(di, matched):
            flags[i] = bool(m >= 0)
    return flags


def exact_average_precision(flags, scores, n_gt: int) -> Fraction | None:
    """101-point interpolated AP as an exact rational.

    Precision and recall are ratios of integer counts, so the whole computation
    stays in integers and fractions; rounding happens once, at the very end.
    """
    if n_gt == 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if len(flags) == 0:
        return Fraction(0)
    order = score_order(np.asarray(scores, dtype=np.float64))
    tp = np.cumsum(flags[order]).tolist()
    n = len(tp)
    envelope = [Fraction(0)] * n
    best = Fraction(0)
    for i in range(n - 1, -1, -1):
        best = max(best, Fraction(tp[i], i + 1))
        envelope[i] = best
    total, i = Fraction(0), 0
    for k in range(len(RECALL_POINTS)):
        # first rank whose recall tp/n_gt reaches k/100
        while i < n and tp[i] * 100 < k * n_gt:
            i += 1
        if i == n:
            break
        total += envelope[i]
    return total / len(RECALL_POINTS)


def average_precision(flags, scores, n_gt: int) -> float | None:
    """101-point interpolated AP of a ranked TP/FP list; ``None`` when ``n_gt == 0``."""
    ap = exact_average_precision(flags, scores, n_gt)
    return None if ap is None else float(ap)


@dataclass
class EvalResult:
    ap: float | None
    ap50: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_class: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "per_class": dict(sorted(self.per_class.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> EvalResult:
        return cls(d["ap"], d["ap50"], d["ap_small"], d["ap_medium"], d["ap_large"], dict(d.get("per_class", {})))


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(sum(vals, Fraction(0)) / len(vals)) if vals else None


@dataclass
class _ImageDets:
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray


def _normalise_dets(dets) -> _ImageDets:
    if isinstance(dets, _ImageDets):
        return dets
    if isinstance(dets, (list, tuple)) and (len(dets) == 0 or isinstance(dets[0], Detection)):
        return _ImageDets(
            as_boxes([d.box for d in dets]) if dets else np.zeros((0, 4)),
            np.array([d.score for d in dets], dtype=np.float64),
            np.array([d.class_id for d in dets], dtype=np.int64),
        )
    boxes, scores, classes = dets
    return _ImageDets(as_boxes(boxes), np.asarray(scores, dtype=np.float64), np.asarray(classes, dtype=np.int64))


def class_pr(
    dets_by_image: dict,
    gts_by_image: dict,
    cls: int,
    iou_thresh: float,
    bucket: str = "all",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Pooled TP flags, scores and GT count for one class, threshold and bucket.

    Ignored detections are removed from the returned lists.
    """
    flags, scores, keys = [], [], []
    n_gt = 0
    for image_id in sorted(gts_by_image):
        gb_all, gc_all = gts_by_image[image_id]
        gb = gb_all[gc_all == cls]
        g_ignore = ~in_bucket(area(gb), bucket)
        n_gt += int((~g_ignore).sum())
        d = dets_by_image.get(image_id)
        if d is None:
            continue
        sel = np.flatnonzero(d.classes == cls)
        sel = sel[score_order(d.scores[sel])]
        db, ds = d.boxes[sel], d.scores[sel]
        matched, hit_ignored = match_image(db, gb, iou_thresh, g_ignore)
        d_out = ~in_bucket(area(db), bucket)
        drop = hit_ignored | ((matched < 0) & d_out)
        for k in np.flatnonzero(~drop):
            flags.append(matched[k] >= 0)
            scores.append(ds[k])
            keys.append((image_id, int(sel[k])))
    if scores:
        # rank by score, ties by (image id, detection index) so image order is irrelevant
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i]))
        flags = [flags[i] for i in order]
        scores = [scores[i] for i in order]
    return np.asarray(flags, dtype=bool), np.asarray(scores, dtype=np.float64), n_gt


def evaluate(
    dets_by_image: dict,
    manifest: DatasetManifest,
    max_detections: int = 100,
    iou_thresholds=IOU_THRESHOLDS,
) -> EvalResult:
    """COCO-style AP over classes and IoU thresholds 0.50:0.05:0.95.

    ``dets_by_image`` maps image id to either a list of :class:`Detection` or a
    ``(boxes, scores, class_ids)`` triple. Each image keeps its top
    ``max_detections`` by score.
    """
    known = {s.image_id for s in manifest.samples}
    unknown = sorted(set(dets_by_image) - known)
    if unknown:
        raise EvaluationError(f"detections reference unknown image ids {unknown}")
    dets = {}
    for image_id, d in dets_by_image.items():
        d = _normalise_dets(d)
        top = score_order(d.scores)[:max_detections]
        dets[image_id] = _ImageDets(d.boxes[top], d.scores[top], d.classes[top])
    gts = {s.image_id: (s.boxes, s.classes) for s in manifest.samples}

    table: dict[tuple[str, int, float], Fraction | None] = {}
    for bucket in AREA_RANGES:
        for c in range(manifest.num_classes):
            for t in iou_thresholds:
                flags, scores, n_gt = class_pr(dets, gts, c, t, bucket)
                table[bucket, c, t] = exact_average_precision(flags, scores, n_gt)

    def bucket_ap(bucket, thresholds=iou_thresholds):
        return _mean(table[bucket, c, t] for c in range(manifest.num_classes) for t in thresholds)

    per_class = {
        name: _mean(table["all", c, t] for t in iou_thresholds) for c, name in enumerate(manifest.class_names)
    }
    return EvalResult(
        ap=bucket_ap("all"),
        ap50=bucket_ap("all", (iou_thresholds[0],)),
        ap_small=bucket_ap("small"),
        ap_medium=bucket_ap("medium"),
        ap_large=bucket_ap("large"),
        per_class=per_class,
    )


def load_detections_json(path, manifest: DatasetManifest) -> dict[int, _ImageDets]:
    """Read a COCO results list (``image_id, category_id, bbox [x, y, w, h], score``)."""
    try:
        rows = json.loads(open(path).read())
        cat_index = {cid: i for i, cid in enumerate(manifest.category_ids)}
        grouped: dict[int, list] = {}
        for r in rows:
            x, y, w, h = (float(v) for v in r["bbox"])
            grouped.setdefault(int(r["image_id"]), []).append(
                ((x, y, x + w, y + h), float(r["score"]), cat_index[int(r["category_id"])])
            )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise EvaluationError(f"cannot read detections {path}: {exc!r}") from exc
    return {
        k: _ImageDets(as_boxes([v[0] for v in vs]), np.array([v[1] for v in vs]), np.array([v[2] for v in vs]))
        for k, vs in grouped.items()
    }
