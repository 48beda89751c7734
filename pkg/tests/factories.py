"""Small model and dataset builders shared across test modules."""

import numpy as np

from dettrans.backbone import EncoderConfig, PatchConfig
from dettrans.boxes import AnchorSpec, iou_matrix
from dettrans.data import DatasetManifest, ImageSample
from dettrans.detector import HeadConfig, RPNConfig
from dettrans.model import ModelConfig


def tiny_config(image=32, patch=8, overlap=4, dim=16, depth=1, heads=2, blocks=1, classes=3) -> ModelConfig:
    return ModelConfig(
        patch=PatchConfig(image, image, 3, patch, overlap),
        encoder=EncoderConfig(dim, depth, heads),
        rpn=RPNConfig(hidden_dim=dim, anchor_spec=AnchorSpec((6.0, 12.0)), pre_nms_top=50, post_nms_top=20),
        head=HeadConfig(num_classes=classes, pool_size=3, hidden_dim=16),
        residual_blocks=blocks,
    )


def desk_config() -> ModelConfig:
    return ModelConfig(
        patch=PatchConfig(96, 96, 3, 16, 8),
        encoder=EncoderConfig(64, 4, 4),
        rpn=RPNConfig(),
        head=HeadConfig(),
        residual_blocks=2,
    )


def random_boxes(rng, n, extent=10.0, min_side=0.5):
    xy = rng.uniform(0, extent - min_side, size=(n, 2))
    wh = rng.uniform(min_side, extent, size=(n, 2))
    far = np.minimum(xy + wh, extent)
    return np.concatenate([xy, far], axis=1)


def small_boxes(rng, n, extent=40.0):
    xy = rng.uniform(0, extent - 12, (n, 2))
    wh = rng.uniform(4, 12, (n, 2))
    return np.concatenate([xy, xy + wh], 1)


def toy_manifest(boxes_per_image, classes_per_image, names=("a", "b")):
    samples = [
        ImageSample(np.zeros((100, 100, 3), np.uint8), b, c, image_id=i + 1)
        for i, (b, c) in enumerate(zip(boxes_per_image, classes_per_image))
    ]
    return DatasetManifest(samples, list(names))


def random_dataset(rng, n_images=3, n_classes=2):
    """GT plus jittered copies and a few strays, on 100 x 100 images."""
    boxes, classes, dets = [], [], {}
    for i in range(n_images):
        g = small_boxes(rng, int(rng.integers(1, 5)), extent=100.0) * rng.uniform(0.5, 3)
        g = np.clip(g, 0, 100)
        c = rng.integers(0, n_classes, len(g))
        boxes.append(g)
        classes.append(c)
        jitter = g + rng.normal(0, 2.0, g.shape)
        jitter[:, 2:] = np.maximum(jitter[:, 2:], jitter[:, :2] + 1)
        extra = small_boxes(rng, int(rng.integers(0, 4)), extent=100.0)
        db = np.concatenate([jitter, extra])
        dc = np.concatenate([c, rng.integers(0, n_classes, len(extra))])
        dets[i + 1] = (db, rng.random(len(db)), dc)
    return toy_manifest(boxes, classes), dets


def with_extra_fp(manifest, dets, image_id=1):
    """Copy of ``dets`` with one lowest-scored box that overlaps no GT at IoU >= 0.5."""
    b, s, c = dets[image_id]
    gt = manifest.by_id()[image_id].boxes
    spots = [np.array([[x, y, x + 9.0, y + 9.0]]) for x in range(0, 91, 10) for y in range(0, 91, 10)]
    fp = next(f for f in spots if iou_matrix(f, gt).max() < 0.5)
    out = dict(dets)
    out[image_id] = (np.concatenate([b, fp]), np.concatenate([s, [s.min(initial=0.0) - 1.0]]), np.concatenate([c, [0]]))
    return out
