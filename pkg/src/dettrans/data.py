"""Datasets: synthetic shapes, COCO-format ingestion, image IO and resizing."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("rectangle", "ellipse", "triangle")


class DataLoadError(ValueError):
    """A dataset file is malformed or references something that does not exist."""


@dataclass
class ImageSample:
    """One image with its ground truth.

    ``image`` holds raw 0..255 values (H x W x C, uint8); ``boxes`` are corner
    form pixel coordinates (N x 4) and ``classes`` dense ids in ``[0, K)``.
    """

    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    image_id: int = 0
    file_name: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.classes)} class ids")

    @property
    def source_id(self) -> str:
        return self.file_name or str(self.image_id)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def pixels(self) -> Tensor:
        return Tensor(normalize(self.image))

    def annotations(self) -> list[tuple[tuple[float, ...], int]]:
        return [(tuple(float(v) for v in b), int(c)) for b, c in zip(self.boxes, self.classes)]


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    class_names: list[str]
    split: str = "train"
    category_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"split must be train, val or test, got {self.split!r}")
        if not self.category_ids:
            self.category_ids = list(range(1, len(self.class_names) + 1))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[int, ImageSample]:
        return {s.image_id: s for s in self.samples}


def normalize(image: np.ndarray) -> np.ndarray:
    """Map 0..255 to [-1, 1] per channel: ``(x / 255 - 0.5) / 0.5``."""
    return ((np.asarray(image, dtype=np.float32) / 255.0 - 0.5) / 0.5).astype(np.float32)


# ---------------------------------------------------------------- synthetic
def _draw_shape(img: np.ndarray, kind: int, box, color) -> None:
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[y0:y1, x0:x1]
    cx, cy = xs + 0.5, ys + 0.5  # pixel centres
    if kind == 0:
        mask = np.ones_like(cx, dtype=bool)
    elif kind == 1:
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        mask = ((cx - (x0 + rx)) / rx) ** 2 + ((cy - (y0 + ry)) / ry) ** 2 <= 1.0
    else:
        # apex at top centre, base along the bottom edge. Row widths are taken
        # at each row's lower edge and the apex row keeps its centre pixel(s),
        # so the shape touches all four sides of its box.
        half_w = np.maximum((x1 - x0) / 2 * (cy + 0.5 - y0) / (y1 - y0), 0.5)
        mask = np.abs(cx - (x0 + x1) / 2) <= half_w
    region = img[y0:y1, x0:x1]
    region[mask] = color


def generate_synthetic(
    count: int,
    image_size: int = 96,
    seed: int = 0,
    min_extent: int | None = None,
    max_extent: int | None = None,
    max_objects: int = 3,
    split: str = "train",
) -> DatasetManifest:
    """Uniform-background images holding 1 to ``max_objects`` non-overlapping
    filled rectangles, ellipses or triangles with exact integer boxes.

    Object sides default to 1/8..3/8 of the image side (12..36 px at 96), never below 8.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if min_extent is None:
        min_extent = max(8, image_size // 8)
    if max_extent is None:
        max_extent = max(min_extent, image_size * 3 // 8)
    if min_extent < 8 or max_extent > image_size:
        raise ValueError("object extents must lie in [8, image_size]")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(count):
        background = rng.integers(0, 256, size=3)
        img = np.empty((image_size, image_size, 3), dtype=np.uint8)
        img[:] = background
        boxes, classes = [], []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(50):
                w, h = rng.integers(min_extent, max_extent + 1, size=2)
                x0 = int(rng.integers(0, image_size - w + 1))
                y0 = int(rng.integers(0, image_size - h + 1))
                box = (x0, y0, x0 + int(w), y0 + int(h))
                # keep a 2 px gap so shapes never touch
                if all(
                    box[0] >= b[2] + 2 or b[0] >= box[2] + 2 or box[1] >= b[3] + 2 or b[1] >= box[3] + 2
                    for b in boxes
                ):
                    break
            else:
                continue
            kind = int(rng.integers(0, len(SHAPE_CLASSES)))
            while True:
                color = rng.integers(0, 256, size=3)
                if np.abs(color - background).sum() >= 180:
                    break
            _draw_shape(img, kind, box, color.astype(np.uint8))
            boxes.append(box)
            classes.append(kind)
        samples.append(
            ImageSample(img, np.array(boxes, dtype=np.float64), np.array(classes), idx + 1, f"{idx:05d}.png")
        )
    return DatasetManifest(samples, list(SHAPE_CLASSES), split)


# --------------------------------------------------------------- image IO
def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG or binary PPM (P6) to H x W x 3 uint8."""
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"image file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return _read_ppm(path)
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataLoadError(f"cannot decode image {path}: {exc}") from exc


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    fields, pos = [], 2
    while len(fields) < 3:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace before the raster
    width, height, maxval = fields
    if maxval != 255:
        raise DataLoadError(f"{path}: only 8-bit PPM supported (maxval={maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=pos)
    return data.reshape(height, width, 3).copy()


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    path = Path(path)
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w, _ = image.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + image.tobytes())
        return
    from PIL import Image

    Image.fromarray(image).save(path)


# ------------------------------------------------------------------- COCO
def load_coco_json(annotation_path: str | os.PathLike, image_dir: str | os.PathLike, split: str = "train") -> DatasetManifest:
    """Read the COCO subset: images, annotations (bbox as x, y, w, h), categories.

    Category ids are remapped to dense indices in ascending id order; zero-area
    boxes are dropped with a warning. Other keys are ignored.
    """
    annotation_path, image_dir = Path(annotation_path), Path(image_dir)
    try:
        doc = json.loads(Path(annotation_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataLoadError(f"cannot read annotation file {annotation_path}: {exc}") from exc
    try:
        categories = sorted(doc["categories"], key=lambda c: int(c["id"]))
        cat_index = {int(c["id"]): i for i, c in enumerate(categories)}
        images = doc["images"]
        anns = doc.get("annotations", [])
        per_image: dict[int, list] = {int(im["id"]): [] for im in images}
        for ann in anns:
            img_id, cat_id = int(ann["image_id"]), int(ann["category_id"])
            if img_id not in per_image:
                raise DataLoadError(f"annotation {ann.get('id')} references unknown image id {img_id}")
            if cat_id not in cat_index:
                raise DataLoadError(f"annotation {ann.get('id')} references unknown category id {cat_id}")
            x, y, w, h = (float(v) for v in ann["bbox"])
            per_image[img_id].append((x, y, w, h, cat_index[cat_id]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataLoadError):
            raise
        raise DataLoadError(f"malformed COCO document {annotation_path}: {exc!r}") from exc

    dropped = 0
    samples = []
    for im in images:
        img_id = int(im["id"])
        pixels = read_image(image_dir / im["file_name"])
        if pixels.shape[:2] != (int(im["height"]), int(im["width"])):
            raise DataLoadError(
                f"{im['file_name']}: declared {im['width']}x{im['height']}, decoded {pixels.shape[1]}x{pixels.shape[0]}"
            )
        boxes, classes = [], []
        for x, y, w, h, c in per_image[img_id]:
            if w <= 0 or h <= 0:
                dropped += 1
                continue
            boxes.append((x, y, x + w, y + h))
            classes.append(c)
        samples.append(ImageSample(pixels, np.array(boxes, dtype=np.float64), np.array(classes), img_id, im["file_name"]))
    if dropped:
        logger.warning("dropped %d zero-area boxes from %s", dropped, annotation_path)
    return DatasetManifest(
        samples, [str(c["name"]) for c in categories], split, [int(c["id"]) for c in categories]
    )


def coco_document(manifest: DatasetManifest) -> dict:
    images, anns = [], []
    ann_id = 1
    for s in manifest.samples:
        images.append({"id": s.image_id, "file_name": s.file_name, "width": s.width, "height": s.height})
        for box, cls in zip(s.boxes, s.classes):
            x0, y0, x1, y1 = (float(v) for v in box)
            anns.append({
                "id": ann_id,
                "image_id": s.image_id,
                "category_id": manifest.category_ids[int(cls)],
                "bbox": [x0, y0, x1 - x0, y1 - y0],
            })
            ann_id += 1
    cats = [{"id": cid, "name": name} for cid, name in zip(manifest.category_ids, manifest.class_names)]
    return {"images": images, "annotations": anns, "categories": cats}


def save_coco_json(manifest: DatasetManifest, annotation_path, image_dir=None) -> None:
    """Write annotations (and, when ``image_dir`` is given, the image files)."""
    annotation_path = Path(annotation_path)
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
        for s in manifest.samples:
            write_image(image_dir / s.file_name, s.image)
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    annotation_path.write_text(json.dumps(coco_document(manifest), indent=1) + "\n")


# ----------------------------------------------------------------- resize
def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment; values rounded half-up."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    src = image.astype(np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(image.dtype)


def resize_scale(height: int, width: int, target: int) -> tuple[float, int, int]:
    if target < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    scale = target / min(height, width)
    return scale, round_half_up(height * scale), round_half_up(width * scale)


def resize_shorter_edge(sample: ImageSample, target: int) -> ImageSample:
    """Scale so the shorter edge equals ``target``; boxes scale by the same factor."""
    scale, out_h, out_w = resize_scale(sample.height, sample.width, target)
    if (out_h, out_w) == (sample.height, sample.width) and scale == 1.0:
        return replace(sample, image=sample.image.copy(), boxes=sample.boxes.copy())
    boxes = sample.boxes * scale
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, out_w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, out_h)
    return replace(sample, image=resize_image(sample.image, out_h, out_w), boxes=boxes)


def hflip(sample: ImageSample) -> ImageSample:
    W = sample.width
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = W - sample.boxes[:, [2, 0]]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, ::-1]), boxes=boxes)
