"""
Training data: the synthetic-shapes benchmark and COCO-style annotation
ingestion.

Both sources produce ``ImageSample`` objects with normalized ``BoxCXCYWH``
ground truth. Synthetic datasets can be written out in the COCO layout and read
back through ``load_coco_annotations``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image
from pydantic import ValidationError

from src.models.annotations import (
    BoxCXCYWH,
    CocoAnnotation,
    CocoCategory,
    CocoFile,
    CocoImage,
    GroundTruth,
)
from src.models.detection import ImageSample
from src.models.errors import ConfigError, ParseError
from src.services.tensor import Tensor

logger = logging.getLogger(__name__)

SHAPE_NAMES = (
    "rectangle",
    "disk",
    "triangle",
    "diamond",
    "cross",
    "ring",
    "ellipse",
    "frame",
)

_MAX_PLACEMENT_TRIES = 40

MaskFn = Callable[[np.ndarray, np.ndarray, float, float, float, float], np.ndarray]


# --------------------------------------------------------------------------- #
# Shape rasterization. Each mask function receives pixel-center coordinates
# and the placement box (x0, y0, w, h) in pixels.
# --------------------------------------------------------------------------- #


def _inside(xx, yy, x0, y0, w, h) -> np.ndarray:
    return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)


def _rectangle(xx, yy, x0, y0, w, h):
    return _inside(xx, yy, x0, y0, w, h)


def _ellipse_mask(xx, yy, x0, y0, w, h, scale=1.0):
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    rx, ry = scale * w / 2.0, scale * h / 2.0
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _disk(xx, yy, x0, y0, w, h):
    side = min(w, h)
    return _ellipse_mask(xx, yy, x0, y0, side, side)


def _triangle(xx, yy, x0, y0, w, h):
    cx = x0 + w / 2.0
    depth = (yy - y0) / h
    return _inside(xx, yy, x0, y0, w, h) & (np.abs(xx - cx) <= depth * w / 2.0)


def _diamond(xx, yy, x0, y0, w, h):
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    return np.abs(xx - cx) / (w / 2.0) + np.abs(yy - cy) / (h / 2.0) <= 1.0


def _cross(xx, yy, x0, y0, w, h):
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    bars = (np.abs(xx - cx) <= w / 6.0) | (np.abs(yy - cy) <= h / 6.0)
    return _inside(xx, yy, x0, y0, w, h) & bars


def _ring(xx, yy, x0, y0, w, h):
    side = min(w, h)
    outer = _ellipse_mask(xx, yy, x0, y0, side, side)
    inner = _ellipse_mask(xx, yy, x0, y0, side, side, scale=0.5)
    return outer & ~inner


def _ellipse(xx, yy, x0, y0, w, h):
    return _ellipse_mask(xx, yy, x0, y0, w, h)


def _frame(xx, yy, x0, y0, w, h):
    t = max(2.0, min(w, h) / 5.0)
    inner = _inside(xx, yy, x0 + t, y0 + t, w - 2 * t, h - 2 * t)
    return _inside(xx, yy, x0, y0, w, h) & ~inner


_MASKS: Dict[str, MaskFn] = {
    "rectangle": _rectangle,
    "disk": _disk,
    "triangle": _triangle,
    "diamond": _diamond,
    "cross": _cross,
    "ring": _ring,
    "ellipse": _ellipse,
    "frame": _frame,
}

# Shapes drawn with equal width and height.
_SQUARE = {"disk", "ring"}


def _pixels_to_tensor(image: np.ndarray) -> Tensor:
    """[H, W, 3] in [0, 1] -> Tensor[3, H, W]."""
    return Tensor(np.ascontiguousarray(np.transpose(image, (2, 0, 1))))


def _tight_box(mask: np.ndarray, size: int) -> BoxCXCYWH:
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return BoxCXCYWH.from_pixel_xywh(x0, y0, x1 - x0, y1 - y0, size, size)


def _render_image(
    rng: np.random.Generator,
    image_size: int,
    max_objects: int,
    num_classes: int,
) -> tuple[np.ndarray, List[BoxCXCYWH], List[int]]:
    grid = np.arange(image_size) + 0.5
    xx, yy = np.meshgrid(grid, grid)

    base = rng.uniform(0.0, 0.35, size=3)
    image = base + rng.normal(0.0, 0.05, size=(image_size, image_size, 3))
    occupied = np.zeros((image_size, image_size), dtype=bool)

    boxes: List[BoxCXCYWH] = []
    labels: List[int] = []
    min_side = max(6, image_size // 10)
    max_side = max(min_side + 1, image_size // 2)
    wanted = int(rng.integers(1, max_objects + 1))

    for _ in range(wanted):
        label = int(rng.integers(num_classes))
        kind = SHAPE_NAMES[label]
        color = rng.uniform(0.55, 1.0, size=3)
        for _ in range(_MAX_PLACEMENT_TRIES):
            w = float(rng.integers(min_side, max_side + 1))
            h = w if kind in _SQUARE else float(
                rng.integers(min_side, max_side + 1)
            )
            x0 = float(rng.integers(0, image_size - int(w) + 1))
            y0 = float(rng.integers(0, image_size - int(h) + 1))
            mask = _MASKS[kind](xx, yy, x0, y0, w, h)
            if not mask.any():
                continue
            footprint = _inside(xx, yy, x0 - 1, y0 - 1, w + 2, h + 2)
            if (footprint & occupied).any():
                continue
            occupied |= footprint
            image[mask] = color
            boxes.append(_tight_box(mask, image_size))
            labels.append(label)
            break
    return np.clip(image, 0.0, 1.0), boxes, labels


def generate_shapes(
    seed: int,
    count: int,
    image_size: int = 64,
    max_objects: int = 3,
    num_classes: int = 3,
) -> List[ImageSample]:
    """
    Render ``count`` images of colored shapes on a noisy background.

    Class ``c`` is drawn as ``SHAPE_NAMES[c]``. Shapes never overlap and every
    image holds at least one. Output is a pure function of the arguments.

    Raises:
        ConfigError: for images below 32 px, class counts outside 1..8, or
            ``max_objects < 1``.
    """
    if image_size < 32:
        raise ConfigError(f"image_size must be at least 32, got {image_size}")
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ConfigError(
            f"num_classes must be in 1..{len(SHAPE_NAMES)}, got {num_classes}"
        )
    if max_objects < 1:
        raise ConfigError(f"max_objects must be >= 1, got {max_objects}")
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")

    rng = np.random.default_rng(seed)
    samples = []
    for index in range(count):
        image, boxes, labels = _render_image(
            rng, image_size, max_objects, num_classes
        )
        samples.append(
            ImageSample(
                pixels=_pixels_to_tensor(image),
                truth=GroundTruth(boxes=boxes, labels=labels),
                id=f"shapes-{seed}-{index:05d}",
            )
        )
    logger.debug("Generated %d synthetic images (seed=%d)", count, seed)
    return samples


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """
    Iteration order of a dataset for one epoch.
    """
    return np.random.default_rng([seed, epoch]).permutation(count)


# --------------------------------------------------------------------------- #
# COCO-style annotations
# --------------------------------------------------------------------------- #


def _json_path(loc: Sequence) -> str:
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path += f".{part}" if path else str(part)
    return path


def load_image(path: str | Path, image_size: int = 64) -> Tensor:
    """
    Read an image file as RGB in [0, 1], resized to ``image_size`` square.

    Raises:
        ParseError: if the file is missing or not a readable image.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"image file not found: {path}")
    try:
        with Image.open(path) as handle:
            rgb = handle.convert("RGB").resize(
                (image_size, image_size), Image.Resampling.BILINEAR
            )
            pixels = np.asarray(rgb, dtype=np.float64) / 255.0
    except OSError as exc:
        raise ParseError(f"unreadable image: {exc}", path=str(path)) from exc
    return _pixels_to_tensor(pixels)


@dataclass
class CocoDataset:
    """
    Parsed COCO-style annotation file.

    Attributes:
        images: Image records in file order.
        truths: Normalized ground truth per image id.
        categories: Category names; position is the contiguous class index.
        category_ids: Original category id per contiguous index.
        clamped_boxes: Number of boxes clamped to their image.
        source: Path the annotations were read from.
    """

    images: List[CocoImage]
    truths: Dict[int, GroundTruth]
    categories: List[str]
    category_ids: List[int]
    clamped_boxes: int = 0
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def load_samples(
        self, image_root: Optional[str | Path] = None, image_size: int = 64
    ) -> List[ImageSample]:
        """
        Read every image with Pillow, resized to ``image_size`` square.

        ``image_root`` defaults to the directory of the annotation file.
        """
        if image_root is None:
            if self.source is None:
                raise ParseError("image_root is required for in-memory data")
            image_root = self.source.parent
        root = Path(image_root)
        samples = []
        for record in self.images:
            samples.append(
                ImageSample(
                    pixels=load_image(root / record.file_name, image_size),
                    truth=self.truths[record.id],
                    id=str(record.id),
                )
            )
        return samples


def _clamp_pixel_box(
    bbox: Sequence[float], width: int, height: int
) -> tuple[list[float], bool]:
    x, y, w, h = bbox
    x0 = min(max(x, 0.0), width)
    y0 = min(max(y, 0.0), height)
    x1 = min(max(x + w, 0.0), width)
    y1 = min(max(y + h, 0.0), height)
    clamped = (x0, y0, x1, y1) != (x, y, x + w, y + h)
    return [x0, y0, x1 - x0, y1 - y0], clamped


def parse_coco(raw: object, source: Optional[Path] = None) -> CocoDataset:
    """
    Validate decoded COCO JSON and convert it to normalized ground truth.

    Raises:
        ParseError: with the JSON path of the first missing or malformed
            value, or on duplicate image ids and unknown references.
    """
    try:
        coco = CocoFile.parse_obj(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ParseError(first["msg"], path=_json_path(first["loc"])) from exc

    seen: Dict[int, int] = {}
    for index, image in enumerate(coco.images):
        if image.id in seen:
            raise ParseError(
                f"duplicate image id {image.id} (first at images[{seen[image.id]}])",
                path=f"images[{index}].id",
            )
        seen[image.id] = index

    category_ids = sorted({c.id for c in coco.categories})
    if len(category_ids) != len(coco.categories):
        raise ParseError("duplicate category ids", path="categories")
    by_id: Dict[int, CocoCategory] = {c.id: c for c in coco.categories}
    remap = {cid: index for index, cid in enumerate(category_ids)}

    sizes = {image.id: (image.width, image.height) for image in coco.images}
    boxes: Dict[int, List[BoxCXCYWH]] = {image.id: [] for image in coco.images}
    labels: Dict[int, List[int]] = {image.id: [] for image in coco.images}
    clamped_total = 0

    for index, ann in enumerate(coco.annotations):
        _check_refs(ann, index, sizes, remap)
        width, height = sizes[ann.image_id]
        bbox, clamped = _clamp_pixel_box(ann.bbox, width, height)
        if clamped:
            clamped_total += 1
        if bbox[2] <= 0 or bbox[3] <= 0:
            logger.warning(
                "Dropping annotations[%d]: empty after clamping to image %d",
                index,
                ann.image_id,
            )
            continue
        boxes[ann.image_id].append(BoxCXCYWH.from_pixel_xywh(*bbox, width, height))
        labels[ann.image_id].append(remap[ann.category_id])

    if clamped_total:
        logger.warning(
            "Clamped %d annotation boxes to their image bounds", clamped_total
        )

    truths = {
        image_id: GroundTruth(boxes=boxes[image_id], labels=labels[image_id])
        for image_id in boxes
    }
    return CocoDataset(
        images=list(coco.images),
        truths=truths,
        categories=[by_id[cid].name for cid in category_ids],
        category_ids=category_ids,
        clamped_boxes=clamped_total,
        source=source,
    )


def _check_refs(
    ann: CocoAnnotation,
    index: int,
    sizes: Dict[int, tuple],
    remap: Dict[int, int],
) -> None:
    if ann.image_id not in sizes:
        raise ParseError(
            f"unknown image id {ann.image_id}",
            path=f"annotations[{index}].image_id",
        )
    if ann.category_id not in remap:
        raise ParseError(
            f"unknown category id {ann.category_id}",
            path=f"annotations[{index}].category_id",
        )


def load_coco_annotations(path: str | Path) -> CocoDataset:
    """
    Load a COCO-style detection JSON file.

    Raises:
        ParseError: if the file is missing, not JSON, or fails validation.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"annotation file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc
    dataset = parse_coco(raw, source=path)
    logger.info(
        "Loaded %d images, %d categories from %s",
        len(dataset),
        dataset.num_classes,
        path,
    )
    return dataset


def dump_coco(
    samples: Sequence[ImageSample],
    out_dir: str | Path,
    class_names: Sequence[str] = SHAPE_NAMES,
    annotation_name: str = "annotations.json",
) -> Path:
    """
    Write samples as PNG files plus one COCO-style JSON file.

    Returns:
        Path of the written JSON file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    used_labels = set()
    for image_id, sample in enumerate(samples, start=1):
        _, height, width = sample.pixels.shape
        file_name = f"{sample.id}.png"
        raster = np.transpose(sample.pixels.data, (1, 2, 0))
        pixels = np.round(raster * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(out_dir / file_name)
        images.append(
            {"id": image_id, "file_name": file_name, "width": width, "height": height}
        )
        for box, label in zip(sample.truth.boxes, sample.truth.labels):
            used_labels.add(label)
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_id,
                    "bbox": list(box.to_pixel_xywh(width, height)),
                    "category_id": label + 1,
                }
            )
    top = max(used_labels, default=-1)
    categories = [
        {"id": index + 1, "name": class_names[index]}
        for index in range(max(top + 1, 1))
    ]
    target = out_dir / annotation_name
    target.write_text(
        json.dumps(
            {"images": images, "annotations": annotations, "categories": categories},
            indent=2,
        ),
        encoding="utf-8",
    )
    logger.info("Wrote %d images to %s", len(images), out_dir)
    return target


__all__ = [
    "CocoDataset",
    "SHAPE_NAMES",
    "dump_coco",
    "epoch_order",
    "generate_shapes",
    "load_coco_annotations",
    "load_image",
    "parse_coco",
]
