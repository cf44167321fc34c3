"""Seeded rotation/crop expansion of an annotated dataset.

Every source image yields exactly two variants, one rotated and one
cropped, so a dataset of N images grows to 3N.  Only annotations are
transformed here; pixels are left to whatever imaging tool consumes the plan.
"""

from __future__ import annotations

import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .annotations import DatasetIndex, ImageAnnotation, LabeledBox, LabeledPolygon
from .geometry import (
    BBox,
    Polygon,
    clip_polygon,
    crop_box,
    dedupe_vertices,
    polygon_area,
    rotate_box,
    rotate_point,
    rotated_canvas,
)

RIGHT_ANGLES = (-180.0, -90.0, 90.0)


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling parameters.

    Crop windows take each side uniformly in ``[min_side, max_side]`` of
    the image dimension, rounded up to whole pixels, so with the default
    ``min_side`` of 0.5 a window always covers at least 25% of the image.
    """

    min_side: float = 0.5
    max_side: float = 1.0
    min_kept_fraction: float = 0.3
    retries: int = 10
    right_angles: bool = False

    def __post_init__(self):
        if not 0 < self.min_side <= self.max_side <= 1:
            raise ValueError("need 0 < min_side <= max_side <= 1")
        if not 0 <= self.min_kept_fraction <= 1:
            raise ValueError("min_kept_fraction must be in [0, 1]")
        if self.retries < 1:
            raise ValueError("retries must be >= 1")


@dataclass(frozen=True)
class AugmentItem:
    image_id: int
    angle: float
    window: BBox
    degenerate_crop: bool = False


@dataclass(frozen=True)
class AugmentPlan:
    seed: int
    items: Tuple[AugmentItem, ...]
    config: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def variant_count(self) -> int:
        return 2 * len(self.items)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "items": [
                {
                    "image_id": it.image_id,
                    "angle": it.angle,
                    "window": list(it.window.as_tuple()),
                    "degenerate_crop": it.degenerate_crop,
                }
                for it in self.items
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, config: Optional[AugmentConfig] = None) -> "AugmentPlan":
        items = tuple(
            AugmentItem(it["image_id"], float(it["angle"]), BBox(*it["window"]),
                        bool(it.get("degenerate_crop", False)))
            for it in data["items"]
        )
        return cls(int(data["seed"]), items, config or AugmentConfig())


def _ground_truth_boxes(ann: ImageAnnotation) -> List[BBox]:
    out = [lb.box for lb in ann.boxes]
    for lp in ann.polygons:
        x0, y0, x1, y1 = lp.polygon.bounds()
        if x0 < x1 and y0 < y1:
            out.append(BBox(x0, y0, x1, y1))
    return out


def _sample_angle(rng: random.Random, config: AugmentConfig) -> float:
    if config.right_angles:
        return rng.choice(RIGHT_ANGLES)
    angle = rng.uniform(-180.0, 180.0)
    return angle - 360.0 if angle >= 180.0 else angle


def _sample_window(rng: random.Random, width: int, height: int, config: AugmentConfig) -> BBox:
    cw = min(width, max(1, math.ceil(width * rng.uniform(config.min_side, config.max_side))))
    ch = min(height, max(1, math.ceil(height * rng.uniform(config.min_side, config.max_side))))
    x0 = rng.randint(0, width - cw)
    y0 = rng.randint(0, height - ch)
    return BBox(x0, y0, x0 + cw, y0 + ch)


def plan(index: DatasetIndex, seed: int, config: Optional[AugmentConfig] = None) -> AugmentPlan:
    """Sample one rotation angle and one crop window per image.

    A crop window is resampled up to ``config.retries`` times until at least
    one ground-truth region survives it; otherwise the full image is used
    and the item is flagged ``degenerate_crop``.  Images without any ground
    truth keep their first sampled window.
    """
    config = config or AugmentConfig()
    rng = random.Random(seed)
    items = []
    for ann in sorted(index.images, key=lambda a: a.image_id):
        angle = _sample_angle(rng, config)
        gts = _ground_truth_boxes(ann)
        window, degenerate = None, False
        for _ in range(config.retries):
            candidate = _sample_window(rng, ann.width, ann.height, config)
            if not gts or any(crop_box(b, candidate, config.min_kept_fraction) for b in gts):
                window = candidate
                break
        if window is None:
            window, degenerate = BBox(0, 0, ann.width, ann.height), True
        items.append(AugmentItem(ann.image_id, angle, window, degenerate))
    return AugmentPlan(seed, tuple(items), config)


def _canvas_pixels(extent: float) -> int:
    return max(1, math.ceil(extent - 1e-9))


def apply_rotation(ann: ImageAnnotation, angle: float) -> Tuple[ImageAnnotation, int]:
    """Rotate all annotations with the image; returns (annotation, dropped count).

    The output canvas is the rotated image's bounding rectangle rounded up to
    whole pixels.  Polygons are rotated vertex by vertex.
    """
    cw, ch = rotated_canvas(ann.width, ann.height, angle)
    width, height = _canvas_pixels(cw), _canvas_pixels(ch)
    dropped = 0
    boxes = []
    for lb in ann.boxes:
        rb = rotate_box(lb.box, angle, ann.width, ann.height)
        if rb is not None and (rb.xmax > width or rb.ymax > height):
            # float noise at the canvas edge
            rb = BBox(rb.xmin, rb.ymin, min(rb.xmax, width), min(rb.ymax, height))
        if rb is None:
            dropped += 1
        else:
            boxes.append(LabeledBox(lb.category_id, rb))
    polygons = []
    for lp in ann.polygons:
        pts = dedupe_vertices(
            (min(max(x, 0.0), width), min(max(y, 0.0), height))
            for x, y in (rotate_point(v, angle, ann.width, ann.height) for v in lp.polygon)
        )
        if len(pts) < 3:
            dropped += 1
        else:
            polygons.append(LabeledPolygon(lp.category_id, Polygon(tuple(pts))))
    out = ImageAnnotation(ann.image_id, ann.file_name, width, height, boxes, polygons)
    return out, dropped


def apply_crop(
    ann: ImageAnnotation, window: BBox, min_kept_fraction: float = 0.3
) -> Tuple[ImageAnnotation, int]:
    """Crop annotations to ``window``; returns (annotation, dropped count).

    Polygons are clipped to the window and dropped when the clipped part is
    empty or smaller than ``min_kept_fraction`` of the original area.
    """
    if not (window.xmax <= ann.width and window.ymax <= ann.height):
        raise ValueError(f"crop window {window.as_tuple()} outside {ann.width}x{ann.height}")
    dropped = 0
    boxes = []
    for lb in ann.boxes:
        cb = crop_box(lb.box, window, min_kept_fraction)
        if cb is None:
            dropped += 1
        else:
            boxes.append(LabeledBox(lb.category_id, cb))
    polygons = []
    for lp in ann.polygons:
        clipped = dedupe_vertices(clip_polygon(lp.polygon.vertices, window))
        kept = polygon_area(clipped) if len(clipped) >= 3 else 0.0
        if kept == 0.0 or kept < min_kept_fraction * polygon_area(lp.polygon.vertices):
            dropped += 1
            continue
        local = tuple((x - window.xmin, y - window.ymin) for x, y in clipped)
        polygons.append(LabeledPolygon(lp.category_id, Polygon(local)))
    w = _canvas_pixels(window.xmax - window.xmin)
    h = _canvas_pixels(window.ymax - window.ymin)
    return ImageAnnotation(ann.image_id, ann.file_name, w, h, boxes, polygons), dropped


def variant_name(file_name: str, tag: str) -> str:
    stem, dot, ext = file_name.rpartition(".")
    if not dot:
        return f"{file_name}__{tag}"
    return f"{stem}__{tag}.{ext}"


@dataclass
class AugmentResult:
    index: DatasetIndex
    dropped: int
    originals: int
    variants: int

    @property
    def total(self) -> int:
        return self.originals + self.variants


def expand(index: DatasetIndex, aug_plan: AugmentPlan, workers: int = 1) -> AugmentResult:
    """Apply a plan and return an index holding originals plus both variants.

    Image ids in the result are reassigned 1..3N in sorted file-name order,
    so the result does not depend on ``workers``.
    """
    by_id = {im.image_id: im for im in index.images}

    def variants(it: AugmentItem):
        src = by_id[it.image_id]
        rot, d1 = apply_rotation(src, it.angle)
        crop, d2 = apply_crop(src, it.window, aug_plan.config.min_kept_fraction)
        return (_rename(rot, variant_name(src.file_name, "rot")),
                _rename(crop, variant_name(src.file_name, "crop")), d1 + d2)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(variants, aug_plan.items))
    else:
        results = [variants(it) for it in aug_plan.items]
    entries = list(index.images)
    dropped = 0
    for rot, crop, d in results:
        entries.extend((rot, crop))
        dropped += d
    entries.sort(key=lambda a: a.file_name)
    images = [_rename(a, a.file_name, image_id=i) for i, a in enumerate(entries, start=1)]
    return AugmentResult(
        DatasetIndex(index.categories, images), dropped,
        len(index.images), aug_plan.variant_count,
    )


def _rename(ann: ImageAnnotation, file_name: str, image_id: Optional[int] = None) -> ImageAnnotation:
    return ImageAnnotation(
        ann.image_id if image_id is None else image_id,
        file_name, ann.width, ann.height, ann.boxes, ann.polygons,
    )
