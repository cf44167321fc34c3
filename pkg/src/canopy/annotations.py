"""Annotation parsing and the combined dataset index.

Two per-image sources are supported: PASCAL VOC XML files with boxes (as
written by LabelImg) and polygon JSON files (as written by labelme).  Both
are folded into a :class:`DatasetIndex` whose JSON form is the usual
single-file detection index (images / categories / annotations) with
category ids starting at 1, id 0 being the background class.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .geometry import BBox, Polygon, dedupe_vertices, polygon_area

log = logging.getLogger(__name__)


class AnnotationError(ValueError):
    """Base class for annotation parse failures."""


class MalformedAnnotation(AnnotationError):
    """The document cannot be read at all (bad syntax, missing keys)."""


class InvalidAnnotation(AnnotationError):
    """The document is readable but violates a geometric invariant."""


@dataclass(frozen=True)
class CategoryMap:
    """Ordered category names; the name at position ``i`` has id ``i + 1``."""

    names: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if any(not isinstance(n, str) or not n for n in self.names):
            raise ValueError("category names must be non-empty strings")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate category names in {self.names}")

    def __len__(self):
        return len(self.names)

    def __contains__(self, category_id):
        return isinstance(category_id, int) and 1 <= category_id <= len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise KeyError(f"unknown category {name!r}") from None

    def name_of(self, category_id: int) -> str:
        if category_id not in self:
            raise KeyError(f"unknown category id {category_id}")
        return self.names[category_id - 1]

    def items(self) -> List[Tuple[int, str]]:
        return [(i + 1, n) for i, n in enumerate(self.names)]


@dataclass(frozen=True)
class LabeledBox:
    category_id: int
    box: BBox


@dataclass(frozen=True)
class LabeledPolygon:
    category_id: int
    polygon: Polygon


@dataclass(frozen=True)
class ImageAnnotation:
    """Ground truth for one image.

    Box and polygon bounds are not enforced here; :func:`validate` reports
    them, so that a bad dataset can be inspected rather than refused.
    """

    image_id: int
    file_name: str
    width: int
    height: int
    boxes: Tuple[LabeledBox, ...] = ()
    polygons: Tuple[LabeledPolygon, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "polygons", tuple(self.polygons))
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.file_name}: image size must be positive")


@dataclass(frozen=True)
class DatasetIndex:
    categories: CategoryMap
    images: Tuple[ImageAnnotation, ...]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        ids = [im.image_id for im in self.images]
        names = [im.file_name for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in index")
        if len(set(names)) != len(names):
            raise ValueError("duplicate file names in index")

    def image(self, image_id: int) -> ImageAnnotation:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(f"unknown image id {image_id}")


@dataclass
class ParsedImage:
    """Result of parsing one per-image annotation document.

    ``objects`` holds ``(label, BBox)`` pairs for VOC files and
    ``(label, Polygon)`` pairs for polygon files, in document order.
    ``skipped`` counts shapes that were ignored (non-polygon shapes).
    """

    file_name: str
    width: int
    height: int
    objects: List[Tuple[str, Union[BBox, Polygon]]] = field(default_factory=list)
    skipped: int = 0


def _number(text: Optional[str], where: str) -> float:
    if text is None:
        raise MalformedAnnotation(f"missing value for <{where}>")
    try:
        value = float(text.strip())
    except ValueError:
        raise InvalidAnnotation(f"non-numeric value {text!r} in <{where}>") from None
    if not math.isfinite(value):
        raise InvalidAnnotation(f"non-finite value {text!r} in <{where}>")
    return value


def _size(value: float, where: str) -> int:
    if value <= 0 or value != int(value):
        raise InvalidAnnotation(f"invalid image size {value} in <{where}>")
    return int(value)


def parse_voc_xml(document: Union[str, bytes]) -> ParsedImage:
    """Parse a PASCAL VOC annotation document."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise MalformedAnnotation(f"malformed XML: {exc}") from None
    if root.tag != "annotation":
        raise MalformedAnnotation(f"root element is <{root.tag}>, expected <annotation>")

    file_name = (root.findtext("filename") or "").strip()
    if not file_name:
        raise MalformedAnnotation("missing <filename>")
    size = root.find("size")
    if size is None:
        raise MalformedAnnotation("missing <size>")
    width = _size(_number(size.findtext("width"), "size/width"), "size/width")
    height = _size(_number(size.findtext("height"), "size/height"), "size/height")

    objects = []
    for k, obj in enumerate(root.findall("object")):
        name = (obj.findtext("name") or "").strip()
        where = f"object[{k}]"
        if not name:
            raise MalformedAnnotation(f"{where}: missing <name>")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MalformedAnnotation(f"{where} ({name}): missing <bndbox>")
        xmin, ymin, xmax, ymax = (
            _number(bnd.findtext(tag), f"{where}/bndbox/{tag}")
            for tag in ("xmin", "ymin", "xmax", "ymax")
        )
        if xmax <= xmin or ymax <= ymin:
            raise InvalidAnnotation(
                f"{where} ({name}): inverted box ({xmin}, {ymin}, {xmax}, {ymax})"
            )
        if min(xmin, ymin) < 0:
            raise InvalidAnnotation(f"{where} ({name}): negative box coordinate")
        objects.append((name, BBox(xmin, ymin, xmax, ymax)))
    return ParsedImage(file_name, width, height, objects)


def parse_polygon_json(document: Union[str, bytes]) -> ParsedImage:
    """Parse a labelme-style polygon document.

    The embedded ``imageData`` field is ignored.  Shapes whose
    ``shape_type`` is not ``"polygon"`` are skipped and counted.
    """
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise MalformedAnnotation(f"malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise MalformedAnnotation("polygon document must be a JSON object")
    for key in ("shapes", "imagePath", "imageHeight", "imageWidth"):
        if key not in data:
            raise MalformedAnnotation(f"missing key {key!r}")

    width = _size(_number(str(data["imageWidth"]), "imageWidth"), "imageWidth")
    height = _size(_number(str(data["imageHeight"]), "imageHeight"), "imageHeight")
    file_name = str(data["imagePath"]).replace("\\", "/").split("/")[-1]
    if not file_name:
        raise MalformedAnnotation("empty imagePath")

    objects, skipped = [], 0
    for k, shape in enumerate(data["shapes"]):
        for key in ("label", "points"):
            if key not in shape:
                raise MalformedAnnotation(f"shapes[{k}]: missing key {key!r}")
        shape_type = shape.get("shape_type", "polygon")
        if shape_type != "polygon":
            skipped += 1
            continue
        try:
            points = [(float(x), float(y)) for x, y in shape["points"]]
        except (TypeError, ValueError):
            raise MalformedAnnotation(f"shapes[{k}]: points must be [x, y] pairs") from None
        points = dedupe_vertices(points)
        if len(points) < 3:
            raise InvalidAnnotation(
                f"shapes[{k}] ({shape['label']}): degenerate polygon with {len(points)} points"
            )
        objects.append((str(shape["label"]), Polygon(tuple(points))))
    if skipped:
        log.warning("%s: skipped %d non-polygon shape(s)", file_name, skipped)
    return ParsedImage(file_name, width, height, objects, skipped)


def build_index(
    annotations: Iterable[ParsedImage], names: Optional[Sequence[str]] = None
) -> DatasetIndex:
    """Fold per-image parses into a dataset index.

    Images get ids 1..N in sorted file-name order.  Category ids follow
    ``names`` when given, otherwise the first-seen order of labels while
    walking images in that same sorted order.
    """
    parses = sorted(annotations, key=lambda p: p.file_name)
    for a, b in zip(parses, parses[1:]):
        if a.file_name == b.file_name:
            raise ValueError(f"duplicate file name {a.file_name!r}")

    if names is not None:
        categories = CategoryMap(tuple(names))
        for p in parses:
            for label, _ in p.objects:
                if label not in categories.names:
                    raise ValueError(
                        f"{p.file_name}: label {label!r} not in category order {list(names)}"
                    )
    else:
        seen: Dict[str, None] = {}
        for p in parses:
            for label, _ in p.objects:
                seen.setdefault(label, None)
        categories = CategoryMap(tuple(seen))

    images = []
    for image_id, p in enumerate(parses, start=1):
        boxes, polygons = [], []
        for label, shape in p.objects:
            cid = categories.id_of(label)
            if isinstance(shape, BBox):
                boxes.append(LabeledBox(cid, shape))
            else:
                polygons.append(LabeledPolygon(cid, shape))
        images.append(ImageAnnotation(image_id, p.file_name, p.width, p.height, boxes, polygons))
    return DatasetIndex(categories, images)


@dataclass(frozen=True)
class Violation:
    image_id: int
    file_name: str
    item: str
    message: str

    def __str__(self):
        return f"{self.file_name} (image {self.image_id}) {self.item}: {self.message}"


def validate(index: DatasetIndex) -> List[Violation]:
    out = []
    for im in index.images:
        for k, lb in enumerate(im.boxes):
            item = f"box[{k}]"
            b = lb.box
            if lb.category_id not in index.categories:
                out.append(Violation(im.image_id, im.file_name, item,
                                     f"unknown category id {lb.category_id}"))
            if not (b.xmin < b.xmax and b.ymin < b.ymax):
                out.append(Violation(im.image_id, im.file_name, item, "zero-area box"))
            if not (0 <= b.xmin and b.xmax <= im.width and 0 <= b.ymin and b.ymax <= im.height):
                out.append(Violation(
                    im.image_id, im.file_name, item,
                    f"box {b.as_tuple()} outside image {im.width}x{im.height}",
                ))
        for k, lp in enumerate(im.polygons):
            item = f"polygon[{k}]"
            if lp.category_id not in index.categories:
                out.append(Violation(im.image_id, im.file_name, item,
                                     f"unknown category id {lp.category_id}"))
            for x, y in lp.polygon.vertices:
                if not (0 <= x <= im.width and 0 <= y <= im.height):
                    out.append(Violation(
                        im.image_id, im.file_name, item,
                        f"vertex ({x}, {y}) outside image {im.width}x{im.height}",
                    ))
    return out


def _num_out(v: float):
    # integral floats are written as ints to keep files readable
    return int(v) if float(v).is_integer() else v


def index_to_dict(index: DatasetIndex) -> dict:
    images, annotations = [], []
    ann_id = 0
    for im in index.images:
        images.append({"id": im.image_id, "file_name": im.file_name,
                       "height": im.height, "width": im.width})
        for lb in im.boxes:
            ann_id += 1
            annotations.append({
                "id": ann_id, "image_id": im.image_id, "category_id": lb.category_id,
                "bbox": [_num_out(v) for v in lb.box.to_xywh()],
                "segmentation": [],
                "area": _num_out(lb.box.width * lb.box.height),
                "iscrowd": 0,
            })
        for lp in im.polygons:
            ann_id += 1
            x0, y0, x1, y1 = lp.polygon.bounds()
            annotations.append({
                "id": ann_id, "image_id": im.image_id, "category_id": lp.category_id,
                "bbox": [_num_out(v) for v in (x0, y0, x1 - x0, y1 - y0)],
                "segmentation": [[_num_out(v) for v in lp.polygon.flat()]],
                "area": _num_out(polygon_area(lp.polygon.vertices)),
                "iscrowd": 0,
            })
    return {
        "images": images,
        "categories": [{"id": i, "name": n} for i, n in index.categories.items()],
        "annotations": annotations,
    }


def write_index(index: DatasetIndex) -> str:
    return json.dumps(index_to_dict(index), indent=2) + "\n"


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise MalformedAnnotation(f"{where}: missing key {key!r}")
    return obj[key]


def read_index(document: Union[str, bytes]) -> DatasetIndex:
    """Inverse of :func:`write_index`.

    Annotations with a non-empty ``segmentation`` become polygons (their
    ``bbox`` is derived and ignored); the rest become boxes.
    """
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise MalformedAnnotation(f"malformed index JSON: {exc}") from None

    cats = sorted(_require(data, "categories", "index"), key=lambda c: _require(c, "id", "category"))
    names = []
    for expected, c in enumerate(cats, start=1):
        cid = _require(c, "id", "category")
        if cid == 0:
            raise MalformedAnnotation("category id 0: background id reserved")
        if cid != expected:
            raise MalformedAnnotation(f"category ids must be 1..K without gaps, found {cid}")
        names.append(_require(c, "name", f"category {cid}"))
    try:
        categories = CategoryMap(tuple(names))
    except ValueError as exc:
        raise MalformedAnnotation(str(exc)) from None

    per_image: Dict[int, Tuple[list, list]] = {}
    raw_images = _require(data, "images", "index")
    for im in raw_images:
        per_image[_require(im, "id", "image")] = ([], [])
    anns = sorted(_require(data, "annotations", "index"), key=lambda a: _require(a, "id", "annotation"))
    for a in anns:
        where = f"annotation {a['id']}"
        image_id = _require(a, "image_id", where)
        cid = _require(a, "category_id", where)
        if cid == 0:
            raise MalformedAnnotation(f"{where}: category id 0: background id reserved")
        if image_id not in per_image:
            raise MalformedAnnotation(f"{where}: unknown image id {image_id}")
        seg = a.get("segmentation") or []
        try:
            if seg:
                if len(seg) != 1:
                    raise MalformedAnnotation(f"{where}: expected exactly one polygon ring")
                per_image[image_id][1].append(LabeledPolygon(cid, Polygon.from_flat(seg[0])))
            else:
                x, y, w, h = _require(a, "bbox", where)
                per_image[image_id][0].append(LabeledBox(cid, BBox.from_xywh(x, y, w, h)))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, MalformedAnnotation):
                raise
            raise MalformedAnnotation(f"{where}: {exc}") from None

    images = []
    for im in raw_images:
        boxes, polys = per_image[im["id"]]
        try:
            images.append(ImageAnnotation(
                im["id"], _require(im, "file_name", "image"),
                _require(im, "width", "image"), _require(im, "height", "image"),
                boxes, polys,
            ))
        except ValueError as exc:
            if isinstance(exc, MalformedAnnotation):
                raise
            raise MalformedAnnotation(str(exc)) from None
    try:
        return DatasetIndex(categories, images)
    except ValueError as exc:
        raise MalformedAnnotation(str(exc)) from None
