"""Rectangle and polygon primitives.

Boxes live in continuous pixel coordinates: a box ``(xmin, ymin, xmax, ymax)``
covers the half-open region ``[xmin, xmax) x [ymin, ymax)`` and its area is
``(xmax - xmin) * (ymax - ymin)``.  For integer boxes this is exactly the
number of unit pixel cells covered, so every area and IOU has a
cell-counting interpretation.

ROIs follow the instance-segmentation convention ``[y1, x1, y2, x2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence, Tuple

Point = Tuple[float, float]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner form."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if min(coords) < 0:
            raise ValueError(f"negative box coordinates {coords}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"zero-area or inverted box {coords}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def to_xywh(self) -> list:
        return [self.xmin, self.ymin, self.xmax - self.xmin, self.ymax - self.ymin]

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(x, y, x + w, y + h)

    def to_roi(self) -> "Roi":
        return Roi(self.ymin, self.xmin, self.ymax, self.xmax)


@dataclass(frozen=True)
class Roi:
    """Region of interest in ``[y1, x1, y2, x2]`` order."""

    y1: float
    x1: float
    y2: float
    x2: float

    def __post_init__(self):
        coords = (self.y1, self.x1, self.y2, self.x2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite roi {coords}")
        if not (self.y1 < self.y2 and self.x1 < self.x2):
            raise ValueError(f"zero-area or inverted roi {list(coords)}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Roi":
        y1, x1, y2, x2 = values
        return cls(y1, x1, y2, x2)

    def as_list(self) -> list:
        return [self.y1, self.x1, self.y2, self.x2]

    @property
    def area(self) -> float:
        return (self.y2 - self.y1) * (self.x2 - self.x1)

    def to_bbox(self) -> BBox:
        return BBox(self.x1, self.y1, self.x2, self.y2)


class CornerQuad(NamedTuple):
    top_left: Point
    top_right: Point
    bottom_right: Point
    bottom_left: Point


@dataclass(frozen=True)
class Polygon:
    """Implicitly closed polygon; consecutive duplicate vertices are rejected."""

    vertices: Tuple[Point, ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ValueError(f"degenerate polygon: {len(verts)} vertices")
        for i, v in enumerate(verts):
            if not (math.isfinite(v[0]) and math.isfinite(v[1])):
                raise ValueError(f"non-finite polygon vertex {v}")
            if v == verts[i - 1]:
                raise ValueError(f"repeated consecutive vertex {v}")

    def __len__(self):
        return len(self.vertices)

    def __iter__(self):
        return iter(self.vertices)

    def flat(self) -> list:
        return [c for v in self.vertices for c in v]

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Polygon":
        if len(values) % 2:
            raise ValueError("flat polygon needs an even number of values")
        return cls(tuple(zip(values[0::2], values[1::2])))

    def bounds(self) -> Tuple[float, float, float, float]:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return (min(xs), min(ys), max(xs), max(ys))


def dedupe_vertices(points: Iterable[Point]) -> list:
    """Drop consecutive repeats, including a closing vertex equal to the first."""
    out = []
    for p in points:
        p = (float(p[0]), float(p[1]))
        if not out or out[-1] != p:
            out.append(p)
    while len(out) > 1 and out[-1] == out[0]:
        out.pop()
    return out


def area(b: BBox) -> float:
    return (b.xmax - b.xmin) * (b.ymax - b.ymin)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; boxes touching only on an edge score 0."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def roi_to_coordinates(r: Roi) -> CornerQuad:
    return CornerQuad((r.x1, r.y1), (r.x2, r.y1), (r.x2, r.y2), (r.x1, r.y2))


def contains_strict(outer: Roi, inner: Roi) -> bool:
    """True when ``inner`` lies strictly inside ``outer`` on all four sides.

    The comparison is done corner by corner: top-left, top-right,
    bottom-right, bottom-left of the inner quad against the outer quad.
    Shared edges fail.
    """
    o = roi_to_coordinates(outer)
    i = roi_to_coordinates(inner)
    return (
        o.top_left[0] < i.top_left[0] and o.top_left[1] < i.top_left[1]
        and o.top_right[0] > i.top_right[0] and o.top_right[1] < i.top_right[1]
        and o.bottom_right[0] > i.bottom_right[0] and o.bottom_right[1] > i.bottom_right[1]
        and o.bottom_left[0] < i.bottom_left[0] and o.bottom_left[1] > i.bottom_left[1]
    )


def _cos_sin(angle: float) -> Tuple[float, float]:
    # exact values at right angles so 90/180 rotations stay on the integer grid
    a = math.fmod(angle, 360.0)
    if a < 0:
        a += 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in exact:
        return exact[a]
    t = math.radians(a)
    return math.cos(t), math.sin(t)


def rotated_canvas(image_w: float, image_h: float, angle: float) -> Tuple[float, float]:
    """Extent of the image rectangle after rotation (continuous, not rounded)."""
    c, s = _cos_sin(angle)
    return (image_w * abs(c) + image_h * abs(s), image_w * abs(s) + image_h * abs(c))


def rotate_point(p: Point, angle: float, image_w: float, image_h: float) -> Point:
    """Map a point of the source image onto the expanded rotated canvas.

    Positive angles turn the picture counter-clockwise as displayed
    (y axis pointing down), the convention used by common imaging libraries.
    """
    c, s = _cos_sin(angle)
    cw, ch = rotated_canvas(image_w, image_h, angle)
    dx = p[0] - image_w / 2.0
    dy = p[1] - image_h / 2.0
    return (cw / 2.0 + dx * c + dy * s, ch / 2.0 - dx * s + dy * c)


def rotate_box(b: BBox, angle: float, image_w: float, image_h: float) -> Optional[BBox]:
    """Rotate a box with its image and re-box it as an axis-aligned hull.

    Returns None when the clipped hull has zero area (the box is dropped).
    The output canvas size is given by :func:`rotated_canvas`.
    """
    corners = [(b.xmin, b.ymin), (b.xmax, b.ymin), (b.xmax, b.ymax), (b.xmin, b.ymax)]
    pts = [rotate_point(p, angle, image_w, image_h) for p in corners]
    cw, ch = rotated_canvas(image_w, image_h, angle)
    xmin = min(max(min(p[0] for p in pts), 0.0), cw)
    xmax = min(max(max(p[0] for p in pts), 0.0), cw)
    ymin = min(max(min(p[1] for p in pts), 0.0), ch)
    ymax = min(max(max(p[1] for p in pts), 0.0), ch)
    if xmin >= xmax or ymin >= ymax:
        return None
    return BBox(xmin, ymin, xmax, ymax)


def intersect(a: BBox, b: BBox) -> Optional[BBox]:
    xmin, ymin = max(a.xmin, b.xmin), max(a.ymin, b.ymin)
    xmax, ymax = min(a.xmax, b.xmax), min(a.ymax, b.ymax)
    if xmin >= xmax or ymin >= ymax:
        return None
    return BBox(xmin, ymin, xmax, ymax)


def crop_box(b: BBox, window: BBox, min_kept_fraction: float) -> Optional[BBox]:
    """Clip ``b`` to ``window`` and express it in window-local coordinates.

    Returns None when nothing is left or when the retained part covers
    less than ``min_kept_fraction`` of the original box area.
    """
    if not 0.0 <= min_kept_fraction <= 1.0:
        raise ValueError(f"min_kept_fraction must be in [0, 1], got {min_kept_fraction}")
    inter = intersect(b, window)
    if inter is None or area(inter) < min_kept_fraction * area(b):
        return None
    return BBox(
        inter.xmin - window.xmin,
        inter.ymin - window.ymin,
        inter.xmax - window.xmin,
        inter.ymax - window.ymin,
    )


def polygon_area(vertices: Sequence[Point]) -> float:
    """Unsigned shoelace area."""
    s = 0.0
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i - 1]
        x1, y1 = vertices[i]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def clip_polygon(vertices: Sequence[Point], window: BBox) -> list:
    """Sutherland-Hodgman clip of a polygon against an axis-aligned window."""

    def clip(points, inside, cross):
        out = []
        for i, cur in enumerate(points):
            prev = points[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
        return out

    def at_x(x):
        def cross(p, q):
            t = (x - p[0]) / (q[0] - p[0])
            return (x, p[1] + t * (q[1] - p[1]))
        return cross

    def at_y(y):
        def cross(p, q):
            t = (y - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), y)
        return cross

    pts = list(vertices)
    for inside, cross in (
        (lambda p: p[0] >= window.xmin, at_x(window.xmin)),
        (lambda p: p[0] <= window.xmax, at_x(window.xmax)),
        (lambda p: p[1] >= window.ymin, at_y(window.ymin)),
        (lambda p: p[1] <= window.ymax, at_y(window.ymax)),
    ):
        if not pts:
            break
        pts = clip(pts, inside, cross)
    return pts
