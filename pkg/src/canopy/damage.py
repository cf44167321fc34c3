"""Per-leaf disease damage from instance masks.

Each disease instance is assigned to the leaf whose ROI strictly contains
its ROI; the owned disease masks are OR-ed together, restricted to the leaf
mask, and the white pixels are counted.  Damage is
``100 * disease_pixels / leaf_pixels``.
"""

from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ._io import atomic_write_bytes
from .geometry import Polygon, Roi, contains_strict


class BinaryMask:
    """Row-major boolean bitmap of shape ``(height, width)``."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.array(bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        self.bits = arr

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={mask_area(self)})"


def _roi_pixel_window(roi: Roi, width: int, height: int) -> Tuple[slice, slice]:
    # pixel j is inside when its centre j + 0.5 lies in [x1, x2]
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    c0 = int(np.searchsorted(cols, roi.x1, side="left"))
    c1 = int(np.searchsorted(cols, roi.x2, side="right"))
    r0 = int(np.searchsorted(rows, roi.y1, side="left"))
    r1 = int(np.searchsorted(rows, roi.y2, side="right"))
    return slice(r0, r1), slice(c0, c1)


class InstanceMask:
    """One predicted or annotated instance; pixels outside ``roi`` are cleared."""

    __slots__ = ("category_id", "roi", "mask", "score")

    def __init__(self, category_id: int, roi: Roi, mask: BinaryMask, score: float = 1.0):
        rs, cs = _roi_pixel_window(roi, mask.width, mask.height)
        inside = np.zeros_like(mask.bits)
        inside[rs, cs] = True
        self.category_id = category_id
        self.roi = roi
        self.mask = BinaryMask(mask.bits & inside)
        self.score = score

    def __repr__(self):
        return f"InstanceMask(category_id={self.category_id}, roi={self.roi.as_list()}, score={self.score})"


def _collinear(vertices: Sequence[Tuple[float, float]]) -> bool:
    pts = [(Fraction(x), Fraction(y)) for x, y in vertices]
    x0, y0 = pts[0]
    for (x1, y1), (x2, y2) in zip(pts[1:], pts[2:]):
        if (x1 - x0) * (y2 - y0) != (x2 - x0) * (y1 - y0):
            return False
    return True


def _edge_crossings(vertices, y: float) -> List[float]:
    xs = []
    n = len(vertices)
    for i in range(n):
        xi, yi = vertices[i]
        xj, yj = vertices[i - 1]
        if (yi > y) != (yj > y):
            xs.append((xj - xi) * (y - yi) / (yj - yi) + xi)
    return xs


def polygon_to_mask(p: Polygon, width: int, height: int) -> BinaryMask:
    """Scanline fill with the even-odd rule, sampled at pixel centres.

    Pixel ``(x, y)`` is set when ``(x + 0.5, y + 0.5)`` is inside ``p``.
    Polygons whose vertices are all collinear enclose nothing.
    """
    bits = np.zeros((height, width), dtype=bool)
    verts = p.vertices
    if _collinear(verts):
        return BinaryMask(bits)
    centres = np.arange(width) + 0.5
    ys = [v[1] for v in verts]
    r0 = max(0, int(np.floor(min(ys))) - 1)
    r1 = min(height, int(np.ceil(max(ys))) + 1)
    for row in range(r0, r1):
        xs = sorted(_edge_crossings(verts, row + 0.5))
        for a, b in zip(xs[0::2], xs[1::2]):
            # centres c with a <= c < b
            lo = int(np.searchsorted(centres, a, side="left"))
            hi = int(np.searchsorted(centres, b, side="left"))
            bits[row, lo:hi] = True
    return BinaryMask(bits)


def mask_area(m: BinaryMask) -> int:
    return int(np.count_nonzero(m.bits))


def mask_to_roi(m: BinaryMask) -> Roi:
    """Tight ``[y1, x1, y2, x2]`` box of set pixels; ``y2``/``x2`` exclusive."""
    rows = np.flatnonzero(m.bits.any(axis=1))
    cols = np.flatnonzero(m.bits.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no roi")
    return Roi(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def union_masks(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("union of zero masks")
    shape = masks[0].bits.shape
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.bits.shape != shape:
            raise ValueError(f"mask dimension mismatch: {m.bits.shape} vs {shape}")
        out |= m.bits
    return BinaryMask(out)


@dataclass(frozen=True)
class Assignment:
    owners: Tuple[Tuple[int, Tuple[int, ...]], ...]
    unowned: Tuple[int, ...]


def assign(
    instances: Sequence[InstanceMask], leaf_category: int, disease_categories: Iterable[int]
) -> Assignment:
    """Give each disease to the smallest leaf whose ROI strictly contains it.

    Returns ``(leaf index, owned disease indices)`` for every leaf, in
    instance order, plus the indices of diseases no leaf contains.
    """
    diseases_ids = set(disease_categories)
    leaves = [i for i, inst in enumerate(instances) if inst.category_id == leaf_category]
    owned = {i: [] for i in leaves}
    unowned = []
    for d, inst in enumerate(instances):
        if inst.category_id not in diseases_ids or inst.category_id == leaf_category:
            continue
        candidates = [l for l in leaves if contains_strict(instances[l].roi, inst.roi)]
        if not candidates:
            unowned.append(d)
            continue
        owner = min(candidates, key=lambda l: (instances[l].roi.area, l))
        owned[owner].append(d)
    return Assignment(tuple((l, tuple(owned[l])) for l in leaves), tuple(unowned))


@dataclass(frozen=True)
class LeafDamageReport:
    leaf_index: int
    disease_indices: Tuple[int, ...]
    leaf_area_px: int
    disease_area_px: int
    damage_pct: float

    def to_dict(self) -> dict:
        return {
            "leaf_index": self.leaf_index,
            "disease_indices": list(self.disease_indices),
            "leaf_area_px": self.leaf_area_px,
            "disease_area_px": self.disease_area_px,
            "damage_pct": self.damage_pct,
        }


def disease_union(leaf: InstanceMask, diseases: Sequence[InstanceMask]) -> BinaryMask:
    """OR of the disease masks, limited to pixels of the leaf mask."""
    if not diseases:
        return BinaryMask.zeros(leaf.mask.width, leaf.mask.height)
    return BinaryMask(union_masks([d.mask for d in diseases]).bits & leaf.mask.bits)


def damage_percentage(
    leaf: InstanceMask,
    diseases: Sequence[InstanceMask],
    leaf_index: int = 0,
    disease_indices: Optional[Sequence[int]] = None,
) -> LeafDamageReport:
    leaf_area = mask_area(leaf.mask)
    if leaf_area == 0:
        raise ValueError(f"leaf {leaf_index} has an empty mask")
    disease_area = mask_area(disease_union(leaf, diseases))
    if disease_indices is None:
        disease_indices = range(len(diseases))
    return LeafDamageReport(leaf_index, tuple(disease_indices), leaf_area, disease_area,
                            100.0 * disease_area / leaf_area)


@dataclass(frozen=True)
class ImageDamage:
    leaves: Tuple[LeafDamageReport, ...]
    unowned: Tuple[int, ...]
    assignment: Assignment


def analyze(
    instances: Sequence[InstanceMask], leaf_category: int, disease_categories: Iterable[int]
) -> ImageDamage:
    """Assignment followed by a damage report for every leaf with a non-empty mask."""
    a = assign(instances, leaf_category, disease_categories)
    reports = []
    for l, owned in a.owners:
        if mask_area(instances[l].mask) == 0:
            continue
        reports.append(damage_percentage(instances[l], [instances[d] for d in owned], l, owned))
    return ImageDamage(tuple(reports), a.unowned, a)


def render_mask(m: BinaryMask) -> bytes:
    """Binary PGM (P5) with set pixels at 255."""
    header = f"P5\n{m.width} {m.height}\n255\n".encode("ascii")
    return header + (m.bits.astype(np.uint8) * 255).tobytes()


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def parse_pgm(data: bytes) -> BinaryMask:
    """Read a P5 graymap without header comments; non-zero pixels are set."""
    m = _PGM_HEADER.match(data)
    if not m:
        raise ValueError("not a binary PGM (P5) image")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pixels = np.frombuffer(data[m.end():m.end() + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError("truncated PGM payload")
    return BinaryMask(pixels.reshape(height, width) != 0)


def write_mask(m: BinaryMask, path) -> None:
    """Write a mask as PGM, or as PNG when ``path`` ends in ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.image as mpimg

        buf = io.BytesIO()
        mpimg.imsave(buf, m.bits.astype(np.uint8) * 255, cmap="gray", vmin=0, vmax=255,
                     format="png", metadata={"Software": None})
        atomic_write_bytes(path, buf.getvalue())
    else:
        atomic_write_bytes(path, render_mask(m))


def rle_decode(rle: dict) -> BinaryMask:
    """Decode ``{size: [h, w], counts: [...]}``; runs alternate unset/set, column-major."""
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError):
        raise ValueError("rle must have size [h, w] and integer counts") from None
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise ValueError(f"rle counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    return BinaryMask(flat.reshape((w, h)).T)


def rle_encode(m: BinaryMask) -> dict:
    flat = m.bits.T.reshape(-1)
    counts, current, run = [], False, 0
    for v in flat:
        if bool(v) == current:
            run += 1
        else:
            counts.append(run)
            current, run = bool(v), 1
    counts.append(run)
    return {"size": [m.height, m.width], "counts": counts}


def load_instances(document) -> List[InstanceMask]:
    """Parse ``{instances: [{category_id, score, roi, mask}]}``."""
    data = json.loads(document)
    out = []
    for k, inst in enumerate(data["instances"]):
        try:
            mask = rle_decode(inst["mask"])
            out.append(InstanceMask(int(inst["category_id"]), Roi.from_list(inst["roi"]),
                                    mask, float(inst.get("score", 1.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"instances[{k}]: {exc}") from None
    return out


def dump_instances(instances: Sequence[InstanceMask]) -> str:
    return json.dumps({"instances": [
        {"category_id": i.category_id, "score": i.score, "roi": i.roi.as_list(),
         "mask": rle_encode(i.mask)}
        for i in instances
    ]}) + "\n"


def instances_from_polygons(polygons, width: int, height: int) -> List[InstanceMask]:
    """Rasterize ``(category_id, Polygon)`` pairs into instances, skipping empty masks."""
    out = []
    for cid, poly in polygons:
        m = polygon_to_mask(poly, width, height)
        if mask_area(m) == 0:
            continue
        out.append(InstanceMask(cid, mask_to_roi(m), m, 1.0))
    return out
