"""Detection evaluation: matching, precision/recall, AP, mAP and NMS.

AP follows the COCO evaluator: detections are matched greedily per image
and category in descending score order, the precision/recall curve is
swept over the globally score-ranked detections, and precision is sampled
at the 101 recall levels 0.00, 0.01, ..., 1.00 from its monotone envelope.
A detection matches when its IOU with a ground truth is at least the
threshold.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

from .annotations import DatasetIndex
from .geometry import BBox, iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = 101


class UnknownIdError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    score: float
    box: BBox

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")
        if self.category_id < 1:
            raise ValueError(f"detection category_id must be >= 1, got {self.category_id}")


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    matches: Tuple[Tuple[int, int, float], ...] = ()


def _rank(dets: Sequence) -> List[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def _greedy(gt_boxes: Sequence[BBox], det_boxes: Sequence[BBox], threshold: float):
    """Match detections (already in rank order) to ground truths.

    Returns, for each detection, ``(gt_index, iou)`` or ``(-1, best_iou)``.
    """
    taken = [False] * len(gt_boxes)
    out = []
    for d in det_boxes:
        best, best_iou = -1, -1.0
        for g, gb in enumerate(gt_boxes):
            if taken[g]:
                continue
            v = iou(d, gb)
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0 and best_iou >= threshold:
            taken[best] = True
            out.append((best, best_iou))
        else:
            out.append((-1, max(best_iou, 0.0)))
    return out


def _box(item) -> BBox:
    return item if isinstance(item, BBox) else item.box


def match(gts: Sequence, dets: Sequence[Detection], iou_threshold: float) -> MatchResult:
    """Greedy matching for one image and one category.

    ``gts`` may hold :class:`~canopy.annotations.LabeledBox` items or bare
    boxes.  Indices in ``matches`` refer to the input sequences.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = _rank(dets)
    gt_boxes = [_box(g) for g in gts]
    result = _greedy(gt_boxes, [dets[i].box for i in order], iou_threshold)
    matches = tuple((order[k], g, v) for k, (g, v) in enumerate(result) if g >= 0)
    tp = len(matches)
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, matches)


def precision(m: MatchResult) -> float:
    denom = m.tp + m.fp
    return m.tp / denom if denom else 0.0


def recall(m: MatchResult) -> float:
    denom = m.tp + m.fn
    return m.tp / denom if denom else 0.0


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision, score) after each detection in rank order."""

    points: Tuple[Tuple[float, float, float], ...]

    def to_list(self) -> list:
        return [{"recall": r, "precision": p, "score": s} for r, p, s in self.points]


def interpolated_ap(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from rank-ordered TP flags.

    Recall levels are compared as integers (``tp * 100 >= k * num_gt``) so
    the sampling is exact.
    """
    if num_gt <= 0 or not tp_flags:
        return 0.0
    cum_tp, precisions, tps = 0, [], []
    for i, flag in enumerate(tp_flags, start=1):
        cum_tp += bool(flag)
        tps.append(cum_tp)
        precisions.append(cum_tp / i)
    for i in range(len(precisions) - 2, -1, -1):
        if precisions[i + 1] > precisions[i]:
            precisions[i] = precisions[i + 1]
    total, i = 0.0, 0
    for k in range(RECALL_LEVELS):
        while i < len(tps) and tps[i] * (RECALL_LEVELS - 1) < k * num_gt:
            i += 1
        if i == len(tps):
            break
        total += precisions[i]
    return total / RECALL_LEVELS


def _ranked_flags(
    gts: Mapping[int, Sequence[BBox]], dets: Sequence[Detection], iou_threshold: float
) -> Tuple[List[int], List[bool]]:
    by_image: Dict[int, List[int]] = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(i)
    flags = [False] * len(dets)
    for image_id, members in by_image.items():
        members.sort(key=lambda i: -dets[i].score)
        result = _greedy(list(gts.get(image_id, ())), [dets[i].box for i in members], iou_threshold)
        for i, (g, _) in zip(members, result):
            flags[i] = g >= 0
    order = _rank(dets)
    return order, [flags[i] for i in order]


def pr_curve(
    gts: Mapping[int, Sequence[BBox]], dets: Sequence[Detection], iou_threshold: float
) -> PRCurve:
    num_gt = sum(len(v) for v in gts.values())
    order, flags = _ranked_flags(gts, dets, iou_threshold)
    points, tp = [], 0
    for n, (i, f) in enumerate(zip(order, flags), start=1):
        tp += f
        points.append((tp / num_gt if num_gt else 0.0, tp / n, dets[i].score))
    return PRCurve(tuple(points))


def average_precision(
    gts: Mapping[int, Sequence[BBox]], dets: Sequence[Detection], iou_threshold: float
) -> float:
    """AP for a single category.

    Args:
        gts: ground-truth boxes keyed by image id.
        dets: detections of the same category, any number of images.
        iou_threshold: minimum IOU for a match.

    Returns 0.0 when there is no ground truth.
    """
    num_gt = sum(len(v) for v in gts.values())
    _, flags = _ranked_flags(gts, dets, iou_threshold)
    return interpolated_ap(flags, num_gt)


def simple_map(per_class: Sequence[Tuple[int, int]]) -> float:
    """Mean over classes of TP / (TP + FP); empty classes contribute 0."""
    if not per_class:
        raise ValueError("simple_map needs at least one class")
    return sum(tp / (tp + fp) if tp + fp else 0.0 for tp, fp in per_class) / len(per_class)


@dataclass
class CategoryResult:
    category_id: int
    name: str
    num_gt: int
    num_det: int
    ap: Tuple[float, ...]
    recall: Tuple[float, ...]
    tp: int
    fp: int

    @property
    def ap_mean(self) -> float:
        return sum(self.ap) / len(self.ap)

    @property
    def recall_mean(self) -> float:
        return sum(self.recall) / len(self.recall)


@dataclass
class EvalReport:
    """Evaluation summary.

    Categories without ground truth are listed but excluded from ``map``,
    ``ap50`` and ``ar``.  ``simple_map`` averages TP/(TP+FP) at
    ``match_iou`` over every category.
    """

    iou_thresholds: Tuple[float, ...]
    categories: List[CategoryResult]
    map: float
    ap50: float
    ar: float
    simple_map: float
    match_iou: float
    pr_curves: Dict[int, PRCurve] = field(default_factory=dict)

    def ap_at(self, category_id: int, threshold: float) -> float:
        cat = next(c for c in self.categories if c.category_id == category_id)
        return cat.ap[self.iou_thresholds.index(threshold)]

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "map": self.map,
            "ap50": self.ap50,
            "ar": self.ar,
            "simple_map": self.simple_map,
            "match_iou": self.match_iou,
            "categories": [
                {
                    "id": c.category_id,
                    "name": c.name,
                    "num_gt": c.num_gt,
                    "num_det": c.num_det,
                    "ap": list(c.ap) if c.num_gt else None,
                    "ap_mean": c.ap_mean if c.num_gt else None,
                    "recall": list(c.recall) if c.num_gt else None,
                    "recall_mean": c.recall_mean if c.num_gt else None,
                    "tp": c.tp,
                    "fp": c.fp,
                }
                for c in self.categories
            ],
            "pr_curves": {str(k): v.to_list() for k, v in sorted(self.pr_curves.items())},
        }

    def to_table(self, model: str = "detections") -> str:
        """Plain-text table laid out like a model evaluation results table."""
        head = ("Model", "Average Precision(IOU=0.50:0.95)",
                "Average Recall(IOU=0.50:0.95)", "mAP")
        rows = [(model, f"{self.map:.3f}", f"{self.ar:.3f}", f"{self.map:.4f}")]
        for c in self.categories:
            if c.num_gt:
                rows.append((f"  {c.name}", f"{c.ap_mean:.3f}", f"{c.recall_mean:.3f}", ""))
            else:
                rows.append((f"  {c.name}", "n/a", "n/a", ""))
        widths = [max(len(r[i]) for r in rows + [head]) for i in range(4)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                 for r in [head] + rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append(f"AP@0.50 {self.ap50:.4f}   simple mAP@{self.match_iou:.2f} {self.simple_map:.4f}")
        return "\n".join(lines) + "\n"


def _ground_truth(index: DatasetIndex) -> Dict[int, Dict[int, List[BBox]]]:
    """Boxes per category per image; polygons contribute their bounding boxes."""
    out: Dict[int, Dict[int, List[BBox]]] = {cid: {} for cid, _ in index.categories.items()}
    for im in index.images:
        for lb in im.boxes:
            out[lb.category_id].setdefault(im.image_id, []).append(lb.box)
        for lp in im.polygons:
            x0, y0, x1, y1 = lp.polygon.bounds()
            if x0 < x1 and y0 < y1:
                out[lp.category_id].setdefault(im.image_id, []).append(BBox(x0, y0, x1, y1))
    return out


def check_detections(index: DatasetIndex, dets: Sequence[Detection]) -> None:
    image_ids = {im.image_id for im in index.images}
    for k, d in enumerate(dets):
        if d.image_id not in image_ids:
            raise UnknownIdError(f"detection {k}: unknown image id {d.image_id}")
        if d.category_id not in index.categories:
            raise UnknownIdError(f"detection {k}: unknown category id {d.category_id}")


def map_range(
    index: DatasetIndex,
    dets: Sequence[Detection],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    match_iou: float = 0.5,
    workers: int = 1,
) -> EvalReport:
    """AP per category at every IOU threshold, and their means."""
    check_detections(index, dets)
    thresholds = tuple(thresholds)
    gt = _ground_truth(index)
    by_cat: Dict[int, List[Detection]] = {cid: [] for cid in gt}
    for d in dets:
        by_cat[d.category_id].append(d)

    def evaluate(cid: int) -> Tuple[CategoryResult, PRCurve]:
        cat_gt, cat_dets = gt[cid], by_cat[cid]
        num_gt = sum(len(v) for v in cat_gt.values())
        aps, recalls = [], []
        for t in thresholds:
            _, flags = _ranked_flags(cat_gt, cat_dets, t)
            aps.append(interpolated_ap(flags, num_gt))
            recalls.append(sum(flags) / num_gt if num_gt else 0.0)
        _, flags = _ranked_flags(cat_gt, cat_dets, match_iou)
        tp = sum(flags)
        result = CategoryResult(cid, index.categories.name_of(cid), num_gt, len(cat_dets),
                                tuple(aps), tuple(recalls), tp, len(cat_dets) - tp)
        return result, pr_curve(cat_gt, cat_dets, match_iou)

    cids = [cid for cid, _ in index.categories.items()]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, cids))
    else:
        results = [evaluate(c) for c in cids]
    cats = [r for r, _ in results]
    scored = [c for c in cats if c.num_gt]
    if scored:
        mean_ap = sum(c.ap_mean for c in scored) / len(scored)
        ar = sum(c.recall_mean for c in scored) / len(scored)
        ap50 = (sum(c.ap[thresholds.index(0.5)] for c in scored) / len(scored)
                if 0.5 in thresholds else float("nan"))
    else:
        mean_ap = ar = ap50 = 0.0
    smap = simple_map([(c.tp, c.fp) for c in cats]) if cats else 0.0
    return EvalReport(thresholds, cats, mean_ap, ap50, ar, smap, match_iou,
                      {cid: curve for cid, (_, curve) in zip(cids, results)})


def nms(dets: Sequence[Detection], iou_threshold: float, max_kept: int = 200) -> List[Detection]:
    """Class-aware greedy non-maximum suppression for a single image."""
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if len({d.image_id for d in dets}) > 1:
        raise ValueError("nms expects detections from a single image")
    kept: List[Detection] = []
    for i in _rank(dets):
        d = dets[i]
        if len(kept) >= max_kept:
            break
        if all(k.category_id != d.category_id or iou(k.box, d.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def nms_per_image(dets: Sequence[Detection], iou_threshold: float, max_kept: int = 200) -> List[Detection]:
    """Apply :func:`nms` image by image, preserving image first-seen order."""
    groups: Dict[int, List[Detection]] = {}
    for d in dets:
        groups.setdefault(d.image_id, []).append(d)
    out = []
    for members in groups.values():
        out.extend(nms(members, iou_threshold, max_kept))
    return out


def parse_detections(text: str) -> List[Detection]:
    """Read JSON lines ``{image_id, category_id, score, bbox: [xmin, ymin, xmax, ymax]}``."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            out.append(Detection(int(row["image_id"]), int(row["category_id"]),
                                 float(row["score"]), BBox(*row["bbox"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"detections line {lineno}: {exc}") from None
    return out


def format_detections(dets: Sequence[Detection]) -> str:
    return "".join(
        json.dumps({"image_id": d.image_id, "category_id": d.category_id,
                    "score": d.score, "bbox": list(d.box.as_tuple())}) + "\n"
        for d in dets
    )
