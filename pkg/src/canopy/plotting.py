"""Report figures and delimited tables.

Figures are rendered with the Agg backend and written without a software
version tag, so reruns on the same installation give identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ._io import atomic_write_bytes, atomic_write_text  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "canopy",
}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format=Path(path).suffix.lstrip(".") or "png",
                metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _tsv(rows: List[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, delimiter="\t", lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)


def eval_table_rows(report: dict) -> List[list]:
    thresholds = report["iou_thresholds"]
    head = ["category_id", "name", "num_gt", "num_det", "tp", "fp", "ap_mean", "recall_mean"]
    head += [f"ap@{t:.2f}" for t in thresholds]
    rows = [head]
    for c in report["categories"]:
        aps = c["ap"] or [None] * len(thresholds)
        rows.append([c["id"], c["name"], c["num_gt"], c["num_det"], c["tp"], c["fp"],
                     _fmt(c["ap_mean"]), _fmt(c["recall_mean"])] + [_fmt(a) for a in aps])
    return rows


def plot_pr_curves(report: dict, path) -> None:
    names = {str(c["id"]): c["name"] for c in report["categories"]}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for cid, points in report["pr_curves"].items():
            if not points:
                continue
            r = [0.0] + [p["recall"] for p in points]
            p = [points[0]["precision"]] + [p["precision"] for p in points]
            ax.step(r, p, where="post", label=names.get(cid, cid))
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_title(f"Precision-recall at IOU {report['match_iou']:.2f}")
        if ax.has_data():
            ax.legend(loc="lower left", frameon=False)
        _save(fig, path)


def plot_ap_by_iou(report: dict, path) -> None:
    thresholds = report["iou_thresholds"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for c in report["categories"]:
            if c["ap"] is not None:
                ax.plot(thresholds, c["ap"], marker="o", ms=3, label=c["name"])
        ax.set_xlabel("IOU threshold")
        ax.set_ylabel("AP")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"mAP@[.50:.95] = {report['map']:.3f}")
        if ax.has_data():
            ax.legend(frameon=False)
        _save(fig, path)


def damage_table_rows(report: dict) -> List[list]:
    rows = [["image", "leaf_index", "disease_indices", "leaf_area_px", "disease_area_px",
             "damage_pct"]]
    for img in report["images"]:
        for leaf in img["leaves"]:
            rows.append([img["image"], leaf["leaf_index"],
                         " ".join(str(d) for d in leaf["disease_indices"]),
                         leaf["leaf_area_px"], leaf["disease_area_px"],
                         f"{leaf['damage_pct']:.4f}"])
    return rows


def plot_damage(report: dict, path) -> None:
    labels, values = [], []
    for img in report["images"]:
        for leaf in img["leaves"]:
            labels.append(f"{img['image']}#{leaf['leaf_index']}")
            values.append(leaf["damage_pct"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(labels) + 1.5), 3.2))
        ax.bar(range(len(values)), values, color="#8c2d04")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=60, ha="right")
        ax.set_ylabel("Damaged area (%)")
        ax.set_ylim(0, max([5.0] + [v * 1.15 for v in values]))
        _save(fig, path)


def write_eval_report(report: dict, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [out_dir / "per_class.tsv", out_dir / "pr_curves.png", out_dir / "ap_by_iou.png"]
    atomic_write_text(paths[0], _tsv(eval_table_rows(report)))
    plot_pr_curves(report, paths[1])
    plot_ap_by_iou(report, paths[2])
    return paths


def write_damage_report(report: dict, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [out_dir / "damage.tsv", out_dir / "damage.png"]
    atomic_write_text(paths[0], _tsv(damage_table_rows(report)))
    plot_damage(report, paths[1])
    return paths
