"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (violations, unknown ids, no
leaves), 2 environment or I/O failure.  Option precedence is flags, then
the JSON file given by ``--config``, then built-in defaults.  Set
``CANOPY_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from . import __version__
from ._io import atomic_write_text
from .annotations import (
    AnnotationError,
    DatasetIndex,
    InvalidAnnotation,
    MalformedAnnotation,
    ParsedImage,
    build_index,
    parse_polygon_json,
    parse_voc_xml,
    read_index,
    validate,
    write_index,
)
from .augment import AugmentConfig, expand, plan as make_plan
from .damage import (
    analyze,
    disease_union,
    instances_from_polygons,
    load_instances,
    write_mask,
)
from .metrics import UnknownIdError, map_range, nms_per_image, parse_detections
from .records import ExamplePayload, SplitPlan, split_train_eval, write_shards

log = logging.getLogger("canopy")

DEFAULTS = {
    "seed": 42,
    "eval_fraction": 0.1,
    "num_shards": 1,
    "iou": 0.5,
    "nms_iou": 0.6,
    "max_kept": 200,
    "apply_nms": False,
    "render": False,
    "render_format": "pgm",
    "figures": False,
    "workers": 1,
    "categories": None,
    "split": None,
    "images": None,
    "detections": None,
    "name": None,
    "leaf_category": None,
    "disease_categories": None,
    "min_side": 0.5,
    "max_side": 1.0,
    "min_kept_fraction": 0.3,
    "retries": 10,
    "right_angles": False,
}

# never echoed into manifests: they do not influence output content
_NOT_ECHOED = {"out", "workers", "config", "command", "func"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_ECHOED}


def _parse_file(path: Path) -> Optional[ParsedImage]:
    """Parse one annotation file; None for JSON files that are not polygon documents."""
    raw = path.read_bytes()
    if path.suffix.lower() == ".xml":
        return parse_voc_xml(raw)
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedAnnotation(f"malformed JSON: {exc}") from None
    if not isinstance(data, dict) or "shapes" not in data:
        return None
    return parse_polygon_json(raw)


def annotation_files(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in (".xml", ".json"))


def parse_directory(root: Path) -> Tuple[List[ParsedImage], List[Tuple[Path, Exception]]]:
    parses, errors = [], []
    for path in annotation_files(root):
        try:
            parsed = _parse_file(path)
        except (OSError, UnicodeDecodeError, AnnotationError) as exc:
            errors.append((path, exc))
            continue
        if parsed is not None:
            parses.append(parsed)
    return parses, errors


def _split_names(value) -> Optional[List[str]]:
    if value is None:
        return None
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def load_dataset(path, categories=None) -> DatasetIndex:
    """Load a combined index file or parse an annotation directory.

    Raises CliError with exit code 2 for unreadable input and 1 for
    annotations that violate invariants.
    """
    path = Path(path)
    if not path.exists():
        raise CliError(2, f"{path}: no such file or directory")
    if path.is_file():
        try:
            return read_index(path.read_bytes())
        except OSError as exc:
            raise CliError(2, f"{path}: {exc}") from None
        except AnnotationError as exc:
            raise CliError(2, f"{path}: {exc}") from None
    parses, errors = parse_directory(path)
    if errors:
        code = 2 if any(not isinstance(e, InvalidAnnotation) for _, e in errors) else 1
        raise CliError(code, "\n".join(f"{p}: {e}" for p, e in errors))
    try:
        return build_index(parses, _split_names(categories))
    except ValueError as exc:
        raise CliError(1, str(exc)) from None


def _require_valid(index: DatasetIndex) -> None:
    violations = validate(index)
    if violations:
        raise CliError(1, "\n".join(str(v) for v in violations)
                       + f"\n{len(violations)} violation(s); nothing written")


def _out(args) -> Path:
    if not args.out:
        raise CliError(2, "--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_validate(args) -> int:
    root = Path(args.input)
    if not root.exists():
        raise CliError(2, f"{root}: no such file or directory")
    io_errors, violations = [], []
    if root.is_file():
        index = load_dataset(root)
    else:
        parses, errors = parse_directory(root)
        for path, exc in errors:
            if isinstance(exc, InvalidAnnotation):
                violations.append(f"{path}: {exc}")
            else:
                io_errors.append(f"{path}: {exc}")
        try:
            index = build_index(parses, _split_names(args.categories))
        except ValueError as exc:
            violations.append(str(exc))
            index = None
    if index is not None:
        violations.extend(str(v) for v in validate(index))
    for line in io_errors + violations:
        print(line)
    print(f"{len(violations)} violations")
    if io_errors:
        print(f"{len(io_errors)} unreadable file(s)", file=sys.stderr)
        return 2
    return 1 if violations else 0


def _make_split(args, index: DatasetIndex) -> SplitPlan:
    if getattr(args, "split", None):
        try:
            plan = SplitPlan.from_dict(json.loads(Path(args.split).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(2, f"{args.split}: {exc}") from None
        ids = {im.image_id for im in index.images}
        if set(plan.train) | set(plan.eval) != ids:
            raise CliError(1, f"{args.split}: split plan does not cover the index image ids")
        return plan
    return split_train_eval([im.image_id for im in index.images], args.eval_fraction, args.seed)


def run_split(args) -> int:
    index = load_dataset(args.input, args.categories)
    out = _out(args)
    plan = _make_split(args, index)
    atomic_write_text(out / "split.json", _dump(plan.to_dict()))
    print(f"train {len(plan.train)} / eval {len(plan.eval)}")
    return 0


def _payload(index: DatasetIndex, im, images_dir: Optional[Path]) -> ExamplePayload:
    image_bytes = b""
    if images_dir is not None:
        try:
            image_bytes = (images_dir / im.file_name).read_bytes()
        except OSError as exc:
            raise CliError(2, f"{im.file_name}: {exc}") from None
    boxes = tuple((lb.category_id,) + lb.box.as_tuple() for lb in im.boxes)
    labels = tuple(index.categories.name_of(lb.category_id) for lb in im.boxes)
    return ExamplePayload(im.file_name, im.width, im.height, image_bytes, boxes, labels)


def run_pack(args) -> int:
    index = load_dataset(args.input, args.categories)
    _require_valid(index)
    out = _out(args)
    plan = _make_split(args, index)
    images_dir = Path(args.images) if args.images else None
    by_id = {im.image_id: im for im in index.images}
    manifest = {"config": _echo(args), "split": plan.to_dict()}
    for subset, ids in (("train", plan.train), ("eval", plan.eval)):
        log.info("packing %d %s examples", len(ids), subset)
        payloads = [_payload(index, by_id[i], images_dir) for i in ids]
        shards = write_shards(payloads, out, subset, args.num_shards, workers=args.workers)
        manifest[subset] = {
            "count": len(payloads),
            "shards": [{"path": Path(s.path).name, "count": s.record_count} for s in shards],
        }
    atomic_write_text(out / "split.json", _dump(plan.to_dict()))
    atomic_write_text(out / "manifest.json", _dump(manifest))
    print(f"train {manifest['train']['count']} / eval {manifest['eval']['count']}"
          f" in {args.num_shards} shard(s) each")
    return 0


def run_augment(args) -> int:
    index = load_dataset(args.input, args.categories)
    _require_valid(index)
    out = _out(args)
    try:
        config = AugmentConfig(args.min_side, args.max_side, args.min_kept_fraction,
                               args.retries, bool(args.right_angles))
    except ValueError as exc:
        raise CliError(2, str(exc)) from None
    aug_plan = make_plan(index, args.seed, config)
    log.info("augment plan: %d items, seed %d", len(aug_plan.items), args.seed)
    result = expand(index, aug_plan, workers=args.workers)
    summary = {
        "config": _echo(args),
        "originals": result.originals,
        "variants": result.variants,
        "total": result.total,
        "dropped_annotations": result.dropped,
        "degenerate_crops": sum(it.degenerate_crop for it in aug_plan.items),
    }
    atomic_write_text(out / "augment_plan.json", _dump(aug_plan.to_dict()))
    atomic_write_text(out / "augmented_index.json", write_index(result.index))
    atomic_write_text(out / "augment_summary.json", _dump(summary))
    print(f"originals {result.originals} + variants {result.variants} = total {result.total}")
    return 0


def run_evaluate(args) -> int:
    index = load_dataset(args.input, args.categories)
    if not args.detections:
        raise CliError(2, "--detections is required")
    try:
        dets = parse_detections(Path(args.detections).read_text())
    except OSError as exc:
        raise CliError(2, f"{args.detections}: {exc}") from None
    except ValueError as exc:
        raise CliError(2, f"{args.detections}: {exc}") from None
    if args.apply_nms:
        dets = nms_per_image(dets, args.nms_iou, args.max_kept)
    out = _out(args)
    try:
        report = map_range(index, dets, match_iou=args.iou, workers=args.workers)
    except UnknownIdError as exc:
        raise CliError(1, str(exc)) from None
    name = args.name or Path(args.detections).stem
    data = {"config": _echo(args), **report.to_dict()}
    atomic_write_text(out / "eval_report.json", _dump(data))
    table = report.to_table(name)
    atomic_write_text(out / "eval_table.txt", table)
    if args.figures:
        from .plotting import write_eval_report
        write_eval_report(data, out)
    print(table, end="")
    return 0


def _resolve_category(value, names: Optional[List[str]], fallback):
    if value is None:
        return fallback
    if isinstance(value, int) or str(value).isdigit():
        return int(value)
    if names is None or value not in names:
        raise CliError(2, f"unknown category {value!r}")
    return names.index(value) + 1


def _damage_sources(path: Path):
    """Yield (image name, instances, category names or None)."""
    files = [path] if path.is_file() else sorted(
        p for p in path.rglob("*.json") if p.is_file())
    for f in files:
        try:
            raw = f.read_bytes()
            data = json.loads(raw)
        except (OSError, ValueError) as exc:
            raise CliError(2, f"{f}: {exc}") from None
        if isinstance(data, dict) and "instances" in data:
            try:
                yield f.stem, load_instances(raw), None
            except (ValueError, KeyError) as exc:
                raise CliError(2, f"{f}: {exc}") from None
        elif isinstance(data, dict) and "annotations" in data:
            try:
                index = read_index(raw)
            except AnnotationError as exc:
                raise CliError(2, f"{f}: {exc}") from None
            for im in index.images:
                pairs = [(lp.category_id, lp.polygon) for lp in im.polygons]
                yield (Path(im.file_name).stem, instances_from_polygons(pairs, im.width, im.height),
                       list(index.categories.names))
        elif isinstance(data, dict) and "shapes" in data:
            try:
                parsed = parse_polygon_json(raw)
            except AnnotationError as exc:
                raise CliError(2, f"{f}: {exc}") from None
            names = []
            for label, _ in parsed.objects:
                if label not in names:
                    names.append(label)
            pairs = [(names.index(label) + 1, poly) for label, poly in parsed.objects]
            yield (Path(parsed.file_name).stem,
                   instances_from_polygons(pairs, parsed.width, parsed.height), names)


def run_damage(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise CliError(2, f"{src}: no such file or directory")
    out = _out(args)
    images, leaves_found, renders = [], 0, []
    for image, instances, names in _damage_sources(src):
        default_leaf = 1
        if names is not None:
            default_leaf = next((names.index(n) + 1 for n in ("leave", "leaf") if n in names), 1)
        leaf_id = _resolve_category(args.leaf_category, names, default_leaf)
        if args.disease_categories is not None:
            disease_ids = {_resolve_category(v, names, None)
                           for v in _split_names(args.disease_categories)}
        else:
            disease_ids = {i.category_id for i in instances} - {leaf_id}
        result = analyze(instances, leaf_id, disease_ids)
        leaves_found += len(result.leaves)
        images.append({
            "image": image,
            "leaves": [r.to_dict() for r in result.leaves],
            "unowned": list(result.unowned),
        })
        if args.render:
            for r in result.leaves:
                leaf = instances[r.leaf_index]
                union = disease_union(leaf, [instances[d] for d in r.disease_indices])
                ext = args.render_format
                renders.append((out / "masks" / f"{image}_leaf{r.leaf_index}.{ext}", leaf.mask))
                renders.append((out / "masks" / f"{image}_leaf{r.leaf_index}_disease.{ext}", union))
    if leaves_found == 0:
        raise CliError(1, "no leaf instances found")
    data = {"config": _echo(args), "images": images}
    atomic_write_text(out / "damage_report.json", _dump(data))
    for path, mask in renders:
        write_mask(mask, path)
    if args.figures:
        from .plotting import write_damage_report
        write_damage_report(data, out)
    for img in images:
        for leaf in img["leaves"]:
            print(f"{img['image']} leaf {leaf['leaf_index']}: {leaf['damage_pct']:.2f}% "
                  f"({leaf['disease_area_px']}/{leaf['leaf_area_px']} px)")
        if img["unowned"]:
            print(f"{img['image']} unowned: {img['unowned']}")
    return 0


def run_report(args) -> int:
    from .plotting import write_damage_report, write_eval_report

    try:
        data = json.loads(Path(args.input).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(2, f"{args.input}: {exc}") from None
    out = _out(args)
    if "pr_curves" in data:
        paths = write_eval_report(data, out)
    elif "images" in data and all("leaves" in im for im in data["images"]):
        paths = write_damage_report(data, out)
    else:
        raise CliError(2, f"{args.input}: not an evaluation or damage report")
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canopy", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--input", required=True, help="annotation directory or index/report file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="worker threads (output does not depend on it)")
        p.add_argument("--categories", help="fixed comma-separated category order")
        return p

    command("validate", run_validate, "check annotations and report violations")

    p = command("split", run_split, "write a seeded train/eval split plan")
    p.add_argument("--eval-fraction", type=float)

    p = command("pack", run_pack, "write train/eval record shards and a manifest")
    p.add_argument("--eval-fraction", type=float)
    p.add_argument("--num-shards", type=int)
    p.add_argument("--split", help="existing split plan JSON")
    p.add_argument("--images", help="directory with image files to embed")

    p = command("augment", run_augment, "plan and apply rotation/crop variants")
    p.add_argument("--min-side", type=float)
    p.add_argument("--max-side", type=float)
    p.add_argument("--min-kept-fraction", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--right-angles", action="store_true", default=None)

    p = command("evaluate", run_evaluate, "AP/mAP/AR of detections against ground truth")
    p.add_argument("--detections", help="JSON lines detections file")
    p.add_argument("--iou", type=float, help="IOU threshold for TP/FP counts")
    p.add_argument("--apply-nms", action="store_true", default=None)
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--max-kept", type=int)
    p.add_argument("--name", help="row label in the results table")
    p.add_argument("--figures", action="store_true", default=None)

    p = command("damage", run_damage, "per-leaf disease damage percentages")
    p.add_argument("--leaf-category", help="leaf category id or name")
    p.add_argument("--disease-categories", help="comma-separated disease ids or names")
    p.add_argument("--render", action="store_true", default=None)
    p.add_argument("--render-format", choices=("pgm", "png"))
    p.add_argument("--figures", action="store_true", default=None)

    command("report", run_report, "render figures and TSV tables from a report JSON")
    return parser


def _apply_config(args) -> None:
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(2, f"{args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise CliError(2, f"{args.config}: config must be a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    for key, value in vars(args).items():
        if value is None:
            setattr(args, key, file_cfg.get(key, DEFAULTS.get(key)))
    if args.workers is None or args.workers < 1:
        args.workers = 1
    fraction = getattr(args, "eval_fraction", None)
    if fraction is not None and not 0 < fraction < 1:
        raise CliError(2, f"--eval-fraction must be in (0, 1), got {fraction}")


def main(argv=None) -> int:
    level = os.environ.get("CANOPY_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        _apply_config(args)
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
