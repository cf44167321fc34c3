import random

import pytest
from hypothesis import given, settings, strategies as st

from canopy.annotations import CategoryMap, DatasetIndex, ImageAnnotation, LabeledBox, LabeledPolygon
from canopy.augment import (
    AugmentConfig,
    AugmentPlan,
    RIGHT_ANGLES,
    apply_crop,
    apply_rotation,
    expand,
    plan,
    variant_name,
)
from canopy.geometry import BBox, Polygon, area


def synthetic_index(n, seed=0, width=320, height=240):
    rng = random.Random(seed)
    images = []
    for k in range(1, n + 1):
        boxes = []
        for _ in range(rng.randint(0, 4)):
            x0, y0 = rng.randint(0, width - 20), rng.randint(0, height - 20)
            boxes.append(LabeledBox(rng.randint(1, 3),
                                    BBox(x0, y0, rng.randint(x0 + 5, width), rng.randint(y0 + 5, height))))
        images.append(ImageAnnotation(k, f"img{k:05d}.jpg", width, height, tuple(boxes)))
    return DatasetIndex(CategoryMap(("red_rust", "helopeltis", "red_spider_mite")), images)


def one_image(boxes=(), polygons=(), width=100, height=100):
    return ImageAnnotation(1, "leaf.jpg", width, height, tuple(boxes), tuple(polygons))


class TestPlan:
    def test_1500_images_total_4500(self):
        p = plan(synthetic_index(1500), seed=42)
        assert p.variant_count == 3000
        assert len(p.items) + p.variant_count == 4500

    def test_450_images_give_900_variants(self):
        assert plan(synthetic_index(450), seed=1).variant_count == 900

    def test_deterministic(self):
        idx = synthetic_index(50)
        assert plan(idx, 7) == plan(idx, 7)
        assert plan(idx, 7) != plan(idx, 8)

    def test_angles_in_range(self):
        for it in plan(synthetic_index(200), 3).items:
            assert -180.0 <= it.angle < 180.0

    def test_right_angle_mode(self):
        p = plan(synthetic_index(100), 3, AugmentConfig(right_angles=True))
        assert {it.angle for it in p.items} <= set(RIGHT_ANGLES)

    def test_windows_inside_image_and_large_enough(self):
        idx = synthetic_index(200)
        for it in plan(idx, 11).items:
            w = it.window
            assert 0 <= w.xmin and 0 <= w.ymin and w.xmax <= 320 and w.ymax <= 240
            assert w.width >= 160 and w.height >= 120
            assert w.as_tuple() == tuple(int(v) for v in w.as_tuple())

    def test_windows_keep_some_ground_truth(self):
        idx = synthetic_index(200)
        for it in plan(idx, 5).items:
            ann = idx.image(it.image_id)
            if ann.boxes and not it.degenerate_crop:
                cropped, _ = apply_crop(ann, it.window)
                assert cropped.boxes

    def test_degenerate_crop_uses_full_image(self):
        # a sliver no half-size window can keep 99% of
        ann = one_image([LabeledBox(1, BBox(0, 0, 100, 1))])
        idx = DatasetIndex(CategoryMap(("x",)), [ann])
        cfg = AugmentConfig(min_side=0.5, max_side=0.6, min_kept_fraction=0.99, retries=3)
        item = plan(idx, 0, cfg).items[0]
        assert item.degenerate_crop
        assert item.window == BBox(0, 0, 100, 100)

    def test_dict_roundtrip(self):
        p = plan(synthetic_index(20), 9)
        assert AugmentPlan.from_dict(p.to_dict()) == p


class TestRotation:
    def test_zero_identity(self):
        ann = one_image([LabeledBox(1, BBox(10, 20, 30, 40))])
        out, dropped = apply_rotation(ann, 0.0)
        assert out == ann and dropped == 0

    def test_ninety(self):
        ann = one_image([LabeledBox(1, BBox(10, 20, 30, 40))])
        out, _ = apply_rotation(ann, 90.0)
        assert out.boxes[0].box == BBox(20, 70, 40, 90)

    def test_one_eighty(self):
        ann = one_image([LabeledBox(1, BBox(10, 20, 30, 40))], width=200, height=100)
        out, _ = apply_rotation(ann, -180.0)
        assert (out.width, out.height) == (200, 100)
        assert out.boxes[0].box == BBox(170, 60, 190, 80)

    def test_canvas_swaps_at_ninety(self):
        out, _ = apply_rotation(one_image(width=640, height=480), 90.0)
        assert (out.width, out.height) == (480, 640)

    def test_polygon_rotates_with_image(self):
        tri = Polygon(((10, 10), (30, 10), (10, 40)))
        out, _ = apply_rotation(one_image(polygons=[LabeledPolygon(2, tri)]), 90.0)
        # (dx, dy) -> (dy, -dx) about (50, 50)
        assert out.polygons[0].polygon.vertices == ((10, 90), (10, 70), (40, 90))

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-180, 179.99), st.integers(0, 80), st.integers(0, 80))
    def test_boxes_stay_on_canvas(self, angle, x, y):
        ann = one_image([LabeledBox(1, BBox(x, y, x + 20, y + 20))])
        out, dropped = apply_rotation(ann, angle)
        assert dropped == 0
        b = out.boxes[0].box
        assert 0 <= b.xmin < b.xmax <= out.width and 0 <= b.ymin < b.ymax <= out.height


class TestCrop:
    def test_full_window_identity(self):
        ann = one_image([LabeledBox(1, BBox(10, 10, 20, 20))])
        out, dropped = apply_crop(ann, BBox(0, 0, 100, 100))
        assert out == ann and dropped == 0

    def test_disjoint_box_dropped(self):
        ann = one_image([LabeledBox(1, BBox(10, 10, 20, 20))])
        out, dropped = apply_crop(ann, BBox(50, 50, 100, 100))
        assert out.boxes == () and dropped == 1
        assert (out.width, out.height) == (50, 50)

    def test_straddling_box_clipped(self):
        ann = one_image([LabeledBox(1, BBox(40, 40, 60, 60))])
        out, _ = apply_crop(ann, BBox(50, 50, 100, 100))
        # 25% of the box survives, below the 30% default
        assert out.boxes == ()
        out, _ = apply_crop(ann, BBox(45, 0, 100, 100))
        assert out.boxes[0].box == BBox(0, 40, 15, 60)

    def test_polygon_clipped(self):
        square = Polygon(((0, 0), (40, 0), (40, 40), (0, 40)))
        out, _ = apply_crop(one_image(polygons=[LabeledPolygon(1, square)]), BBox(20, 0, 100, 100))
        verts = set(out.polygons[0].polygon.vertices)
        assert verts == {(0, 0), (20, 0), (20, 40), (0, 40)}

    def test_window_outside_image(self):
        with pytest.raises(ValueError):
            apply_crop(one_image(), BBox(50, 50, 150, 100))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(20, 50), st.integers(20, 50))
    def test_survivors_inside_window(self, wx, wy, ww, wh):
        idx = synthetic_index(1, seed=wx * 100 + wy, width=100, height=100)
        window = BBox(wx, wy, wx + ww, wy + wh)
        out, dropped = apply_crop(idx.images[0], window)
        assert len(out.boxes) + dropped == len(idx.images[0].boxes)
        for lb in out.boxes:
            assert 0 <= lb.box.xmin and lb.box.xmax <= ww and 0 <= lb.box.ymin and lb.box.ymax <= wh
            assert area(lb.box) > 0


class TestExpand:
    def test_names(self):
        assert variant_name("leaf_01.jpg", "rot") == "leaf_01__rot.jpg"
        assert variant_name("noext", "crop") == "noext__crop"

    def test_counts_and_ids(self):
        idx = synthetic_index(30)
        res = expand(idx, plan(idx, 4))
        assert (res.originals, res.variants, res.total) == (30, 60, 90)
        assert [im.image_id for im in res.index.images] == list(range(1, 91))
        names = [im.file_name for im in res.index.images]
        assert names == sorted(names) and len(set(names)) == 90

    def test_workers_do_not_change_result(self):
        idx = synthetic_index(40)
        p = plan(idx, 4)
        a, b = expand(idx, p, workers=1), expand(idx, p, workers=8)
        assert a.index == b.index and a.dropped == b.dropped

    def test_originals_untouched(self):
        idx = synthetic_index(5)
        res = expand(idx, plan(idx, 2))
        by_name = {im.file_name: im for im in res.index.images}
        for im in idx.images:
            assert by_name[im.file_name].boxes == im.boxes
