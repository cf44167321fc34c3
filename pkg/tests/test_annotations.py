import json

import pytest
from hypothesis import given, settings, strategies as st

from canopy.annotations import (
    CategoryMap,
    DatasetIndex,
    ImageAnnotation,
    InvalidAnnotation,
    LabeledBox,
    LabeledPolygon,
    MalformedAnnotation,
    ParsedImage,
    build_index,
    parse_polygon_json,
    parse_voc_xml,
    read_index,
    validate,
    write_index,
)
from canopy.geometry import BBox, Polygon


def voc(filename="img1.jpg", width=640, height=480, objects=()):
    objs = "".join(
        f"<object><name>{n}</name><pose>Unspecified</pose><difficult>0</difficult>"
        f"<bndbox><xmin>{b[0]}</xmin><ymin>{b[1]}</ymin><xmax>{b[2]}</xmax><ymax>{b[3]}</ymax></bndbox>"
        "</object>"
        for n, b in objects
    )
    return (
        f"<annotation><folder>images</folder><filename>{filename}</filename>"
        f"<size><width>{width}</width><height>{height}</height><depth>3</depth></size>"
        f"<segmented>0</segmented>{objs}</annotation>"
    )


def labelme(path="img2.jpg", width=100, height=80, shapes=()):
    return json.dumps({
        "version": "4.5.6",
        "flags": {},
        "shapes": [
            {"label": l, "points": pts, "group_id": None, "shape_type": t, "flags": {}}
            for l, pts, t in shapes
        ],
        "imagePath": path,
        "imageData": "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mNk",
        "imageHeight": height,
        "imageWidth": width,
    })


SQUARE = [[10, 10], [30, 10], [30, 30], [10, 30]]


class TestParseVoc:
    def test_single_object(self):
        p = parse_voc_xml(voc(objects=[("red_rust", (10, 20, 110, 220))]))
        assert (p.file_name, p.width, p.height) == ("img1.jpg", 640, 480)
        assert p.objects == [("red_rust", BBox(10, 20, 110, 220))]

    def test_no_objects(self):
        p = parse_voc_xml(voc())
        assert p.objects == [] and (p.width, p.height) == (640, 480)

    def test_document_order(self):
        objs = [("b", (1, 1, 5, 5)), ("a", (2, 2, 6, 6)), ("b", (0, 0, 3, 3))]
        assert [n for n, _ in parse_voc_xml(voc(objects=objs)).objects] == ["b", "a", "b"]

    def test_decimal_coordinates(self):
        p = parse_voc_xml(voc(objects=[("x", ("10.5", "2", "30.25", "4"))]))
        assert p.objects[0][1] == BBox(10.5, 2, 30.25, 4)

    def test_inverted_box(self):
        with pytest.raises(InvalidAnnotation, match="inverted box"):
            parse_voc_xml(voc(objects=[("helopeltis", (50, 20, 50, 40))]))

    def test_malformed_xml(self):
        with pytest.raises(MalformedAnnotation):
            parse_voc_xml("<annotation><filename>x.jpg</annotation>")

    def test_missing_size(self):
        with pytest.raises(MalformedAnnotation, match="size"):
            parse_voc_xml("<annotation><filename>x.jpg</filename></annotation>")

    def test_non_numeric(self):
        with pytest.raises(InvalidAnnotation, match="xmin"):
            parse_voc_xml(voc(objects=[("x", ("abc", 1, 5, 5))]))


class TestParsePolygon:
    def test_square(self):
        p = parse_polygon_json(labelme(shapes=[("leave", SQUARE, "polygon")]))
        assert (p.file_name, p.width, p.height) == ("img2.jpg", 100, 80)
        assert p.objects == [("leave", Polygon(tuple(map(tuple, SQUARE))))]
        assert p.skipped == 0

    def test_rectangle_skipped(self):
        p = parse_polygon_json(labelme(shapes=[
            ("leave", SQUARE, "polygon"), ("red_rust", [[1, 1], [5, 5]], "rectangle")]))
        assert len(p.objects) == 1 and p.skipped == 1

    def test_degenerate(self):
        with pytest.raises(InvalidAnnotation, match="degenerate polygon"):
            parse_polygon_json(labelme(shapes=[("leave", [[0, 0], [5, 5]], "polygon")]))

    def test_closing_vertex_collapsed(self):
        p = parse_polygon_json(labelme(shapes=[("leave", SQUARE + [SQUARE[0]], "polygon")]))
        assert len(p.objects[0][1]) == 4

    def test_missing_key(self):
        doc = json.loads(labelme())
        del doc["imageHeight"]
        with pytest.raises(MalformedAnnotation, match="imageHeight"):
            parse_polygon_json(json.dumps(doc))

    def test_windows_image_path(self):
        p = parse_polygon_json(labelme(path="..\\images\\leaf_7.jpg"))
        assert p.file_name == "leaf_7.jpg"


def parsed(name, labels):
    return ParsedImage(name, 100, 100, [(l, BBox(1, 1, 10, 10)) for l in labels])


class TestBuildIndex:
    def test_first_seen_order(self):
        idx = build_index([parsed("a.jpg", ["leave", "disease"]), parsed("b.jpg", ["disease"]),
                           parsed("c.jpg", ["leave"])])
        assert idx.categories.items() == [(1, "leave"), (2, "disease")]

    def test_fixed_order(self):
        order = ["red_rust", "helopeltis", "red_spider_mite"]
        idx = build_index([parsed("a.jpg", ["red_spider_mite", "red_rust"])], order)
        assert [idx.categories.id_of(n) for n in order] == [1, 2, 3]
        assert [lb.category_id for lb in idx.images[0].boxes] == [3, 1]

    def test_label_outside_fixed_order(self):
        with pytest.raises(ValueError, match="not in category order"):
            build_index([parsed("a.jpg", ["mystery"])], ["red_rust"])

    def test_duplicate_file_name(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_index([parsed("a.jpg", []), parsed("a.jpg", [])])

    def test_ids_follow_sorted_file_names(self):
        idx = build_index([parsed("c.jpg", []), parsed("a.jpg", []), parsed("b.jpg", [])])
        assert [(im.image_id, im.file_name) for im in idx.images] == [
            (1, "a.jpg"), (2, "b.jpg"), (3, "c.jpg")]

    def test_category_ids_start_at_one(self):
        idx = build_index([parsed("a.jpg", ["x", "y", "z"])])
        assert min(cid for cid, _ in idx.categories.items()) == 1


def small_index(**overrides):
    boxes = overrides.get("boxes", (LabeledBox(1, BBox(10, 20, 110, 220)),))
    polys = overrides.get("polygons", (LabeledPolygon(2, Polygon(((0, 0), (40, 0), (40, 30)))),))
    im = ImageAnnotation(1, "img1.jpg", overrides.get("width", 640), 480, boxes, polys)
    return DatasetIndex(CategoryMap(("red_rust", "leave")), [im])


class TestValidate:
    def test_clean(self):
        assert validate(small_index()) == []

    def test_box_out_of_bounds(self):
        v = validate(small_index(boxes=(LabeledBox(1, BBox(600, 0, 645, 10)),)))
        assert len(v) == 1
        assert "img1.jpg" in str(v[0]) and "box[0]" in str(v[0])

    def test_polygon_vertex_outside(self):
        v = validate(small_index(polygons=(LabeledPolygon(2, Polygon(((-1, 4), (5, 5), (5, 9)))),)))
        assert len(v) == 1 and "polygon[0]" in str(v[0])

    def test_unknown_category(self):
        v = validate(small_index(boxes=(LabeledBox(7, BBox(1, 1, 5, 5)),)))
        assert len(v) == 1 and "unknown category" in v[0].message


class TestIndexJson:
    def test_roundtrip(self):
        idx = small_index()
        assert read_index(write_index(idx)) == idx

    def test_bbox_is_xywh(self):
        data = json.loads(write_index(small_index()))
        assert data["annotations"][0]["bbox"] == [10, 20, 100, 200]
        assert data["annotations"][0]["segmentation"] == []
        assert data["annotations"][1]["segmentation"] == [[0, 0, 40, 0, 40, 30]]

    def test_layout(self):
        data = json.loads(write_index(small_index()))
        assert data["images"] == [{"id": 1, "file_name": "img1.jpg", "height": 480, "width": 640}]
        assert data["categories"] == [{"id": 1, "name": "red_rust"}, {"id": 2, "name": "leave"}]
        assert {"id", "image_id", "category_id", "bbox", "segmentation"} <= set(data["annotations"][0])

    def test_background_id_rejected(self):
        data = json.loads(write_index(small_index()))
        data["categories"][0]["id"] = 0
        with pytest.raises(MalformedAnnotation, match="background id reserved"):
            read_index(json.dumps(data))

    def test_schema_violation(self):
        data = json.loads(write_index(small_index()))
        del data["annotations"][0]["image_id"]
        with pytest.raises(MalformedAnnotation):
            read_index(json.dumps(data))

    def test_unknown_image(self):
        data = json.loads(write_index(small_index()))
        data["annotations"][0]["image_id"] = 9
        with pytest.raises(MalformedAnnotation, match="unknown image"):
            read_index(json.dumps(data))


labels = st.sampled_from(["red_rust", "helopeltis", "red_spider_mite", "leave"])


@st.composite
def voc_documents(draw):
    w, h = draw(st.integers(20, 400)), draw(st.integers(20, 400))
    objs = []
    for _ in range(draw(st.integers(0, 5))):
        x0, y0 = draw(st.integers(0, w - 1)), draw(st.integers(0, h - 1))
        objs.append((draw(labels), (x0, y0, draw(st.integers(x0 + 1, w)), draw(st.integers(y0 + 1, h)))))
    return w, h, objs


@settings(max_examples=40, deadline=None)
@given(st.lists(voc_documents(), min_size=1, max_size=5))
def test_full_roundtrip_property(docs):
    parses = [parse_voc_xml(voc(f"im{k:03d}.jpg", w, h, objs)) for k, (w, h, objs) in enumerate(docs)]
    idx = build_index(parses)
    assert validate(idx) == []
    again = read_index(write_index(idx))
    assert again == idx
    assert all(cid >= 1 for cid, _ in again.categories.items())
