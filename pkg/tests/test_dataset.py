import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import rasterize_oracle
from splicedet.dataset import (AnnotatedSample, AnnotationError, DegeneratePolygonError, MISD_SPLIT, PolygonRegion,
                               ResizeInfo, build_dataset, category_from_filename, dataset_stats, load_mask_png,
                               make_synthetic_fixture, mask_to_box, parse_via_annotations, rasterize_polygon,
                               resize_and_pad, split_dataset, to_via_document, validate_dataset, write_fixture)


def via_doc(regions_by_file):
    meta = {}
    for name, regions in regions_by_file.items():
        meta[name + "1234"] = {"filename": name, "size": 1234, "regions": regions, "file_attributes": {}}
    return json.dumps({"_via_settings": {}, "_via_img_metadata": meta})


def poly(xs, ys):
    return {"shape_attributes": {"name": "polygon", "all_points_x": xs, "all_points_y": ys},
            "region_attributes": {}}


# --- parsing ---------------------------------------------------------------------

def test_parse_single_triangle():
    parsed = parse_via_annotations(via_doc({"a.jpg": [poly([0, 10, 0], [0, 0, 10])]}))
    assert list(parsed.regions) == ["a.jpg"]
    assert len(parsed.regions["a.jpg"][0].vertices) == 3


def test_parse_seven_regions_keep_order():
    regions = [poly([i, i + 5, i], [0, 0, 5]) for i in range(7)]
    parsed = parse_via_annotations(via_doc({"b.png": regions}))
    got = parsed.regions["b.png"]
    assert len(got) == 7
    assert [r.vertices[0][0] for r in got] == list(range(7))


def test_non_polygon_rejected_per_region():
    circle = {"shape_attributes": {"name": "circle", "cx": 5, "cy": 5, "r": 3}, "region_attributes": {}}
    parsed = parse_via_annotations(via_doc({"c.png": [poly([0, 4, 0], [0, 0, 4]), circle]}))
    assert len(parsed.regions["c.png"]) == 1
    assert len(parsed.rejected) == 1
    assert parsed.rejected[0].shape == "circle"


def test_zero_regions_is_authentic():
    parsed = parse_via_annotations(via_doc({"au.jpg": []}))
    assert parsed.regions["au.jpg"] == []


def test_malformed_json_reports_offset():
    with pytest.raises(AnnotationError) as info:
        parse_via_annotations('{"_via_img_metadata": {"x": ')
    assert info.value.offset is not None


def test_via_roundtrip():
    regions = {"x.png": [PolygonRegion([(1.0, 1.0), (8.0, 1.0), (4.0, 7.0)])], "y.png": []}
    parsed = parse_via_annotations(to_via_document(regions))
    assert parsed.regions["x.png"][0].vertices == regions["x.png"][0].vertices
    assert parsed.regions["y.png"] == []


# --- rasterization -----------------------------------------------------------------

def test_full_image_rectangle():
    m = rasterize_polygon(PolygonRegion([(0, 0), (12, 0), (12, 9), (0, 9)]), 9, 12)
    assert m.all()


def test_square_sixteen_pixels():
    m = rasterize_polygon(PolygonRegion([(2, 2), (6, 2), (6, 6), (2, 6)]), 10, 10)
    assert m.sum() == 16
    assert np.array_equal(m, rasterize_oracle([(2, 2), (6, 2), (6, 6), (2, 6)], 10, 10))


def test_right_triangle_matches_oracle():
    verts = [(0, 0), (10, 0), (0, 10)]
    m = rasterize_polygon(PolygonRegion(verts), 10, 10)
    assert abs(int(m.sum()) - int(rasterize_oracle(verts, 10, 10).sum())) <= 10


def test_out_of_bounds_vertices_clamped():
    m = rasterize_polygon(PolygonRegion([(-5, -5), (20, -5), (20, 20), (-5, 20)]), 6, 7)
    assert m.all()


def test_degenerate_polygon():
    with pytest.raises(DegeneratePolygonError):
        rasterize_polygon(PolygonRegion([(0, 0), (3, 3)]), 5, 5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 20), st.floats(0, 16)), min_size=3, max_size=8))
def test_rasterize_agrees_with_pnpoly(verts):
    m = rasterize_polygon(PolygonRegion(verts), 16, 20)
    assert np.array_equal(m, rasterize_oracle(verts, 16, 20))


def test_mask_to_box_exclusive():
    m = np.zeros((10, 10), np.uint8)
    m[2:5, 3:8] = 1
    assert mask_to_box(m) == (3, 2, 8, 5)


# --- resize --------------------------------------------------------------------------

def test_resize_identity():
    img = np.random.default_rng(0).integers(0, 255, (512, 512, 3), dtype=np.uint8)
    out, masks, scale, pad = resize_and_pad(img, [], 512)
    assert scale == 1.0 and pad == (0, 0)
    assert np.array_equal(out, img)


def test_resize_misd_native_size():
    img = np.zeros((256, 384, 3), np.uint8)
    mask = np.zeros((256, 384), np.uint8)
    mask[10:50, 20:90] = 1
    out, masks, scale, (top, left) = resize_and_pad(img, [mask], 512)
    assert scale == pytest.approx(512 / 384)
    assert out.shape == (512, 512, 3)
    assert left == 0 and top > 0  # padded along the short side
    assert masks[0].shape == (512, 512)


def test_resize_empty_image():
    with pytest.raises(ValueError):
        resize_and_pad(np.zeros((0, 10, 3), np.uint8), [], 64)


@settings(max_examples=50, deadline=None)
@given(st.integers(20, 300), st.integers(20, 300), st.integers(0, 1000))
def test_box_roundtrip_within_one_pixel(h, w, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = sorted(rng.uniform(0, w, 2))
    y1, y2 = sorted(rng.uniform(0, h, 2))
    _, _, scale, pad = resize_and_pad(np.zeros((h, w, 3), np.uint8), [], 128)
    info = ResizeInfo(scale, pad, (h, w), 128)
    back = info.inverse_boxes(info.forward_boxes([(x1, y1, x2, y2)]))[0]
    assert np.allclose(back, (x1, y1, x2, y2), atol=1.0)


# --- splits and stats -------------------------------------------------------------------

def test_split_misd_sizes():
    s = split_dataset([f"im{i}" for i in range(918)], MISD_SPLIT, seed=3)
    assert (len(s.train_ids), len(s.val_ids), len(s.test_ids)) == (734, 92, 92)
    assert not set(s.train_ids) & set(s.val_ids)
    assert not set(s.val_ids) & set(s.test_ids)
    assert not set(s.train_ids) & set(s.test_ids)


def test_split_all_train_and_errors():
    ids = list("abcdef")
    assert sorted(split_dataset(ids, (6, 0, 0), 0).train_ids) == ids
    with pytest.raises(ValueError):
        split_dataset(ids, (5, 1, 1), 0)


def test_split_determinism():
    ids = [str(i) for i in range(50)]
    a, b = split_dataset(ids, (30, 10, 10), 1), split_dataset(ids, (30, 10, 10), 1)
    c = split_dataset(ids, (30, 10, 10), 2)
    assert a.train_ids == b.train_ids and a.test_ids == b.test_ids
    assert a.train_ids != c.train_ids


def test_stats_empty_and_counts():
    assert dataset_stats([]) == {"total": 0, "authentic": 0, "spliced": 0, "authentic_by_category": {},
                                 "regions_per_spliced": {}}
    entries = [{"masks": ["a", "b", "c"], "category": None}, {"masks": [], "category": "animal"}]
    st_ = dataset_stats(entries)
    assert (st_["total"], st_["authentic"], st_["spliced"]) == (2, 1, 1)
    assert st_["authentic_by_category"] == {"animal": 1}


def test_category_from_casia_name():
    assert category_from_filename("Au_ani_00001.jpg") == "animal"
    assert category_from_filename("random.png") is None


# --- fixtures -------------------------------------------------------------------------------

def test_fixture_forced_count():
    (s,) = make_synthetic_fixture(1, (128, 160), (3, 3), seed=4)
    assert len(s.regions) == 3
    assert all(m.sum() > 0 for m in s.masks)


def test_fixture_masks_match_rasterization():
    for s in make_synthetic_fixture(4, (128, 128), (3, 7), seed=9):
        assert 3 <= len(s.regions) <= 7
        for r, m in zip(s.regions, s.masks):
            assert np.array_equal(m, rasterize_polygon(r, *s.image.shape[:2]))


def test_fixture_deterministic():
    a = make_synthetic_fixture(10, (96, 96), (3, 4), seed=5)
    b = make_synthetic_fixture(10, (96, 96), (3, 4), seed=5)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert all(x.regions == y.regions for x, y in zip(a, b))


def test_fixture_too_small():
    with pytest.raises(ValueError):
        make_synthetic_fixture(1, (24, 24), (7, 7), seed=0)
    with pytest.raises(ValueError):
        make_synthetic_fixture(1, (128, 128), (0, 3), seed=0)


def test_sample_invariants():
    with pytest.raises(ValueError):
        AnnotatedSample(np.zeros((4, 4, 3), np.uint8), [PolygonRegion([(0, 0), (2, 0), (0, 2)])], [], "x")


# --- manifest ---------------------------------------------------------------------------------

def test_build_and_validate(tmp_path):
    samples = make_synthetic_fixture(2, (96, 128), (3, 4), seed=1)
    via = write_fixture(samples, tmp_path / "fx")
    manifest = build_dataset(tmp_path / "fx" / "images", via, tmp_path / "ds", seed=0)
    assert len(manifest["entries"]) == 2
    for e, s in zip(manifest["entries"], samples):
        assert len(e["masks"]) == len(s.regions)
        for path, m in zip(e["masks"], s.masks):
            png = load_mask_png(tmp_path / "ds" / path)
            assert np.array_equal(png, m)
            assert set(np.unique(np.asarray(Image.open(tmp_path / "ds" / path)))) <= {0, 255}
    assert validate_dataset(tmp_path / "ds" / "manifest.json") == []


def test_validate_flags_tampered_mask(tmp_path):
    samples = make_synthetic_fixture(2, (96, 128), (3, 3), seed=2)
    via = write_fixture(samples, tmp_path / "fx")
    manifest = build_dataset(tmp_path / "fx" / "images", via, tmp_path / "ds", seed=0)
    victim = tmp_path / "ds" / manifest["entries"][0]["masks"][1]
    Image.fromarray(np.zeros((96, 128), np.uint8)).save(victim)
    problems = validate_dataset(tmp_path / "ds" / "manifest.json")
    assert any(manifest["entries"][0]["masks"][1] in p for p in problems)
