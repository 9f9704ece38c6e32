import numpy as np
import pytest

from psrpn import data as D
from psrpn import pft


COCO = b"""{
 "images": [{"id": 7, "width": 640, "height": 480, "file_name": "a.jpg"}, {"id": 8, "width": 10, "height": 10}],
 "annotations": [
  {"id": 1, "image_id": 7, "bbox": [10, 20, 30, 40], "category_id": 3, "iscrowd": 0, "area": 1200},
  {"id": 2, "image_id": 7, "bbox": [0, 0, 100, 50], "category_id": 1, "iscrowd": 1},
  {"id": 3, "image_id": 8, "bbox": [1, 1, -2, 3], "category_id": 1}
 ]
}"""


def test_parse_coco():
    stats = {}
    recs = D.parse_coco(COCO, stats)
    assert stats["rejected"] == 1
    rec, insts = recs[0]
    assert (rec.id, rec.width, rec.height) == (7, 640, 480)
    np.testing.assert_array_equal(insts[0].box, [10, 20, 40, 60])
    assert insts[0].category == 3 and not insts[0].crowd and insts[0].area == 1200
    assert insts[1].crowd and insts[1].area == 5000
    assert recs[1][1] == []


def test_coco_round_trip():
    recs = D.parse_coco(COCO)
    again = D.parse_coco(D.emit_coco(recs))
    assert D.emit_coco(again) == D.emit_coco(recs)
    for (r1, i1), (r2, i2) in zip(recs, again):
        assert r1.id == r2.id
        assert [g.box.tolist() for g in i1] == [g.box.tolist() for g in i2]


@pytest.mark.parametrize("blob,where", [
    (b"{", "invalid JSON"),
    (b'{"images": []}', "annotations"),
    (b'{"images": [{"id": 1, "width": 3}], "annotations": []}', "images[0].height"),
    (b'{"images": [], "annotations": [{"image_id": 1, "bbox": [1, 2, 3]}]}', "annotations[0].bbox"),
    (b'{"images": [], "annotations": [{"image_id": 1, "bbox": [1, 2, 3, 4]}]}', "image_id"),
])
def test_parse_coco_errors_name_the_path(blob, where):
    with pytest.raises(D.ParseError, match=where.replace("[", r"\[").replace("]", r"\]")):
        D.parse_coco(blob)


VOC = b"""<annotation><filename>000005.jpg</filename>
<size><width>500</width><height>375</height><depth>3</depth></size>
<object><name>chair</name><difficult>0</difficult><bndbox><xmin>263</xmin><ymin>211</ymin><xmax>324</xmax><ymax>339</ymax></bndbox></object>
<object><name>chair</name><difficult>1</difficult><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>10</xmax><ymax>20</ymax></bndbox></object>
</annotation>"""


def test_parse_voc_converts_corners():
    rec, insts = D.parse_voc(VOC)
    assert (rec.id, rec.width, rec.height) == ("000005", 500, 375)
    np.testing.assert_array_equal(insts[0].box, [262, 210, 324, 339])
    assert not insts[0].ignore and insts[1].ignore and not insts[1].crowd
    assert insts[1].area == 10 * 20


def test_voc_round_trip():
    rec, insts = D.parse_voc(VOC)
    rec2, insts2 = D.parse_voc(D.emit_voc(rec, insts))
    assert [g.box.tolist() for g in insts2] == [g.box.tolist() for g in insts]
    assert [g.ignore for g in insts2] == [g.ignore for g in insts]


def test_voc_errors():
    with pytest.raises(D.ParseError, match="invalid XML"):
        D.parse_voc(b"<annotation>")
    with pytest.raises(D.ParseError, match="object\\[0\\]/bndbox"):
        D.parse_voc(b"<annotation><size><width>1</width><height>1</height></size><object><name>a</name></object></annotation>")


def test_voc_640_transform():
    img = np.ones((3, 640, 1280), np.float32)  # width 1280, height 640
    insts = [D.GtInstance([100, 100, 300, 200])]
    out, got, rec = D.transform_train(img, insts, "voc-640")
    assert out.shape == (3, 640, 640)
    assert np.all(out[:, 320:, :] == 0) and np.all(out[:, :320, :] == 1)
    np.testing.assert_array_equal(got[0].box, [50, 50, 150, 100])
    np.testing.assert_array_equal(rec.inverse_boxes([got[0].box])[0], insts[0].box)


def test_coco_768_transform_crops_and_clips():
    img = np.random.default_rng(0).random((3, 400, 800)).astype(np.float32)
    insts = [D.GtInstance([0, 0, 50, 50]), D.GtInstance([700, 100, 790, 200]), D.GtInstance([390, 10, 420, 40])]
    out, got, rec = D.transform_train(img, insts, "coco-768", seed=3)
    assert out.shape == (3, 768, 768)
    fwd = rec.forward_boxes([g.box for g in insts])
    for g in got:
        assert g.box[0] >= 0 and g.box[2] <= 768 and g.box[3] <= 768
    # every kept box is the clipped transform of an original one
    for g in got:
        assert any(np.allclose(g.box, np.clip(f, 0, 768)) for f in fwd)
    again, got2, _ = D.transform_train(img, insts, "coco-768", seed=3)
    assert again.tobytes() == out.tobytes() and len(got2) == len(got)


def test_test_padding():
    out = D.transform_test_pad(np.ones((3, 375, 500), np.float32))
    assert out.shape == (3, 384, 512)
    assert out[:, 375:, :].sum() == 0 and out[:, :, 500:].sum() == 0


def test_resize_identity_and_constant():
    x = np.random.default_rng(1).random((2, 5, 7))
    np.testing.assert_array_equal(D.resize(x, (5, 7)), x)
    np.testing.assert_allclose(D.resize(np.full((1, 4, 4), 0.3), (9, 3)), 0.3)


def test_synth_is_deterministic_and_indexed():
    a = D.synth_shapes(5, seed=7)
    b = D.synth_shapes(5, seed=7)
    assert a.images.tobytes() == b.images.tobytes()
    c = D.synth_shapes(2, seed=7, start=3)
    assert c.images[0].tobytes() == a.images[3].tobytes()
    assert D.synth_shapes(1, seed=8).images.tobytes() != a.images[:1].tobytes()


def test_synth_boxes_are_tight_and_cover_all_strata():
    ds = D.synth_shapes(100, seed=7)
    buckets = set()
    for img, (rec, insts) in zip(ds.images, ds.records):
        assert 1 <= len(insts) <= 8
        for g in insts:
            x0, y0, x1, y1 = g.box.astype(int)
            assert 0 <= x0 < x1 <= 128 and 0 <= y0 < y1 <= 128
            buckets.add(0 if g.area < 32**2 else 1 if g.area < 96**2 else 2)
    assert buckets == {0, 1, 2}
    assert ds.images.dtype == np.float32 and ds.images.min() >= 0 and ds.images.max() <= 1


def test_synth_size_must_fit_stride():
    with pytest.raises(ValueError):
        D.synth_shapes(1, size=100)


def test_dataset_save_load(tmp_path):
    ds = D.synth_shapes(3, seed=1)
    D.save_dataset(ds, tmp_path)
    back = D.load_dataset(tmp_path)
    assert back.images.tobytes() == ds.images.tobytes()
    assert [len(i) for _, i in back.records] == [len(i) for _, i in ds.records]


def test_ppm_round_trip(tmp_path):
    img = np.round(np.random.default_rng(2).random((3, 6, 5)) * 255) / 255
    D.write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_allclose(D.read_ppm(str(tmp_path / "x.ppm")), img, atol=1e-6)


def test_pft_round_trip_and_errors(tmp_path):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    blob = pft.dumps(arr)
    assert blob[:4] == b"PFT1"
    assert pft.loads(blob).tobytes() == arr.tobytes()
    with pytest.raises(pft.PFTError):
        pft.loads(b"XXXX" + blob[4:])
    with pytest.raises(pft.PFTError):
        pft.loads(blob[:-1])
