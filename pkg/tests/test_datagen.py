import json
import logging

import numpy as np
import pytest
from PIL import Image

from coarse2fine import artmodel as am
from coarse2fine import datagen as dg
from coarse2fine.camrender import project


def test_same_seed_bit_identical(toy_model, small_synth):
    again = dg.synth_generate(toy_model, 12, dg.CameraSpec(), seed=3)
    for a, b in zip(small_synth.samples, again.samples):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.keypoints, b.keypoints)
        assert np.array_equal(a.silhouette, b.silhouette)
        for k in a.gt:
            assert np.array_equal(a.gt[k], b.gt[k])
    other = dg.synth_generate(toy_model, 2, dg.CameraSpec(), seed=4)
    assert not np.array_equal(other[0].image, small_synth[0].image)


def test_keypoints_reproject_from_stored_params(toy_model, small_synth):
    spec = dg.CameraSpec()
    for s in small_synth.samples:
        g = s.gt
        V = am.forward(toy_model, g["betas"], g["pose"], g["trans"]).data[0]
        kp = project(am.regress_joints(toy_model, V), spec.camera(g["focal"])).data
        assert np.abs(kp - s.keypoints).max() < 1e-9


def test_samples_satisfy_invariants(small_synth):
    spec = dg.CameraSpec()
    for s in small_synth.samples:
        dg.validate_sample(s)
        assert s.silhouette.sum() >= spec.min_area
        assert s.image.shape == (spec.image_size, spec.image_size, 3)
        assert set(np.unique(s.silhouette)) <= {0.0, 1.0}
        assert s.visibility.shape == (9,) and s.visibility.all()


def test_image_is_matted(toy_model):
    clean = dg.CameraSpec(noise_sigma=0.0)
    for s in dg.synth_generate(toy_model, 3, clean, seed=1).samples:
        assert np.all(s.image[s.silhouette == 0] == 0)
        assert s.image[s.silhouette == 1].min() > 0


def test_shape_draws_mahalanobis_mean(toy_model):
    rng = np.random.default_rng(11)
    spec = dg.CameraSpec()
    cov_inv = np.linalg.inv(toy_model.shape_chol @ toy_model.shape_chol.T)
    d = []
    for _ in range(1000):
        betas = dg.draw_params(toy_model, spec, rng)[0]
        r = betas - toy_model.shape_mean
        d.append(r @ cov_inv @ r)
    B = toy_model.n_shape
    assert abs(np.mean(d) - B) < 0.2 * B


def test_pose_draws_within_limits(toy_model):
    rng = np.random.default_rng(2)
    spec = dg.CameraSpec()
    for _ in range(200):
        _b, pose, trans, focal = dg.draw_params(toy_model, spec, rng)
        assert np.all(pose >= toy_model.pose_min) and np.all(pose <= toy_model.pose_max)
        assert spec.focal_range[0] <= focal <= spec.focal_range[1]
        assert spec.depth_range[0] <= trans[2] <= spec.depth_range[1]


def test_degenerate_samples_resampled_with_cap(toy_model):
    impossible = dg.CameraSpec(min_area=64 * 64 + 1, max_retries=3)
    with pytest.raises(RuntimeError, match="3 tries"):
        dg.synth_generate(toy_model, 1, impossible, seed=0)


def test_epoch_order_pure(small_synth):
    a = small_synth.epoch_order(5, 2)
    assert np.array_equal(a, small_synth.epoch_order(5, 2))
    assert not np.array_equal(a, small_synth.epoch_order(5, 3))
    assert sorted(a) == list(range(len(small_synth)))
    seen = np.concatenate([b.indices for b in small_synth.batches(5, seed=5, epoch=2)])
    assert np.array_equal(seen, a)


# ------------------------------------------------------------- annotations


def _assert_same(a, b):
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.keypoints, b.keypoints)
    assert np.array_equal(a.visibility, b.visibility)
    assert np.array_equal(a.silhouette, b.silhouette)
    assert a.transform == b.transform and a.name == b.name
    for k in a.gt:
        assert np.array_equal(a.gt[k], b.gt[k])


def test_annotation_round_trip(small_synth, tmp_path):
    path = dg.export_annotations(small_synth, tmp_path)
    back = dg.load_annotations(path)
    assert len(back) == len(small_synth) and back.n_kp == 9
    for a, b in zip(small_synth.samples, back.samples):
        _assert_same(a, b)


def test_round_trip_keeps_crop_transform(small_synth, tmp_path):
    s = small_synth[0]
    cropped = dg.crop_and_resize(s, (10.0, 12.0, 30.0, 20.0), 48)
    path = dg.export_annotations(dg.Dataset([cropped], 9), tmp_path)
    back = dg.load_annotations(path)
    _assert_same(cropped, back[0])


def test_empty_record_list(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text(dg.HEADER + "\nn_kp=4\n")
    ds = dg.load_annotations(str(p))
    assert len(ds) == 0 and ds.n_kp == 4


def test_all_zero_visibility_skipped(small_synth, tmp_path, caplog):
    path = dg.export_annotations(small_synth.subset([0, 1]), tmp_path)
    lines = open(path).read().splitlines()
    rec = lines[2].split()
    rec = [t if not t.startswith("keypoints=") else
           "keypoints=" + ";".join("1.0,2.0,0.0" for _ in range(9)) for t in rec]
    lines[2] = " ".join(rec)
    open(path, "w").write("\n".join(lines) + "\n")
    with caplog.at_level(logging.INFO):
        ds = dg.load_annotations(path)
    assert len(ds) == 1 and ds[0].name == small_synth[1].name
    assert "too few keypoints" in caplog.text


def test_missing_file_skipped(small_synth, tmp_path, caplog):
    path = dg.export_annotations(small_synth.subset([0, 1]), tmp_path)
    (tmp_path / "masks" / f"{small_synth[0].name}.png").unlink()
    with caplog.at_level(logging.INFO):
        ds = dg.load_annotations(path)
    assert len(ds) == 1 and "missing" in caplog.text


@pytest.mark.parametrize("body,where", [
    ("n_kp=2\nimage=a.npy mask=m.png bbox=0,0,1,1 keypoints=1,2,1\n", "line 2"),
    ("image=a.npy\n", "line 1"),
    ("n_kp=1\nimage=a.npy mask=m.png keypoints=1,2,1\n", "line 2: missing bbox"),
    ("n_kp=1\n\nimage=a.npy mask=m.png bbox=0,0,x,1 keypoints=1,2,1\n", "line 3"),
    ("n_kp=1\nimage=a.npy junk\n", "line 2"),
])
def test_malformed_file_reports_position(tmp_path, body, where):
    p = tmp_path / "bad.txt"
    p.write_text(body)
    with pytest.raises(dg.AnnotationError, match=where):
        dg.load_annotations(str(p))


def test_out_of_frame_keypoint_rejected(small_synth):
    s = small_synth[0]
    kp = s.keypoints.copy()
    kp[0] = [-0.6 * 64, 10]
    with pytest.raises(dg.AnnotationError):
        dg.validate_sample(dg.TrainingSample(s.image, kp, s.visibility, s.silhouette))
    kp[0] = [-0.4 * 64, 10]  # slightly out of frame is fine
    dg.validate_sample(dg.TrainingSample(s.image, kp, s.visibility, s.silhouette))
    v = s.visibility.copy()
    v[0] = 0
    kp[0] = [1e5, 1e5]  # invisible keypoints are unconstrained
    dg.validate_sample(dg.TrainingSample(s.image, kp, v, s.silhouette))
    with pytest.raises(dg.AnnotationError, match="empty"):
        dg.validate_sample(dg.TrainingSample(s.image, s.keypoints, s.visibility, 0 * s.silhouette))


# ------------------------------------------------------------- crop/resize


def test_crop_full_image_is_identity(small_synth):
    s = small_synth[0]
    c = dg.crop_and_resize(s, (0.0, 0.0, 64.0, 64.0), 64)
    assert c.transform == (1.0, 0.0, 0.0)
    assert np.allclose(c.image, s.image, atol=1e-12)
    assert np.array_equal(c.silhouette, s.silhouette)
    assert np.allclose(c.keypoints, s.keypoints, atol=1e-12)


def test_bbox_centre_maps_to_crop_centre(small_synth):
    s = small_synth[0]
    bbox = (13.0, 7.0, 30.0, 22.0)
    s = dg.TrainingSample(s.image, np.array([[13 + 15.0 - 0.5, 7 + 11.0 - 0.5]] * 9), s.visibility, s.silhouette)  # pixel-centre coords
    c = dg.crop_and_resize(s, bbox, 48)
    assert np.allclose(c.keypoints, (48 - 1) / 2, atol=1e-12)
    assert np.allclose(c.to_original(c.keypoints), s.keypoints, atol=1e-12)


def _tight_bbox(mask):
    ys, xs = np.nonzero(mask)
    return (xs.min(), ys.min(), xs.max() + 1 - xs.min(), ys.max() + 1 - ys.min())


def test_crop_silhouette_area_scales(small_synth):
    for s in small_synth.samples:
        for out in (128, 224):
            c = dg.crop_and_resize(s, _tight_bbox(s.silhouette), out)
            expected = s.silhouette.sum() * c.transform[0] ** 2
            assert abs(c.silhouette.sum() - expected) < 0.02 * expected
            assert abs(c.original_area() - s.silhouette.sum()) < 0.02 * s.silhouette.sum()


def test_crop_area_unbiased_across_scales(small_synth):
    # near unit scale single small masks can round a whole straight edge one way; the error averages out
    rel = []
    for s in small_synth.samples:
        for out in (32, 48, 64, 80, 96):
            c = dg.crop_and_resize(s, _tight_bbox(s.silhouette), out)
            expected = s.silhouette.sum() * c.transform[0] ** 2
            rel.append((c.silhouette.sum() - expected) / expected)
    assert abs(np.mean(rel)) < 0.01
    assert np.mean(np.abs(rel)) < 0.02


def test_crop_composes_transforms(small_synth):
    s = small_synth[1]
    a = dg.crop_and_resize(s, (5.0, 9.0, 40.0, 36.0), 80)
    b = dg.crop_and_resize(a, (10.0, 20.0, 50.0, 40.0), 32)
    assert np.allclose(b.to_original(b.keypoints), s.keypoints, atol=1e-9)


def test_crop_rejects_disjoint_bbox(small_synth):
    with pytest.raises(dg.AnnotationError):
        dg.crop_and_resize(small_synth[0], (70.0, 0.0, 5.0, 5.0), 32)
    with pytest.raises(dg.AnnotationError):
        dg.crop_and_resize(small_synth[0], (0.0, 0.0, 0.0, 5.0), 32)


# ----------------------------------------------------------------- RLE


def _encode_counts(mask):
    flat = mask.T.reshape(-1)
    counts, val, run = [], 0, 0
    for x in flat:
        if x == val:
            run += 1
        else:
            counts.append(run)
            val, run = x, 1
    counts.append(run)
    return counts


def _compress(counts):
    # COCO's LEB128-like string encoding with delta coding after the second count
    out = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (c & 0x10) != 0 if x == -1 else x != 0
            more = not ((x == 0 and not (c & 0x10)) or (x == -1 and (c & 0x10)))
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def test_rle_decode(rng):
    for _ in range(20):
        h, w = rng.integers(1, 12, size=2)
        mask = (rng.uniform(size=(h, w)) > 0.6).astype(np.uint8)
        counts = _encode_counts(mask)
        assert np.array_equal(dg.decode_coco_rle(counts, h, w), mask)
        assert np.array_equal(dg.decode_coco_rle(_compress(counts), h, w), mask)


def test_rle_known_string():
    # 3x2 mask, column-major runs: 1 zero, 4 ones, 1 zero
    m = dg.decode_coco_rle([1, 4, 1], 3, 2)
    assert np.array_equal(m, np.array([[0, 1], [1, 1], [1, 0]]))


def test_stanford_extra_import(tmp_path):
    img = (np.arange(4 * 5 * 3).reshape(4, 5, 3) % 255).astype(np.uint8)
    (tmp_path / "imgs").mkdir()
    Image.fromarray(img).save(tmp_path / "imgs" / "dog.png")
    mask = np.zeros((4, 5), np.uint8)
    mask[1:3, 1:4] = 1
    rec = {"img_path": "dog.png", "img_width": 5, "img_height": 4, "img_bbox": [1, 1, 3, 2],
           "joints": [[2, 2, 1], [0, 0, 0], [3, 1, 1]], "seg": {"counts": _encode_counts(mask), "size": [4, 5]},
           "is_multiple_dogs": False}
    js = tmp_path / "se.json"
    js.write_text(json.dumps([rec]))
    out = tmp_path / "out"
    path = dg.import_stanford_extra(str(js), str(tmp_path / "imgs"), str(out))
    ds = dg.load_annotations(path)
    assert len(ds) == 1 and ds.n_kp == 3
    s = ds[0]
    assert np.array_equal(s.silhouette, mask)
    assert np.allclose(s.image, img / 255.0)
    assert np.array_equal(s.visibility, [1, 0, 1])
    assert s.bbox == (1.0, 1.0, 3.0, 2.0)
