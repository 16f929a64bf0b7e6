import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fanlab.data.dataset import (ManifestRecord, Sample, load_dataset, read_depth, read_manifest,
                                 split_train_val, write_manifest)
from fanlab.data.markup import FLIP_PERM_68, flip_permutation, subset_indices
from fanlab.data.pts import format_pts, parse_pts, read_pts
from fanlab.data.synth import (TEMPLATE, Camera, load_camera, project, quantize, sample_camera,
                               shaped_template, synth_generate)
from fanlab.data.transforms import (AugmentConfig, AugmentParams, Affine, FAN_AUGMENT, GUIDED_AUGMENT,
                                    NO_AUGMENT, apply_augment, augment, augment_transform, augmented_crop,
                                    crop_and_resize, crop_transform, downscale_face, perturb_bbox,
                                    sample_augment)
from fanlab.errors import ConfigurationError, DataError, ParseError
from fanlab.heatmap import encode
from fanlab.landmarks import BoundingBox, LandmarkSet, bbox_from_landmarks
from fanlab.metrics import YAW_BINS, nme


def _sample(rng, n=68, size=48, with_z=False):
    pts = rng.uniform(8, size - 9, (n, 3 if with_z else 2))
    return Sample(rng.random((size, size, 3)).astype(np.float32), LandmarkSet(pts), id="s")


# --- pts -------------------------------------------------------------------


def test_parse_pts_example():
    lm = parse_pts("version: 1\nn_points: 2\n{\n1.0 2.0\n3.5 4.5\n}\n")
    np.testing.assert_array_equal(lm.xy, [[0.0, 1.0], [2.5, 3.5]])


def test_parse_pts_count_mismatch():
    body = "\n".join("1 1" for _ in range(67))
    with pytest.raises(ParseError):
        parse_pts(f"version: 1\nn_points: 68\n{{\n{body}\n}}\n")


@pytest.mark.parametrize("text, line", [
    ("version 1\nn_points: 1\n{\n1 1\n}\n", 1),
    ("version: 1\nn_points: 1\n{\n1 x\n}\n", 4),
    ("version: 1\nn_points: 1\n{\n1 1\n", None),
    ("n_points: 1\n{\n1 1\n}\n", None),
])
def test_parse_pts_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as exc:
        parse_pts(text)
    if line is not None:
        assert exc.value.line == line


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 80), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_pts_round_trip(n, seed, with_z):
    pts = np.random.default_rng(seed).uniform(-50, 500, (n, 3 if with_z else 2))
    back = parse_pts(format_pts(LandmarkSet(pts)))
    np.testing.assert_array_equal(back.points, pts)


# --- boxes -----------------------------------------------------------------


def test_bbox_example_and_degenerate():
    b = bbox_from_landmarks(LandmarkSet([[0, 0], [8, 2]]))
    assert (b.w, b.h, b.d) == (8, 2, 4)
    assert bbox_from_landmarks(LandmarkSet([[3, 3]])).d == 0
    with pytest.raises(DataError):
        bbox_from_landmarks(LandmarkSet([[1, 1]], visible=[False]))


def test_bbox_matches_min_max_oracle(rng):
    for _ in range(20):
        pts = rng.normal(0, 30, (int(rng.integers(2, 70)), 2))
        vis = rng.random(len(pts)) < 0.8
        vis[0] = True
        b = bbox_from_landmarks(LandmarkSet(pts, vis))
        xs = [p[0] for p, v in zip(pts, vis) if v]
        ys = [p[1] for p, v in zip(pts, vis) if v]
        assert (b.x, b.y, b.x + b.w, b.y + b.h) == pytest.approx((min(xs), min(ys), max(xs), max(ys)), abs=1e-12)


# --- manifest / dataset ----------------------------------------------------


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord("images/a.png", "landmarks/a.pts", "depth/a.depth", -12.5),
            ManifestRecord("images/b.png", "landmarks/b.pts")]
    write_manifest(tmp_path / "m.tsv", recs)
    raw = (tmp_path / "m.tsv").read_bytes()
    assert b"\r" not in raw and raw.count(b"\t") == 6
    assert read_manifest(tmp_path / "m.tsv") == recs


def test_manifest_rejects_bad_lines(tmp_path):
    (tmp_path / "m.tsv").write_text("only-one-field\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.tsv")


def test_split_holds_out_tail():
    train, val = split_train_val(list(range(300)))
    assert train == list(range(270)) and val == list(range(270, 300))


def test_missing_depth_sidecar_is_a_data_error(tmp_path, small_dataset_dir):
    recs = read_manifest(small_dataset_dir)
    write_manifest(tmp_path / "manifest.tsv", [ManifestRecord(
        str(small_dataset_dir / r.image), str(small_dataset_dir / r.landmarks), None, r.yaw) for r in recs[:2]])
    with pytest.raises(DataError):
        load_dataset(tmp_path, require_depth=True)
    assert len(load_dataset(tmp_path)) == 2


# --- flip table --------------------------------------------------------------


def test_flip_permutation_is_an_involutive_bijection():
    for n in (5, 68):
        p = flip_permutation(n)
        assert sorted(p) == list(range(n))
        np.testing.assert_array_equal(p[p], np.arange(n))
    assert FLIP_PERM_68[36] == 45 and FLIP_PERM_68[30] == 30 and FLIP_PERM_68[0] == 16


def test_flip_table_mirrors_the_template():
    t = TEMPLATE
    mirrored = t[FLIP_PERM_68] * np.array([-1, 1, 1])
    np.testing.assert_allclose(mirrored, t, atol=1e-12)


def test_unknown_subset():
    with pytest.raises(ConfigurationError):
        subset_indices(7)


# --- cropping ----------------------------------------------------------------


def test_crop_identity(rng):
    s = _sample(rng, size=32)
    box = BoundingBox.full_image(32, 32)
    out, aff = crop_and_resize(s.with_(bbox=box), box, 32, margin=0.0)
    np.testing.assert_allclose(aff.matrix, [[1, 0, 0], [0, 1, 0]], atol=1e-12)
    np.testing.assert_allclose(out.image, s.image, atol=1e-6)
    np.testing.assert_allclose(out.landmarks.xy, s.landmarks.xy, atol=1e-12)


def test_crop_back_projection_and_centre(rng):
    for _ in range(20):
        box = BoundingBox(*rng.uniform(0, 100, 2), *rng.uniform(5, 80, 2))
        aff = crop_transform(box, 64, 0.1)
        pts = LandmarkSet(rng.uniform(-50, 200, (68, 3)))
        back = aff.to_original(aff.to_canonical(pts))
        np.testing.assert_allclose(back.points, pts.points, atol=1e-9)
        np.testing.assert_allclose(aff.apply(np.array(box.center)), [31.5, 31.5], atol=1e-9)


def test_crop_rejects_degenerate_box(rng):
    with pytest.raises(DataError):
        crop_transform(BoundingBox(1, 1, 0, 0), 64)


def test_nme_commutes_with_back_projection(rng):
    for _ in range(10):
        gt = LandmarkSet(rng.uniform(20, 120, (68, 2)))
        pred = LandmarkSet(gt.xy + rng.normal(0, 3, (68, 2)))
        box = bbox_from_landmarks(gt)
        aff = crop_transform(box, 64)
        a = nme(gt, pred, box)
        b = nme(aff.to_canonical(gt), aff.to_canonical(pred), aff.map_bbox(box))
        assert a == pytest.approx(b, abs=1e-9)


# --- augmentation --------------------------------------------------------------


def test_identity_augmentation(rng):
    s = _sample(rng, with_z=True)
    out = apply_augment(s, AugmentParams())
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.landmarks.points, s.landmarks.points)
    assert augment(s, NO_AUGMENT).landmarks.points.tolist() == s.landmarks.points.tolist()


def test_flip_maps_x_and_permutes(rng):
    s = _sample(rng)
    out = apply_augment(s, AugmentParams(flip=True))
    W = s.image.shape[1]
    expect = np.column_stack([W - 1 - s.landmarks.xy[:, 0], s.landmarks.xy[:, 1]])[FLIP_PERM_68]
    np.testing.assert_allclose(out.landmarks.xy, expect, atol=1e-12)
    np.testing.assert_array_equal(out.image, s.image[:, ::-1])
    twice = apply_augment(out, AugmentParams(flip=True))
    np.testing.assert_allclose(twice.landmarks.xy, s.landmarks.xy, atol=1e-12)
    np.testing.assert_array_equal(twice.image, s.image)


def test_flip_heatmaps_commute_exactly(rng):
    s = _sample(rng, size=64)
    out = apply_augment(s, AugmentParams(flip=True))
    before = encode(s.landmarks, (64, 64)).maps
    after = encode(out.landmarks, (64, 64)).maps
    np.testing.assert_array_equal(after, before[FLIP_PERM_68][:, :, ::-1])


def test_quarter_turn_heatmaps_commute(rng):
    pts = np.floor(rng.uniform(10, 54, (68, 2)))
    s = Sample(np.zeros((64, 64, 3), np.float32), LandmarkSet(pts))
    params = AugmentParams(angle=90.0)
    out = apply_augment(s, params)
    maps = encode(s.landmarks, (64, 64)).maps
    warped = np.stack([augment_transform_image(m, params) for m in maps])
    assert np.abs(encode(out.landmarks, (64, 64)).maps - warped).max() < 1e-3


def augment_transform_image(m, params):
    img = np.repeat(m[:, :, None], 3, axis=2).astype(np.float32)
    return apply_augment(Sample(img, LandmarkSet([[32, 32]])), params).image[:, :, 0]


@settings(max_examples=30, deadline=None)
@given(st.floats(-70, 70), st.floats(0.7, 1.3))
def test_rotation_round_trip(theta, scale):
    rng = np.random.default_rng(5)
    s = _sample(rng)
    there = apply_augment(s, AugmentParams(angle=theta, scale=scale))
    back = apply_augment(there, AugmentParams(angle=-theta, scale=1 / scale))
    np.testing.assert_allclose(back.landmarks.xy, s.landmarks.xy, atol=1e-6)


def test_rotation_direction_is_counter_clockwise_on_screen():
    aff = augment_transform(AugmentParams(angle=90.0), 65, 65)
    # a point to the right of centre moves above it (smaller y)
    np.testing.assert_allclose(aff.apply(np.array([42.0, 32.0])), [32.0, 22.0], atol=1e-9)


def test_augment_is_deterministic(rng):
    s = _sample(rng)
    a = augment(s, FAN_AUGMENT, np.random.default_rng(3))
    b = augment(s, FAN_AUGMENT, np.random.default_rng(3))
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.landmarks.points, b.landmarks.points)


def test_sampled_parameters_respect_ranges():
    r = np.random.default_rng(0)
    for cfg in (FAN_AUGMENT, GUIDED_AUGMENT):
        ps = [sample_augment(cfg, r) for _ in range(500)]
        angles = np.array([p.angle for p in ps])
        scales = np.array([p.scale for p in ps])
        assert np.abs(angles).max() <= cfg.rotation and np.abs(angles).max() > 0.9 * cfg.rotation
        assert cfg.scale_range[0] <= scales.min() and scales.max() <= cfg.scale_range[1]
        assert 0.4 < np.mean([p.flip for p in ps]) < 0.6
        sides = [o[2] for p in ps if (o := p.occlusion)]
        assert min(sides) >= 0.1 and max(sides) <= 0.3
    assert (FAN_AUGMENT.rotation, FAN_AUGMENT.scale_range) == (50.0, (0.8, 1.2))
    assert (GUIDED_AUGMENT.rotation, GUIDED_AUGMENT.scale_range) == (70.0, (0.7, 1.3))


def test_photometric_keeps_landmarks_and_range(rng):
    s = _sample(rng)
    p = AugmentParams(jitter=(1.3, 0.7, 1.1), occlusion=(0.1, 0.2, 0.3, 0.25), noise_seed=9)
    out = apply_augment(s, p)
    np.testing.assert_array_equal(out.landmarks.points, s.landmarks.points)
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert not np.array_equal(out.image[10:22, 5:19], np.clip(s.image[10:22, 5:19] * [1.3, 0.7, 1.1], 0, 1))


def test_augmented_crop_matches_two_step_landmarks(rng):
    s = _sample(rng, size=96, with_z=True)
    for _ in range(10):
        p = sample_augment(GUIDED_AUGMENT, rng)
        one, _ = augmented_crop(s, s.bbox, 64, p)
        two = apply_augment(crop_and_resize(s, s.bbox, 64)[0], p)
        np.testing.assert_allclose(one.landmarks.points, two.landmarks.points, atol=1e-9)
        # depth normalised by d is unchanged by the similarity
        src = s.landmarks.permuted(FLIP_PERM_68) if p.flip else s.landmarks
        np.testing.assert_allclose(one.landmarks.z / one.bbox.d, src.z / s.bbox.d, atol=1e-9)


# --- perturbations ---------------------------------------------------------------


def test_perturb_bbox_identity_and_determinism():
    box = BoundingBox(10, 20, 40, 50)
    assert perturb_bbox(box, 0.0, 1) == box
    assert perturb_bbox(box, 0.3, 11) == perturb_bbox(box, 0.3, 11)
    with pytest.raises(ConfigurationError):
        perturb_bbox(box, 1.0, 0)


def test_perturb_bbox_distribution():
    box = BoundingBox(10, 20, 40, 50)
    p = 0.2
    r = np.random.default_rng(0)
    cx, cy = box.center
    draws = [perturb_bbox(box, p, r) for _ in range(10_000)]
    dx = np.array([b.center[0] - cx for b in draws]) / (p * box.d)
    dy = np.array([b.center[1] - cy for b in draws]) / (p * box.d)
    f = np.array([b.w / box.w for b in draws])
    assert np.abs(dx).max() <= 1 and np.abs(dy).max() <= 1
    assert stats.kstest(dx, "uniform", args=(-1, 2)).pvalue > 0.01
    assert stats.kstest(dy, "uniform", args=(-1, 2)).pvalue > 0.01
    assert stats.kstest(f, "uniform", args=(1 - p, 2 * p)).pvalue > 0.01


def test_downscale_face(rng):
    s = _sample(rng, size=96)
    face = max(s.bbox.w, s.bbox.h)
    low = downscale_face(s, 30)
    assert low.image.shape == s.image.shape
    np.testing.assert_array_equal(low.landmarks.points, s.landmarks.points)
    assert np.abs(low.image - s.image).mean() > 0.05
    same = downscale_face(s, face)
    np.testing.assert_allclose(same.image, s.image, atol=1e-6)
    with pytest.raises(ConfigurationError):
        downscale_face(s, 4)


# --- synthetic generator -----------------------------------------------------------


def test_frontal_projection_is_symmetric():
    cam = Camera(0.0, 0.0, 0.0, 40.0, 80.0, 80.0, (1.0, 1.0, 1.0))
    pts = project(shaped_template(cam.identity), cam)
    mirrored = pts[FLIP_PERM_68]
    np.testing.assert_allclose(mirrored[:, 0], 2 * cam.tx - pts[:, 0], atol=1e-6)
    np.testing.assert_allclose(mirrored[:, 1], pts[:, 1], atol=1e-6)


def test_stored_landmarks_are_the_projection(small_dataset_dir):
    recs = read_manifest(small_dataset_dir)
    for r in recs:
        stem = r.image.split("/")[-1][:-4]
        cam = load_camera(small_dataset_dir / "camera" / f"{stem}.json")
        expect = quantize(project(shaped_template(cam.identity), cam))[subset_indices(5)]
        np.testing.assert_array_equal(read_pts(small_dataset_dir / r.landmarks).xy, expect[:, :2])
        np.testing.assert_array_equal(read_depth(small_dataset_dir / r.depth), expect[:, 2])
        assert r.yaw == cam.yaw


def test_yaw_coverage_of_camera_sampler():
    r = np.random.default_rng(0)
    yaws = np.abs([sample_camera(r).yaw for _ in range(3000)])
    for lo, hi in YAW_BINS:
        frac = np.mean((yaws >= lo) & ((yaws < hi) if hi < 90 else (yaws <= hi)))
        assert frac >= 0.25


def test_synth_is_byte_deterministic(tmp_path):
    a = synth_generate(3, 5, tmp_path / "a", num_landmarks=68)
    b = synth_generate(3, 5, tmp_path / "b", num_landmarks=68)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 13
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(read_manifest(a)) == 3 and a.read_bytes() == b.read_bytes()


def test_synth_rejects_empty(tmp_path):
    with pytest.raises(ConfigurationError):
        synth_generate(0, 1, tmp_path)


def test_loaded_samples_are_consistent(small_dataset):
    assert len(small_dataset) == 20
    for s in small_dataset:
        assert s.image.shape == (160, 160, 3) and s.image.dtype == np.float32
        assert len(s.landmarks) == 5 and s.landmarks.z is not None
        assert s.bbox.d > 0
