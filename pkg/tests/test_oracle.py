"""Procedural shapes, corrupted view stacks, and dataset I/O."""

import json

import numpy as np
import pytest

from cloudfill import geometry, oracle, views


def _spec(family, seed=0):
    return oracle.random_spec(family, seed)


# ---------------------------------------------------------------------------
# shape synthesis


def test_unknown_family():
    with pytest.raises(ValueError):
        oracle.random_spec("sphere", 0)


def test_cylinder_on_analytic_surface():
    spec = oracle.ShapeSpec("cylinder", {"radius": 0.3, "height": 0.8}, seed=1)
    pts = oracle.synth_shape(spec, 16384)
    assert pts.shape == (16384, 3)
    r = np.hypot(pts[:, 0], pts[:, 2])
    y = pts[:, 1]
    on_lateral = np.abs(r - 0.3) < 1e-6
    on_cap = (np.abs(np.abs(y) - 0.4) < 1e-6) & (r <= 0.3 + 1e-6)
    assert np.all(on_lateral | on_cap)
    assert np.abs(y).max() <= 0.4 + 1e-6


def test_shapes_fit_unit_cube_and_are_deterministic():
    for family in oracle.FAMILIES:
        spec = _spec(family, seed=3)
        a = oracle.synth_shape(spec, 4096)
        b = oracle.synth_shape(spec, 4096)
        assert np.array_equal(a, b)
        assert np.abs(a).max() <= 0.5 + 1e-9, family


def test_chair_regions_populated():
    spec = _spec("chair_like", seed=5)
    p = spec.params
    pts = oracle.synth_shape(spec, 8192)
    seat_y = p["seat_h"]
    seat = np.abs(pts[:, 1] - seat_y) <= p["slab"] / 2 + 1e-9
    back = pts[:, 1] > seat_y + p["slab"]
    legs = pts[:, 1] < seat_y - p["slab"]
    assert seat.sum() > 0 and back.sum() > 0
    # at least 3 distinct leg quadrants occupied
    lp = pts[legs]
    quadrants = {(sx, sz) for sx, sz in zip(np.sign(lp[:, 0]), np.sign(lp[:, 2]))}
    assert len(quadrants) >= 3


def test_area_weighted_sampling():
    # two boxes with 4:1 surface area -> point counts near 4:1
    spec = oracle.ShapeSpec("composite", {"n_parts": 2, "mix_seed": 0}, seed=0)
    big = oracle.Box((0, 0, 0), (0.4, 0.4, 0.4))
    small = oracle.Box((0, 0, 0), (0.2, 0.2, 0.2))
    rng = np.random.default_rng(0)
    areas = np.array([big.area(), small.area()])
    counts = rng.multinomial(10000, areas / areas.sum())
    assert abs(counts[0] / 10000 - 0.8) < 0.02


# ---------------------------------------------------------------------------
# partial scans


def test_make_partial_count_and_visibility():
    gt = oracle.synth_shape(_spec("chair_like", 7), 16384)
    partial, view = oracle.make_partial(gt, 2048)
    assert partial.shape == (2048, 3)
    assert view.pose.azimuth == 0.0 and view.pose.elevation == 0.0
    # every partial point lies near the visible surface
    pixel = 2 * views.LATERAL_HALF_RANGE / view.width
    d, _ = geometry.nearest_neighbors(partial, gt, backend="grid")
    assert d.max() < 2 * pixel


def test_partial_covers_at_most_front():
    # closed cylinder seen from +z: the far half is occluded
    gt = oracle.synth_shape(oracle.ShapeSpec(
        "cylinder", {"radius": 0.35, "height": 0.7}, seed=2), 16384)
    partial, _ = oracle.make_partial(gt, 2048)
    pixel = 2 * views.LATERAL_HALF_RANGE / 128
    d, _ = geometry.nearest_neighbors(gt, partial, backend="grid")
    covered = float(np.mean(d < 2 * pixel))
    assert covered <= 0.6


# ---------------------------------------------------------------------------
# dreamed views


def test_profile_validation():
    with pytest.raises(ValueError):
        oracle.InconsistencyProfile(depth_noise_sigma=-0.1)
    with pytest.raises(ValueError):
        oracle.InconsistencyProfile(outlier_rate=1.5)
    assert oracle.PROFILES["clean"].is_zero()
    assert not oracle.PROFILES["severe"].is_zero()


def test_clean_profile_is_identity():
    gt = oracle.synth_shape(_spec("table_like", 9), 8192)
    rig = views.canonical_rig(4)
    dreamed = oracle.dream_views(gt, rig, oracle.PROFILES["clean"], seed=0,
                                 width=64, height=64)
    for pose, dv in zip(rig, dreamed):
        ref = views.render_depth(gt, pose, 64, 64)
        assert np.array_equal(dv.depth, ref.depth)


def test_dream_views_deterministic():
    gt = oracle.synth_shape(_spec("lamp_like", 11), 8192)
    rig = views.canonical_rig(4)
    a = oracle.dream_views(gt, rig, oracle.PROFILES["severe"], seed=3,
                           width=64, height=64)
    b = oracle.dream_views(gt, rig, oracle.PROFILES["severe"], seed=3,
                           width=64, height=64)
    for va, vb in zip(a, b):
        assert np.array_equal(va.depth, vb.depth)


def test_outlier_rate_calibrated():
    gt = oracle.synth_shape(_spec("box_frame", 13), 8192)
    rig = views.canonical_rig(6)
    profile = oracle.InconsistencyProfile(outlier_rate=0.05)
    fracs = []
    for seed in range(5):
        for dv in oracle.dream_views(gt, rig, profile, seed=seed,
                                     width=96, height=96):
            ref = views.render_depth(gt, dv.pose, 96, 96)
            changed = (dv.depth != ref.depth).sum()
            fracs.append(changed / ref.foreground_mask().sum())
    # overwrites can land on existing foreground, so observed <= nominal
    assert 0.02 < np.mean(fracs) < 0.06


def test_corruption_degrades_merge():
    gt = oracle.synth_shape(_spec("chair_like", 17), 16384)
    rig = views.canonical_rig(6)

    def merge(profile, seed):
        stack = oracle.dream_views(gt, rig, profile, seed=seed,
                                   width=128, height=128)
        return np.concatenate([views.back_project(v) for v in stack])

    clean = geometry.chamfer_l2(merge(oracle.PROFILES["clean"], 0), gt)
    jit = oracle.InconsistencyProfile(per_view_scale_jitter=0.1)
    noisy = geometry.chamfer_l2(merge(jit, 0), gt)
    assert noisy > clean
    # clean merge stays below the 2-pixel quantization bound
    pixel = 2 * views.LATERAL_HALF_RANGE / 128
    assert clean < (2 * pixel) ** 2


def test_erosion_shrinks_silhouette():
    gt = oracle.synth_shape(_spec("cylinder", 19), 8192)
    profile = oracle.InconsistencyProfile(silhouette_erosion=2)
    rig = views.canonical_rig(2)
    dreamed = oracle.dream_views(gt, rig, profile, seed=0, width=64, height=64)
    for pose, dv in zip(rig, dreamed):
        ref = views.render_depth(gt, pose, 64, 64)
        assert dv.foreground_mask().sum() < ref.foreground_mask().sum()
        assert not (dv.foreground_mask() & ~ref.foreground_mask()).any()


# ---------------------------------------------------------------------------
# on-disk formats


def test_xyzb_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(100, 3)).astype(np.float32)
    p = tmp_path / "c.xyzb"
    oracle.write_xyzb(p, pts)
    raw = p.read_bytes()
    assert raw[:4] == b"XYZB"
    assert len(raw) == 4 + 4 + 100 * 12
    back = oracle.read_xyzb(p)
    assert np.array_equal(back.astype(np.float32), pts)


def test_xyzb_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.xyzb"
    p.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(oracle.DatasetError):
        oracle.read_xyzb(p)
    q = tmp_path / "short.xyzb"
    q.write_bytes(b"XYZB" + (5).to_bytes(4, "little") + b"\x00" * 12)
    with pytest.raises(oracle.DatasetError):
        oracle.read_xyzb(q)


def test_export_load_roundtrip_byte_identical(tmp_path):
    sample = oracle.generate_sample(0, 0, "table_like", oracle.PROFILES["mild"],
                                    v_views=2, n_partial=128, n_gt=2048,
                                    width=32, height=32)
    d1 = tmp_path / "one"
    oracle.export_sample(d1, sample.partial, sample.input_view, sample.views,
                         sample.gt, sample.meta)
    loaded = oracle.load_sample(d1)
    assert len(loaded.views) == 2
    assert loaded.meta["family"] == "table_like"
    d2 = tmp_path / "two"
    oracle.export_sample(d2, loaded.partial, loaded.input_view, loaded.views,
                         loaded.gt, loaded.meta)
    for name in ("partial.xyzb", "gt.xyzb", "input_depth.pgm", "view_0.pgm",
                 "view_1.pgm", "meta.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_load_sample_missing_pieces(tmp_path):
    with pytest.raises(oracle.DatasetError):
        oracle.load_sample(tmp_path / "nothing")


def test_hand_authored_fixture_loads():
    import pathlib
    fixture = pathlib.Path(__file__).parent / "fixtures" / "mini_sample"
    sample = oracle.load_sample(fixture)
    assert sample.partial.shape == (4, 3)
    assert sample.gt.shape == (8, 3)
    assert len(sample.views) == 1
    assert sample.views[0].pose.azimuth == 180.0
    assert sample.meta["family"] == "handmade"


# ---------------------------------------------------------------------------
# dataset assembly


def test_sample_seed_stable():
    assert oracle.sample_seed(0, 1) == oracle.sample_seed(0, 1)
    assert oracle.sample_seed(0, 1) != oracle.sample_seed(0, 2)
    assert oracle.sample_seed(0, 1) != oracle.sample_seed(1, 1)


def test_synth_dataset_and_load_split(tmp_path):
    counts = oracle.synth_dataset(tmp_path, n_train=3, n_val=1, n_test=1,
                                  profile=oracle.PROFILES["clean"], v_views=2,
                                  n_partial=64, n_gt=1024, width=32, height=32)
    assert counts == {"train": 3, "val": 1, "test": 1}
    train = oracle.load_split(tmp_path, "train")
    assert len(train) == 3
    fams = [s.meta["family"] for s in train]
    assert fams == list(oracle.FAMILIES[:3])
    with pytest.raises(oracle.DatasetError):
        oracle.load_split(tmp_path, "extra")
