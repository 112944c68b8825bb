"""Cameras, depth rendering, back-projection, encodings, and PGM I/O."""

import numpy as np
import pytest

from cloudfill import geometry, views
from cloudfill.tensor import ParamStore


# ---------------------------------------------------------------------------
# camera poses


def test_pose_direction_unit_and_front():
    front = views.CameraPose(0.0, 0.0)
    assert np.allclose(front.direction(), [0, 0, 1], atol=1e-12)
    for az in (0, 45, 133, 270):
        for el in (-30, 0, 5, 60):
            d = views.CameraPose(az, el).direction()
            assert abs(np.linalg.norm(d) - 1.0) < 1e-12


def test_pose_matrix_roundtrip():
    for az in (0.0, 60.0, 181.5, 359.0):
        for el in (-45.0, 0.0, 5.0, 45.0):
            p = views.CameraPose(az, el)
            q = views.CameraPose.from_matrix(p.to_matrix())
            assert abs(q.azimuth - az) < 1e-6
            assert abs(q.elevation - el) < 1e-6


def test_pose_basis_orthonormal():
    r, u, v = views.CameraPose(73.0, 12.0).basis()
    m = np.stack([r, u, v])
    assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)


def test_canonical_rig():
    rig = views.canonical_rig(6)
    az = [p.azimuth for p in rig]
    assert az == [0, 60, 120, 180, 240, 300]
    assert all(p.elevation == 5.0 for p in rig)
    assert [p.azimuth for p in views.canonical_rig(2)] == [0, 180]
    for v in (2, 4, 6, 8):
        poses = list(views.canonical_rig(v))
        assert len(set((p.azimuth, p.elevation) for p in poses)) == v
    with pytest.raises(ValueError):
        views.canonical_rig(5)


# ---------------------------------------------------------------------------
# rendering


def test_render_single_point_center():
    view = views.render_depth(np.array([[0.0, 0.0, 0.0]]),
                              views.CameraPose(0.0, 0.0), 33, 33)
    py, px = np.nonzero(view.foreground_mask())
    assert len(px) == 1
    assert px[0] == 16 and py[0] == 16


def test_render_depth_range_and_errors():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, size=(300, 3))
    view = views.render_depth(pts, views.CameraPose(30.0, 5.0), 64, 64)
    assert view.depth.min() >= 0.0 and view.depth.max() <= 1.0
    assert view.foreground_mask().any()
    with pytest.raises(views.RenderError):
        views.render_depth(np.zeros((0, 3)), views.CameraPose(0, 0), 8, 8)
    with pytest.raises(views.RenderError):
        views.render_depth(pts, views.CameraPose(0, 0), 0, 8)


def test_render_zbuffer_keeps_near_point():
    # two points on the same ray from a +z camera: smaller depth wins
    pts = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
    view = views.render_depth(pts, views.CameraPose(0.0, 0.0), 9, 9)
    fg = view.depth[view.foreground_mask()]
    assert len(fg) == 1
    # camera looks down -z from +z, so z=+0.5 is nearer: view-coord depth
    # is -z, mapped low
    assert fg[0] < 0.5


def test_render_mirrored_masks_at_180():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.45, 0.45, size=(500, 3))
    a = views.render_depth(pts, views.CameraPose(40.0, 0.0), 48, 48)
    b = views.render_depth(pts, views.CameraPose(220.0, 0.0), 48, 48)
    assert np.array_equal(a.foreground_mask(), b.foreground_mask()[:, ::-1])


def test_corner_cloud_projected_extent():
    corners = np.array([[sx * 0.5, sy * 0.5, sz * 0.5]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    view = views.render_depth(corners, views.CameraPose(0.0, 0.0), 64, 64)
    py, px = np.nonzero(view.foreground_mask())
    # lateral range is +-sqrt(3)/2; corners sit at +-0.5 -> fraction of width
    half = views.LATERAL_HALF_RANGE
    lo = int((half - 0.5) / (2 * half) * 64)
    hi = int((half + 0.5) / (2 * half) * 64)
    assert abs(px.min() - lo) <= 1 and abs(px.max() - hi) <= 1
    assert abs(py.min() - lo) <= 1 and abs(py.max() - hi) <= 1


# ---------------------------------------------------------------------------
# back-projection


def test_back_project_inverts_render():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.4, 0.4, size=(400, 3))
    pose = views.CameraPose(25.0, 5.0)
    w = h = 96
    view = views.render_depth(pts, pose, w, h)
    recon = views.back_project(view)
    # one-sided: every reconstructed point near some original point,
    # within the pixel + depth quantization bound
    pixel = 2 * views.LATERAL_HALF_RANGE / w
    d, _ = geometry.nearest_neighbors(recon, pts, backend="brute")
    assert d.max() < 2.0 * pixel


def test_back_project_counts():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.4, 0.4, size=(3000, 3))
    view = views.render_depth(pts, views.CameraPose(0.0, 0.0), 64, 64)
    fg = int(view.foreground_mask().sum())
    assert len(views.back_project(view)) == fg
    assert len(views.back_project(view, n=fg)) == fg
    assert len(views.back_project(view, n=fg // 2)) == fg // 2
    up = views.back_project(view, n=fg + 500)
    assert len(up) == fg + 500
    with pytest.raises(views.RenderError):
        views.back_project(views.DepthView(8, 8, np.ones((8, 8), np.float32),
                                           views.CameraPose(0, 0)))


def test_render_backproject_render_fixed_point():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.4, 0.4, size=(2000, 3))
    pose = views.CameraPose(10.0, 5.0)
    first = views.render_depth(pts, pose, 64, 64)
    again = views.render_depth(views.back_project(first), pose, 64, 64)
    m1 = first.foreground_mask()
    m2 = again.foreground_mask()
    assert (m1 & m2).sum() >= 0.95 * m1.sum()


def test_six_view_merge_covers_shape():
    rng = np.random.default_rng(5)
    theta = rng.uniform(0, 2 * np.pi, 4000)
    z = rng.uniform(-0.4, 0.4, 4000)
    gt = np.stack([0.35 * np.cos(theta), z, 0.35 * np.sin(theta)], axis=1)
    w = 128
    merged = np.concatenate([
        views.back_project(views.render_depth(gt, pose, w, w))
        for pose in views.canonical_rig(6)])
    pixel = 2 * views.LATERAL_HALF_RANGE / w
    assert geometry.chamfer_l2(merged, gt) < (2 * pixel) ** 2


# ---------------------------------------------------------------------------
# encodings


def test_sinusoidal_encoding_origin_and_norm():
    enc = views.sinusoidal_encoding(np.zeros(3), 24)
    assert enc.shape == (24,)
    # layout: per coordinate, 4 sine bands then 4 cosine bands
    grouped = enc.reshape(3, 2, 4)
    assert np.all(grouped[:, 0] == 0.0) and np.all(grouped[:, 1] == 1.0)
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(50, 3))
    batch = views.sinusoidal_encoding(pts, 48)
    assert batch.shape == (50, 48)
    norms2 = np.sum(batch.astype(np.float64) ** 2, axis=1)
    assert np.allclose(norms2, 24.0, atol=1e-3)
    with pytest.raises(ValueError):
        views.sinusoidal_encoding(pts, 20)


def test_sinusoidal_encoding_injective_on_grid():
    # half-open grid: all bands are 2-periodic, so x=-1 and x=+1 coincide
    xs = np.arange(-1.0, 1.0 - 1e-9, 0.01)
    grid = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    enc = views.sinusoidal_encoding(grid, 24)
    uniq = np.unique(np.round(enc.astype(np.float64), 5), axis=0)
    assert len(uniq) == len(grid)


def test_pose_encoding_deterministic_and_distinct():
    store = ParamStore(0)
    views.init_pose_encoder(store)
    rig = views.canonical_rig(6)
    embs = [views.pose_encoding(p, store).data for p in rig]
    assert all(e.shape == (1, 128) for e in embs)
    assert np.array_equal(embs[0],
                          views.pose_encoding(rig.views[0], store).data)
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            assert not np.allclose(embs[i], embs[j])


# ---------------------------------------------------------------------------
# on-disk format


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.4, 0.4, size=(200, 3))
    view = views.render_depth(pts, views.CameraPose(15.0, 5.0), 32, 24)
    p = tmp_path / "v.pgm"
    views.write_pgm16(p, view)
    loaded = views.read_pgm16(p)
    assert loaded.width == 32 and loaded.height == 24
    assert loaded.pose.azimuth == 15.0 and loaded.pose.elevation == 5.0
    assert np.abs(loaded.depth.astype(np.float64) -
                  view.depth.astype(np.float64)).max() <= 0.5 / 65535 + 1e-9
    # write-read-write: identical bytes
    views.write_pgm16(tmp_path / "w.pgm", loaded)
    assert (tmp_path / "w.pgm").read_bytes() == p.read_bytes()


def test_pgm_missing_sidecar(tmp_path):
    view = views.render_depth(np.zeros((1, 3)), views.CameraPose(0, 0), 8, 8)
    p = tmp_path / "v.pgm"
    views.write_pgm16(p, view)
    (tmp_path / "v.pose").unlink()
    with pytest.raises(views.SidecarError):
        views.read_pgm16(p)


def test_pgm_rejects_wrong_depth(tmp_path):
    p = tmp_path / "v.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(views.SidecarError):
        views.read_pgm16(p)
