"""Cameras, depth rendering, and back-projection.

Shapes live in the unit cube centered at the origin. Projection is
orthographic: a camera at (azimuth, elevation) on the unit sphere looks
at the origin. Depth along the view ray is mapped from the fixed range
[-sqrt(3)/2, +sqrt(3)/2] to [0, 1-eps], with 1.0 reserved as the
background sentinel, so back-projection needs no per-view state.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, tensor

DEPTH_HALF_RANGE = math.sqrt(3.0) / 2.0   # max |coordinate along any ray| in the unit cube
LATERAL_HALF_RANGE = math.sqrt(3.0) / 2.0
BACKGROUND = 1.0
_DEPTH_EPS = 1.0 / 65535.0                # foreground never reaches the sentinel


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    azimuth: float     # degrees, about +y
    elevation: float   # degrees above the xz-plane

    def direction(self):
        """Unit vector from the origin toward the camera."""
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        return np.array([math.cos(el) * math.sin(az),
                         math.sin(el),
                         math.cos(el) * math.cos(az)])

    def basis(self):
        """Orthonormal (right, up, view) frame; view points at the origin."""
        pos = self.direction()
        view = -pos
        up_world = np.array([0.0, 1.0, 0.0])
        up = up_world - np.dot(up_world, view) * view
        norm = np.linalg.norm(up)
        if norm < 1e-9:
            up = np.array([0.0, 0.0, 1.0])
        else:
            up = up / norm
        right = np.cross(up, view)
        right /= np.linalg.norm(right)
        return right, up, view

    def to_matrix(self):
        right, up, view = self.basis()
        return np.stack([right, up, view])

    @classmethod
    def from_matrix(cls, m):
        view = m[2]
        pos = -view
        elevation = math.degrees(math.asin(np.clip(pos[1], -1.0, 1.0)))
        azimuth = math.degrees(math.atan2(pos[0], pos[2])) % 360.0
        return cls(azimuth=azimuth, elevation=elevation)


@dataclass
class DepthView:
    width: int
    height: int
    depth: np.ndarray        # (h,w) float in [0,1]; 1.0 = background
    pose: CameraPose

    def foreground_mask(self):
        return self.depth < BACKGROUND - _DEPTH_EPS / 2

    def copy(self):
        return DepthView(self.width, self.height, self.depth.copy(), self.pose)


@dataclass
class ViewRig:
    views: list

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)


def canonical_rig(v, elevation=5.0):
    """v azimuths evenly spaced over 360 degrees, all at the given elevation."""
    if v not in (2, 4, 6, 8):
        raise ValueError(f"canonical_rig: unsupported view count {v}")
    poses = [CameraPose(azimuth=360.0 * i / v, elevation=elevation) for i in range(v)]
    return ViewRig(views=poses)


# ---------------------------------------------------------------------------
# projection


def _camera_coords(points, pose):
    right, up, view = pose.basis()
    pts = np.asarray(points, dtype=np.float64)
    return pts @ right, pts @ up, pts @ view


def render_depth(points, pose, width, height):
    """Orthographic z-buffer render; splat radius one pixel."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise RenderError("render_depth: empty cloud")
    if width <= 0 or height <= 0:
        raise RenderError("render_depth: zero-area image")
    x, y, z = _camera_coords(pts, pose)
    # image x to the right, image y downward (row 0 at the top)
    px = ((x + LATERAL_HALF_RANGE) / (2 * LATERAL_HALF_RANGE) * width).astype(np.int64)
    py = ((LATERAL_HALF_RANGE - y) / (2 * LATERAL_HALF_RANGE) * height).astype(np.int64)
    px = np.clip(px, 0, width - 1)
    py = np.clip(py, 0, height - 1)
    d = (z + DEPTH_HALF_RANGE) / (2 * DEPTH_HALF_RANGE) * (1.0 - _DEPTH_EPS)
    d = np.clip(d, 0.0, 1.0 - _DEPTH_EPS)
    depth = np.full((height, width), BACKGROUND)
    np.minimum.at(depth, (py, px), d)
    return DepthView(width=width, height=height, depth=depth.astype(np.float32), pose=pose)


def back_project(view, n=None, seed=0):
    """Invert the orthographic render on foreground pixels.

    If more foreground pixels than n: FPS down to n. If fewer: resample
    with replacement and sub-pixel jitter until n is reached.
    """
    mask = view.foreground_mask()
    py, px = np.nonzero(mask)
    if len(px) == 0:
        raise RenderError("back_project: all-background view")
    d = view.depth[py, px].astype(np.float64)
    u = (px + 0.5) / view.width
    v = (py + 0.5) / view.height

    def lift(u, v, d):
        x = u * 2 * LATERAL_HALF_RANGE - LATERAL_HALF_RANGE
        y = LATERAL_HALF_RANGE - v * 2 * LATERAL_HALF_RANGE
        z = d / (1.0 - _DEPTH_EPS) * (2 * DEPTH_HALF_RANGE) - DEPTH_HALF_RANGE
        right, up, viewdir = view.pose.basis()
        return np.outer(x, right) + np.outer(y, up) + np.outer(z, viewdir)

    pts = lift(u, v, d)
    if n is None or len(pts) == n:
        return pts
    if len(pts) > n:
        idx = geometry.farthest_point_sample(pts, n, start=geometry.centroid_start(pts))
        return pts[idx]
    rng = np.random.default_rng(seed)
    extra = n - len(pts)
    pick = rng.integers(0, len(pts), size=extra)
    ju = (u[pick] + (rng.random(extra) - 0.5) / view.width)
    jv = (v[pick] + (rng.random(extra) - 0.5) / view.height)
    jittered = lift(ju, jv, d[pick])
    return np.concatenate([pts, jittered], axis=0)


# ---------------------------------------------------------------------------
# encodings


def sinusoidal_encoding(p, d):
    """Per coordinate d/6 sine and d/6 cosine bands, frequencies 2^j * pi."""
    if d % 6 != 0 or d <= 0:
        raise ValueError(f"sinusoidal_encoding: width {d} not divisible by 6")
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    bands = d // 6
    freqs = (2.0 ** np.arange(bands)) * np.pi
    ang = arr[:, :, None] * freqs[None, None, :]        # (n,3,bands)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2)
    out = enc.reshape(len(arr), d).astype(np.float32)
    return out[0] if single else out


def pose_features(pose):
    """Raw numeric description of a pose fed to the learned embedding."""
    az = math.radians(pose.azimuth)
    el = math.radians(pose.elevation)
    d = pose.direction()
    return np.array([math.cos(az), math.sin(az), math.cos(el), math.sin(el),
                     d[0], d[1], d[2]], dtype=np.float32)


def init_pose_encoder(store, prefix="pose_enc", width=128):
    store.param(f"{prefix}/w1", (7, width), fan_in=7)
    store.param(f"{prefix}/b1", (width,), init="zeros")
    store.param(f"{prefix}/w2", (width, width), fan_in=width)
    store.param(f"{prefix}/b2", (width,), init="zeros")


def pose_encoding(pose, store, prefix="pose_enc"):
    """Two-layer perceptron embedding of the camera pose -> width-128 Tensor."""
    x = tensor.Tensor(pose_features(pose).reshape(1, -1))
    h = tensor.relu(tensor.add(tensor.matmul(x, store[f"{prefix}/w1"]),
                               tensor.reshape(store[f"{prefix}/b1"], (1, -1))))
    out = tensor.add(tensor.matmul(h, store[f"{prefix}/w2"]),
                     tensor.reshape(store[f"{prefix}/b2"], (1, -1)))
    return out


# ---------------------------------------------------------------------------
# on-disk format: 16-bit PGM + pose sidecar


class SidecarError(IOError):
    pass


def write_pgm16(path, view):
    vals = np.round(view.depth.astype(np.float64) * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{view.width} {view.height}\n65535\n".encode("ascii"))
        f.write(vals.tobytes())
    pose_path = Path(path).with_suffix(".pose")
    with open(pose_path, "w") as f:
        f.write(f"azimuth={view.pose.azimuth}\nelevation={view.pose.elevation}\n"
                f"width={view.width}\nheight={view.height}\n")


def read_pgm16(path):
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise SidecarError(f"{path}: not a binary PGM")
    width, height, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 65535:
        raise SidecarError(f"{path}: expected 16-bit maxval, got {maxval}")
    payload = raw[m.end():]
    vals = np.frombuffer(payload, dtype=">u2", count=width * height)
    depth = (vals.astype(np.float64) / 65535.0).reshape(height, width).astype(np.float32)
    pose_path = path.with_suffix(".pose")
    if not pose_path.exists():
        raise SidecarError(f"missing pose sidecar: {pose_path}")
    fields = {}
    for line in pose_path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            fields[k.strip()] = float(v.strip())
    try:
        pose = CameraPose(azimuth=fields["azimuth"], elevation=fields["elevation"])
    except KeyError as e:
        raise SidecarError(f"{pose_path}: missing field {e}") from None
    return DepthView(width=width, height=height, depth=depth, pose=pose)
