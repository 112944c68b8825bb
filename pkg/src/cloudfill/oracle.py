"""Synthetic data oracle.

Procedural CSG-style shapes stand in for mesh datasets; posed depth
stacks with parameterized image-space corruption stand in for the
generative multi-view pipeline. Everything is deterministic given seeds,
and externally produced depth stacks can be dropped into the same
on-disk layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry, views
from .views import BACKGROUND, CameraPose, DepthView, ViewRig

FAMILIES = ("box_frame", "chair_like", "lamp_like", "table_like", "cylinder", "composite")

INPUT_POSE = CameraPose(azimuth=0.0, elevation=0.0)   # fixed +z scanning viewpoint


class DatasetError(IOError):
    pass


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Box:
    center: tuple
    size: tuple   # full extents

    def area(self):
        a, b, c = self.size
        return 2.0 * (a * b + b * c + c * a)

    def sample(self, rng, n):
        a, b, c = self.size
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.empty((n, 3))
        half = np.array(self.size) / 2.0
        for f in range(6):
            m = faces == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            pts[m, axis] = sign * half[axis]
            pts[m, others[0]] = u[m, 0] * self.size[others[0]]
            pts[m, others[1]] = u[m, 1] * self.size[others[1]]
        return pts + np.array(self.center)


@dataclass
class Cylinder:
    center: tuple
    radius: float
    height: float     # along +y

    def area(self):
        return 2 * np.pi * self.radius * self.height + 2 * np.pi * self.radius ** 2

    def sample(self, rng, n):
        lat = 2 * np.pi * self.radius * self.height
        cap = np.pi * self.radius ** 2
        part = rng.choice(3, size=n, p=np.array([lat, cap, cap]) / (lat + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.empty((n, 3))
        m = part == 0
        pts[m, 0] = self.radius * np.cos(theta[m])
        pts[m, 2] = self.radius * np.sin(theta[m])
        pts[m, 1] = rng.uniform(-0.5, 0.5, size=m.sum()) * self.height
        for p, sign in ((1, 1.0), (2, -1.0)):
            m = part == p
            r = self.radius * np.sqrt(rng.random(m.sum()))
            pts[m, 0] = r * np.cos(theta[m])
            pts[m, 2] = r * np.sin(theta[m])
            pts[m, 1] = sign * self.height / 2.0
        return pts + np.array(self.center)


@dataclass
class ConeShell:
    """Lateral surface of a frustum along +y (lamp shade)."""
    center: tuple
    r_bottom: float
    r_top: float
    height: float

    def area(self):
        slant = np.hypot(self.r_bottom - self.r_top, self.height)
        return np.pi * (self.r_bottom + self.r_top) * slant

    def sample(self, rng, n):
        # area-uniform in v: radius grows linearly, density ~ r(v)
        r0, r1 = self.r_bottom, self.r_top
        u = rng.random(n)
        if abs(r0 - r1) < 1e-12:
            v = u
        else:
            v = (np.sqrt(r0 ** 2 + u * (r1 ** 2 - r0 ** 2)) - r0) / (r1 - r0)
        r = r0 + (r1 - r0) * v
        theta = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([r * np.cos(theta),
                        (v - 0.5) * self.height,
                        r * np.sin(theta)], axis=1)
        return pts + np.array(self.center)


# ---------------------------------------------------------------------------
# shape families


@dataclass
class ShapeSpec:
    family: str
    params: dict
    seed: int


def random_spec(family, seed):
    """Draw per-family dimensions; all shapes stay inside the unit cube."""
    if family not in FAMILIES:
        raise ValueError(f"unknown shape family {family!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, FAMILIES.index(family)]))
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    if family == "box_frame":
        params = {"w": u(0.5, 0.9), "h": u(0.5, 0.9), "d": u(0.5, 0.9),
                  "beam": u(0.04, 0.08)}
    elif family == "cylinder":
        params = {"radius": u(0.15, 0.4), "height": u(0.4, 0.9)}
    elif family == "chair_like":
        params = {"w": u(0.4, 0.6), "d": u(0.35, 0.55), "seat_h": u(0.0, 0.1),
                  "back_h": u(0.3, 0.45), "leg": u(0.04, 0.07),
                  "leg_h": u(0.25, 0.4), "slab": u(0.04, 0.07)}
    elif family == "table_like":
        params = {"w": u(0.5, 0.9), "d": u(0.4, 0.8), "top": u(0.04, 0.08),
                  "leg": u(0.04, 0.08), "leg_h": u(0.4, 0.6)}
    elif family == "lamp_like":
        params = {"base_r": u(0.12, 0.2), "pole_r": u(0.02, 0.04),
                  "pole_h": u(0.4, 0.6), "shade_r": u(0.15, 0.3),
                  "shade_top": u(0.06, 0.14), "shade_h": u(0.15, 0.25)}
    else:  # composite
        params = {"n_parts": int(rng.integers(2, 5)), "mix_seed": int(rng.integers(2 ** 31))}
    return ShapeSpec(family=family, params=params, seed=seed)


def build_primitives(spec):
    p = spec.params
    f = spec.family
    if f == "box_frame":
        w, h, d, t = p["w"], p["h"], p["d"], p["beam"]
        prims = []
        for sy in (-1, 1):
            for sz in (-1, 1):
                prims.append(Box((0, sy * (h - t) / 2, sz * (d - t) / 2), (w, t, t)))
        for sx in (-1, 1):
            for sz in (-1, 1):
                prims.append(Box((sx * (w - t) / 2, 0, sz * (d - t) / 2), (t, h, t)))
        for sx in (-1, 1):
            for sy in (-1, 1):
                prims.append(Box((sx * (w - t) / 2, sy * (h - t) / 2, 0), (t, t, d)))
        return prims
    if f == "cylinder":
        return [Cylinder((0, 0, 0), p["radius"], p["height"])]
    if f == "chair_like":
        w, d = p["w"], p["d"]
        slab, leg, leg_h = p["slab"], p["leg"], p["leg_h"]
        seat_y = p["seat_h"]
        prims = [Box((0, seat_y, 0), (w, slab, d)),                               # seat
                 Box((0, seat_y + p["back_h"] / 2 + slab / 2, -d / 2 + slab / 2),  # back
                     (w, p["back_h"], slab))]
        for sx in (-1, 1):
            for sz in (-1, 1):
                prims.append(Box((sx * (w - leg) / 2, seat_y - slab / 2 - leg_h / 2,
                                  sz * (d - leg) / 2), (leg, leg_h, leg)))
        return prims
    if f == "table_like":
        w, d = p["w"], p["d"]
        top, leg, leg_h = p["top"], p["leg"], p["leg_h"]
        prims = [Box((0, leg_h / 2, 0), (w, top, d))]
        for sx in (-1, 1):
            for sz in (-1, 1):
                prims.append(Box((sx * (w - leg) / 2, 0, sz * (d - leg) / 2),
                                 (leg, leg_h, leg)))
        return prims
    if f == "lamp_like":
        pole_h = p["pole_h"]
        base_y = -pole_h / 2
        return [Cylinder((0, base_y, 0), p["base_r"], 0.05),
                Cylinder((0, 0, 0), p["pole_r"], pole_h),
                ConeShell((0, pole_h / 2 + p["shade_h"] / 2, 0),
                          p["shade_r"], p["shade_top"], p["shade_h"])]
    if f == "composite":
        rng = np.random.default_rng(p["mix_seed"])
        prims = []
        for _ in range(p["n_parts"]):
            c = tuple(rng.uniform(-0.25, 0.25, size=3))
            if rng.random() < 0.5:
                prims.append(Box(c, tuple(rng.uniform(0.1, 0.45, size=3))))
            else:
                prims.append(Cylinder(c, float(rng.uniform(0.05, 0.2)),
                                      float(rng.uniform(0.2, 0.45))))
        return prims
    raise ValueError(f"unknown shape family {f!r}")


def synth_shape(spec, n):
    """Area-uniform surface samples of the procedural shape; deterministic."""
    prims = build_primitives(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    areas = np.array([pr.area() for pr in prims])
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [pr.sample(rng, c) for pr, c in zip(prims, counts) if c > 0]
    pts = np.concatenate(parts, axis=0)
    perm = rng.permutation(len(pts))
    return pts[perm]


# ---------------------------------------------------------------------------
# partial scan + corrupted view stacks


@dataclass
class InconsistencyProfile:
    depth_noise_sigma: float = 0.0
    per_view_scale_jitter: float = 0.0
    silhouette_erosion: int = 0
    dropout_patch_rate: float = 0.0
    outlier_rate: float = 0.0

    def __post_init__(self):
        if self.depth_noise_sigma < 0 or self.per_view_scale_jitter < 0:
            raise ValueError("profile sigmas must be >= 0")
        for r in (self.dropout_patch_rate, self.outlier_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError("profile rates must lie in [0,1]")

    def is_zero(self):
        return (self.depth_noise_sigma == 0 and self.per_view_scale_jitter == 0
                and self.silhouette_erosion == 0 and self.dropout_patch_rate == 0
                and self.outlier_rate == 0)


PROFILES = {
    "clean": InconsistencyProfile(),
    "mild": InconsistencyProfile(depth_noise_sigma=0.01, per_view_scale_jitter=0.02,
                                 silhouette_erosion=1, dropout_patch_rate=0.1,
                                 outlier_rate=0.01),
    "severe": InconsistencyProfile(depth_noise_sigma=0.03, per_view_scale_jitter=0.08,
                                   silhouette_erosion=2, dropout_patch_rate=0.3,
                                   outlier_rate=0.05),
}


def make_partial(gt, n, width=128, height=128):
    """Single fixed-viewpoint scan: render from +z, back-project to n points."""
    view = views.render_depth(gt, INPUT_POSE, width, height)
    if not view.foreground_mask().any():
        raise views.RenderError("make_partial: degenerate silhouette")
    partial = views.back_project(view, n, seed=7)
    return partial, view


def _corrupt_view(view, profile, rng):
    depth = view.depth.astype(np.float64).copy()
    fg = view.foreground_mask()
    hi = 1.0 - 1.0 / 65535.0
    if profile.per_view_scale_jitter > 0:
        factor = 1.0 + profile.per_view_scale_jitter * rng.uniform(-1.0, 1.0)
        depth[fg] = np.clip(depth[fg] * factor, 0.0, hi)
    if profile.depth_noise_sigma > 0:
        depth[fg] = np.clip(depth[fg] + rng.normal(0, profile.depth_noise_sigma,
                                                   size=int(fg.sum())), 0.0, hi)
    if profile.silhouette_erosion > 0:
        kept = ndimage.binary_erosion(fg, iterations=profile.silhouette_erosion)
        depth[fg & ~kept] = BACKGROUND
        fg = kept
    if profile.dropout_patch_rate > 0:
        h, w = depth.shape
        for _ in range(8):
            if rng.random() < profile.dropout_patch_rate:
                ph = int(rng.integers(h // 12 + 1, h // 5 + 2))
                pw = int(rng.integers(w // 12 + 1, w // 5 + 2))
                y0 = int(rng.integers(0, max(h - ph, 1)))
                x0 = int(rng.integers(0, max(w - pw, 1)))
                depth[y0:y0 + ph, x0:x0 + pw] = BACKGROUND
        fg = depth < BACKGROUND - 0.5 / 65535.0
    if profile.outlier_rate > 0:
        h, w = depth.shape
        count = int(round(profile.outlier_rate * int(fg.sum())))
        if count > 0:
            ys = rng.integers(0, h, size=count)
            xs = rng.integers(0, w, size=count)
            depth[ys, xs] = rng.uniform(0.1, 0.9, size=count)
    return DepthView(view.width, view.height, depth.astype(np.float32), view.pose)


def dream_views(gt, rig, profile, seed, width=128, height=128):
    """Posed depth stack of the GT shape with per-view image-space corruption."""
    out = []
    for i, pose in enumerate(rig):
        view = views.render_depth(gt, pose, width, height)
        if not profile.is_zero():
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            view = _corrupt_view(view, profile, rng)
        out.append(view)
    return out


# ---------------------------------------------------------------------------
# on-disk samples

_XYZB_MAGIC = b"XYZB"


def write_xyzb(path, points):
    pts = np.asarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("write_xyzb expects (n,3) points")
    with open(path, "wb") as f:
        f.write(_XYZB_MAGIC)
        f.write(struct.pack("<I", len(pts)))
        f.write(pts.tobytes())


def read_xyzb(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _XYZB_MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        buf = f.read(12 * count)
        if len(buf) != 12 * count:
            raise DatasetError(f"{path}: truncated payload")
    return np.frombuffer(buf, dtype="<f4").reshape(count, 3).astype(np.float64)


@dataclass
class Sample:
    partial: np.ndarray
    gt: np.ndarray
    input_view: DepthView
    views: list
    meta: dict = field(default_factory=dict)


def export_sample(sample_dir, partial, input_view, view_stack, gt, meta):
    d = Path(sample_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_xyzb(d / "partial.xyzb", partial)
    write_xyzb(d / "gt.xyzb", gt)
    views.write_pgm16(d / "input_depth.pgm", input_view)
    for i, v in enumerate(view_stack):
        views.write_pgm16(d / f"view_{i}.pgm", v)
    with open(d / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_sample(sample_dir):
    d = Path(sample_dir)
    try:
        partial = read_xyzb(d / "partial.xyzb")
        gt = read_xyzb(d / "gt.xyzb")
        input_view = views.read_pgm16(d / "input_depth.pgm")
    except FileNotFoundError as e:
        raise DatasetError(f"incomplete sample at {d}: {e}") from None
    stack = []
    i = 0
    while (d / f"view_{i}.pgm").exists():
        stack.append(views.read_pgm16(d / f"view_{i}.pgm"))
        i += 1
    if not stack:
        raise DatasetError(f"no views found in {d}")
    meta = {}
    if (d / "meta.json").exists():
        meta = json.loads((d / "meta.json").read_text())
    return Sample(partial=partial, gt=gt, input_view=input_view, views=stack, meta=meta)


def sample_seed(global_seed, index):
    """Stable per-sample seed derivation."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def generate_sample(global_seed, index, family, profile, v_views=6,
                    n_partial=2048, n_gt=16384, width=128, height=128,
                    elevation=5.0):
    seed = sample_seed(global_seed, index)
    spec = random_spec(family, seed)
    gt = synth_shape(spec, n_gt)
    partial, input_view = make_partial(gt, n_partial, width, height)
    rig = views.canonical_rig(v_views, elevation=elevation)
    stack = dream_views(gt, rig, profile, seed=seed, width=width, height=height)
    meta = {"family": family, "seed": seed, "index": index,
            "spec_params": spec.params, "profile": asdict(profile)}
    return Sample(partial=partial, gt=gt, input_view=input_view, views=stack, meta=meta)


def synth_dataset(root, n_train=200, n_val=20, n_test=20, profile=None,
                  v_views=6, n_partial=2048, n_gt=16384, width=128, height=128,
                  seed=0, families=FAMILIES):
    """Write train/val/test splits in the sample layout; returns counts."""
    profile = profile or InconsistencyProfile()
    root = Path(root)
    counts = {}
    index = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for j in range(n):
            family = families[index % len(families)]
            sample = generate_sample(seed, index, family, profile, v_views,
                                     n_partial, n_gt, width, height)
            export_sample(split_dir / f"sample_{j:04d}", sample.partial,
                          sample.input_view, sample.views, sample.gt, sample.meta)
            index += 1
        counts[split] = n
    return counts


def load_split(root, split):
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory {split_dir}")
    dirs = sorted(p for p in split_dir.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not dirs:
        raise DatasetError(f"no samples under {split_dir}")
    return [load_sample(p) for p in dirs]
