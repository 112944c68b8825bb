"""Completion model: patch encoder, view encoder, attention fuser,
coarse decoder, confidence filter, and offset-based consolidation.

Every stage consumes and produces `tensor.Tensor`s so one backward pass
trains the whole stack. Discrete choices (patch seeds, top-k filtering,
FPS of the merged cloud) are made on detached coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import geometry, views
from . import tensor as T
from .tensor import ParamStore, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_in: int = 2048
    k_patches: int = 128
    radius: float = 0.2
    v_views: int = 6
    n_coarse: int = 512
    keep_fraction: float = 0.75
    upsample_ratio: int = 8
    d_model: int = 128
    n_heads: int = 4
    enc_depth_points: int = 2
    enc_depth_views: int = 2
    knn_k: int = 8
    patch_cap: int = 32
    sin_width: int = 48
    image_size: int = 128
    image_channels: tuple = (16, 32, 64, 128)
    use_views: bool = True

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must lie in (0,1]")
        if self.upsample_ratio < 1 or 256 % self.upsample_ratio != 0:
            raise ConfigError("upsample_ratio must divide 256")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("n_heads must divide d_model")
        if self.sin_width % 6 != 0:
            raise ConfigError("sin_width must be divisible by 6")

    def to_dict(self):
        d = asdict(self)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "image_channels" in d:
            d["image_channels"] = tuple(d["image_channels"])
        return cls(**d)


def full_config(**overrides):
    return replace(ModelConfig(), **overrides)


def small_config(**overrides):
    base = ModelConfig(n_in=2048, k_patches=24, radius=0.3, n_coarse=256,
                       upsample_ratio=2, enc_depth_points=1, enc_depth_views=1,
                       knn_k=6, patch_cap=16, image_size=64,
                       image_channels=(8, 16, 32, 64))
    return replace(base, **overrides)


def tiny_config(**overrides):
    base = ModelConfig(n_in=64, k_patches=8, radius=0.4, v_views=2, n_coarse=32,
                       upsample_ratio=2, n_heads=2, enc_depth_points=1,
                       enc_depth_views=1, knn_k=4, patch_cap=8, image_size=16,
                       image_channels=(4, 8))
    return replace(base, **overrides)


@dataclass
class ForwardResult:
    coarse: Tensor          # (n_coarse, 3)
    dense: Tensor           # (R * n_in, 3)
    scores: Tensor          # (n_coarse,)
    f_fusion: Tensor        # (1, d)
    f_points: Tensor        # (1, d)
    f_views: Tensor | None  # (1, d) or None when views are disabled
    keep_idx: np.ndarray    # indices of coarse points kept by filtering
    filtered: Tensor        # (|keep|, 3)
    merged_size: int
    dense_parent: np.ndarray  # (R * n_in,) index of each output's source point
    p_de: Tensor            # (n_in, 3) consolidation support points
    extras: dict = field(default_factory=dict)


def _linear(store, prefix, x, din, dout, init="fanin", bias=True):
    w = store.param(f"{prefix}/w", (din, dout), init=init, fan_in=din)
    out = T.matmul(x, w)
    if bias:
        b = store.param(f"{prefix}/b", (1, dout), init="zeros")
        out = T.add(out, T.expand(b, 0, out.shape[0]))
    return out


def _cols(x, lo, hi):
    return T.gather(x, np.arange(lo, hi), axis=1)


class CompletionModel:
    """Partial cloud + posed depth stack -> coarse, filtered, dense outputs."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore(seed)
        self._build()

    # -- parameter construction (deterministic order) -----------------------

    def _build(self):
        c = self.config
        d = c.d_model
        # edge-conv rounds: widths 64 then d
        self.params.param("patch/ec1/w", (6, 64), fan_in=6)
        self.params.param("patch/ec1/b", (1, 64), init="zeros")
        self.params.param("patch/ec2/w", (128, d), fan_in=128)
        self.params.param("patch/ec2/b", (1, d), init="zeros")
        self.params.param("patch/proj/w", (d + c.sin_width, d), fan_in=d + c.sin_width)
        self.params.param("patch/proj/b", (1, d), init="zeros")
        for i in range(c.enc_depth_points):
            self._build_encoder_block(f"enc_p/{i}")
        if c.use_views:
            chans = (1,) + tuple(c.image_channels)
            for i in range(len(c.image_channels)):
                self.params.param(f"img/conv{i}/w", (chans[i + 1], chans[i], 3, 3),
                                  fan_in=chans[i] * 9)
                self.params.param(f"img/conv{i}/b", (chans[i + 1],), init="zeros")
            self.params.param("img/proj/w", (c.image_channels[-1], d),
                              fan_in=c.image_channels[-1])
            self.params.param("img/proj/b", (1, d), init="zeros")
            views.init_pose_encoder(self.params, "img/pose", width=d)
            for i in range(c.enc_depth_views):
                self._build_encoder_block(f"enc_v/{i}")
            for name in ("fuse/wq", "fuse/wk", "fuse/wv"):
                self.params.param(name, (d, d), fan_in=d)
        for i, (din, dout) in enumerate([(d, 256), (256, 512), (512, c.n_coarse * 3)]):
            self.params.param(f"coarse/{i}/w", (din, dout), fan_in=din)
            self.params.param(f"coarse/{i}/b", (1, dout), init="zeros")
        self.params.param("score/mlp1/w", (3, 64), fan_in=3)
        self.params.param("score/mlp1/b", (1, 64), init="zeros")
        self.params.param("score/mlp2/w", (64, d), fan_in=64)
        self.params.param("score/mlp2/b", (1, d), init="zeros")
        self.params.param("score/wq", (2 * d, 64), fan_in=2 * d)
        self.params.param("score/wk", (2 * d, 64), fan_in=2 * d)
        self.params.param("cons/mlp1/w", (3, 64), fan_in=3)
        self.params.param("cons/mlp1/b", (1, 64), init="zeros")
        self.params.param("cons/mlp2/w", (64, d), fan_in=64)
        self.params.param("cons/mlp2/b", (1, d), init="zeros")
        self.params.param("cons/proj/w", (2 * d, 256), fan_in=2 * d)
        self.params.param("cons/proj/b", (1, 256), init="zeros")
        # zero init: consolidation starts as the identity refinement
        self.params.param("cons/offset/w", (256 // c.upsample_ratio, 3), init="zeros")
        self.params.param("cons/offset/b", (1, 3), init="zeros")

    def _build_encoder_block(self, prefix):
        d = self.config.d_model
        for name in ("wq", "wk", "wv", "wo"):
            self.params.param(f"{prefix}/{name}", (d, d), fan_in=d)
        self.params.param(f"{prefix}/ffn1/w", (d, 2 * d), fan_in=d)
        self.params.param(f"{prefix}/ffn1/b", (1, 2 * d), init="zeros")
        self.params.param(f"{prefix}/ffn2/w", (2 * d, d), fan_in=2 * d)
        self.params.param(f"{prefix}/ffn2/b", (1, d), init="zeros")

    # -- building blocks ----------------------------------------------------

    def _encoder_block(self, x, prefix):
        p = self.params
        h = self.config.n_heads
        dh = self.config.d_model // h
        q = T.matmul(x, p[f"{prefix}/wq"])
        k = T.matmul(x, p[f"{prefix}/wk"])
        v = T.matmul(x, p[f"{prefix}/wv"])
        heads = []
        for i in range(h):
            qh, kh, vh = (_cols(t, i * dh, (i + 1) * dh) for t in (q, k, v))
            att = T.softmax(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh)),
                            axis=1)
            heads.append(T.matmul(att, vh))
        merged = heads[0] if h == 1 else T.concat(heads, axis=1)
        x = T.add(x, T.matmul(merged, p[f"{prefix}/wo"]))
        ff = _linear(p, f"{prefix}/ffn2", T.relu(_linear(p, f"{prefix}/ffn1", x,
                     self.config.d_model, 2 * self.config.d_model)),
                     2 * self.config.d_model, self.config.d_model)
        return T.add(x, ff)

    def _edge_conv_patch(self, pts):
        """DGCNN-style feature of one patch: two edge-conv rounds, max-pooled."""
        p = self.params
        m = len(pts)
        k = min(self.config.knn_k, m)
        pts = np.asarray(pts, dtype=np.float64)
        pts = pts - pts.mean(axis=0)   # translation invariance of patch features
        nbr = geometry.knn(pts, pts, k)
        idx_center = np.repeat(np.arange(m), k)
        idx_nbr = nbr.ravel()
        h = Tensor(pts)
        for rnd, width in (("patch/ec1", 64), ("patch/ec2", self.config.d_model)):
            center = T.gather(h, idx_center)
            neigh = T.gather(h, idx_nbr)
            edge = T.concat([center, T.sub(neigh, center)], axis=1)
            z = T.relu(T.add(T.matmul(edge, p[f"{rnd}/w"]),
                             T.expand(p[f"{rnd}/b"], 0, m * k)))
            h = T.max_(T.reshape(z, (m, k, width)), axis=1)
        return T.reshape(T.max_(h, axis=0), (1, self.config.d_model))

    # -- pipeline stages ----------------------------------------------------

    def encode_partial(self, partial):
        """Patch tokens (K,d) and pooled cloud feature (1,d)."""
        c = self.config
        partial = np.asarray(partial, dtype=np.float64)
        if len(partial) < c.k_patches:
            raise ValueError(f"encode_partial: {len(partial)} points < {c.k_patches} patches")
        patchset = geometry.patchify(partial, c.k_patches, c.radius)
        tokens = []
        for seed_idx, members in zip(patchset.seeds, patchset.patches):
            pts = partial[members]
            if len(pts) > c.patch_cap:
                sub = geometry.farthest_point_sample(pts, c.patch_cap,
                                                     start=geometry.centroid_start(pts))
                pts = pts[sub]
            feat = self._edge_conv_patch(pts)
            sin = Tensor(views.sinusoidal_encoding(partial[seed_idx],
                                                   c.sin_width).reshape(1, -1))
            tok = _linear(self.params, "patch/proj", T.concat([feat, sin], axis=1),
                          c.d_model + c.sin_width, c.d_model)
            tokens.append(tok)
        x = T.concat(tokens, axis=0)
        for i in range(c.enc_depth_points):
            x = self._encoder_block(x, f"enc_p/{i}")
        return x, T.mean(x, axis=0, keepdims=True)

    def _prepare_depth(self, view):
        """Depth grid at the backbone resolution; min-pool preserves foreground."""
        c = self.config
        if (view.height, view.width) == (c.image_size, c.image_size):
            return view.depth
        if view.height % c.image_size or view.width % c.image_size:
            raise ValueError(f"view resolution {view.width}x{view.height} not a "
                             f"multiple of model size {c.image_size}")
        fy = view.height // c.image_size
        fx = view.width // c.image_size
        return view.depth.reshape(c.image_size, fy, c.image_size, fx).min(axis=(1, 3))

    def _image_feature(self, view):
        c = self.config
        x = Tensor(self._prepare_depth(view).reshape(1, c.image_size, c.image_size))
        for i in range(len(c.image_channels)):
            x = T.relu(T.conv2d(x, self.params[f"img/conv{i}/w"],
                                self.params[f"img/conv{i}/b"], stride=2))
        pooled = T.reshape(T.mean(T.reshape(x, (x.shape[0], -1)), axis=1), (1, -1))
        return _linear(self.params, "img/proj", pooled,
                       c.image_channels[-1], c.d_model)

    def encode_views(self, view_stack):
        """View tokens (V,d) and pooled image feature (1,d)."""
        c = self.config
        if not view_stack:
            raise ValueError("encode_views: need at least one view")
        sizes = {(v.width, v.height) for v in view_stack}
        if len(sizes) != 1:
            raise ValueError("encode_views: views have mismatched resolutions")
        tokens = [T.add(self._image_feature(v),
                        views.pose_encoding(v.pose, self.params, "img/pose"))
                  for v in view_stack]
        x = T.concat(tokens, axis=0)
        for i in range(c.enc_depth_views):
            x = self._encoder_block(x, f"enc_v/{i}")
        return x, T.mean(x, axis=0, keepdims=True)

    def fuse(self, patch_tokens, view_tokens):
        """Cross-attention (patch queries over view keys), residual, pooled.

        Returns (f_fusion (1,d), coarse (n_coarse,3), attention (K,V)).
        """
        c = self.config
        attention = None
        if view_tokens is not None:
            if patch_tokens.shape[1] != c.d_model or view_tokens.shape[1] != c.d_model:
                raise ValueError("fuse: token width mismatch")
            q = T.matmul(patch_tokens, self.params["fuse/wq"])
            k = T.matmul(view_tokens, self.params["fuse/wk"])
            v = T.matmul(view_tokens, self.params["fuse/wv"])
            attention = T.softmax(T.scale(T.matmul(q, T.transpose(k)),
                                          1.0 / math.sqrt(c.d_model)), axis=1)
            fused = T.add(patch_tokens, T.matmul(attention, v))
        else:
            fused = patch_tokens
        f_fusion = T.mean(fused, axis=0, keepdims=True)
        h = T.relu(_linear(self.params, "coarse/0", f_fusion, c.d_model, 256))
        h = T.relu(_linear(self.params, "coarse/1", h, 256, 512))
        out = _linear(self.params, "coarse/2", h, 512, c.n_coarse * 3)
        coarse = T.reshape(out, (c.n_coarse, 3))
        return f_fusion, coarse, attention

    def score_confidence(self, coarse, context):
        """Per-point confidence in (0,1) from averaged self-attention logits."""
        c = self.config
        n = coarse.shape[0]
        h = T.relu(_linear(self.params, "score/mlp1", coarse, 3, 64))
        h = T.relu(_linear(self.params, "score/mlp2", h, 64, c.d_model))
        f_com = T.concat([h, T.expand(context, 0, n)], axis=1)
        q = T.matmul(f_com, self.params["score/wq"])
        k = T.matmul(f_com, self.params["score/wk"])
        logits = T.scale(T.mean(T.matmul(q, T.transpose(k)), axis=1), 1.0 / 8.0)
        return T.sigmoid(logits)

    def filter_points(self, coarse, scores, keep_fraction=None):
        """Keep the highest-confidence fraction; ties break toward lower index."""
        kf = self.config.keep_fraction if keep_fraction is None else keep_fraction
        if not 0.0 < kf <= 1.0:
            raise ConfigError("keep_fraction must lie in (0,1]")
        n = coarse.shape[0]
        keep = min(int(math.ceil(kf * n)), n)
        order = np.argsort(-scores.data, kind="stable")
        keep_idx = order[:keep]
        return T.gather(coarse, keep_idx), keep_idx

    def consolidate(self, filtered, partial, f_fusion):
        """Merge filtered coarse points with the input, FPS to n_in, expand.

        Only the high-confidence subset of the coarse cloud enters the
        dense support, so filtering genuinely changes the output.
        """
        c = self.config
        merged = T.concat([filtered, Tensor(np.asarray(partial, dtype=np.float32))],
                          axis=0)
        if merged.shape[0] < c.n_in:
            raise ValueError(f"consolidate: merge size {merged.shape[0]} < n_in {c.n_in}")
        idx = geometry.farthest_point_sample(merged.data, c.n_in,
                                             start=geometry.centroid_start(merged.data))
        p_de = T.gather(merged, idx)
        h = T.relu(_linear(self.params, "cons/mlp1", p_de, 3, 64))
        h = T.relu(_linear(self.params, "cons/mlp2", h, 64, c.d_model))
        comb = T.concat([h, T.expand(f_fusion, 0, c.n_in)], axis=1)
        proj = T.relu(_linear(self.params, "cons/proj", comb, 2 * c.d_model, 256))
        r = c.upsample_ratio
        slices = T.reshape(proj, (c.n_in * r, 256 // r))
        offsets = _linear(self.params, "cons/offset", slices, 256 // r, 3)
        parents = T.reshape(T.expand(T.reshape(p_de, (c.n_in, 1, 3)), 1, r),
                            (c.n_in * r, 3))
        dense = T.add(parents, offsets)
        parent_idx = np.repeat(np.arange(c.n_in), r)
        return dense, p_de, parent_idx

    def forward(self, sample, keep_fraction=None):
        """Full pipeline on one sample (needs .partial and .views)."""
        c = self.config
        partial = np.asarray(sample.partial, dtype=np.float64)
        patch_tokens, f_points = self.encode_partial(partial)
        if c.use_views:
            stack = sample.views[:c.v_views]
            view_tokens, f_views = self.encode_views(stack)
        else:
            view_tokens, f_views = None, None
        f_fusion, coarse, attention = self.fuse(patch_tokens, view_tokens)
        context = f_views if f_views is not None else f_fusion
        scores = self.score_confidence(coarse, context)
        filtered, keep_idx = self.filter_points(coarse, scores, keep_fraction)
        dense, p_de, parent_idx = self.consolidate(filtered, partial, f_fusion)
        return ForwardResult(coarse=coarse, dense=dense, scores=scores,
                             f_fusion=f_fusion, f_points=f_points, f_views=f_views,
                             keep_idx=keep_idx, filtered=filtered,
                             merged_size=filtered.shape[0] + len(partial),
                             dense_parent=parent_idx, p_de=p_de,
                             extras={"attention": attention})

    # -- persistence --------------------------------------------------------

    def save(self, path):
        self.params.save(path)

    def load(self, path):
        self.params.load_state_from(ParamStore.load(path))
        return self
