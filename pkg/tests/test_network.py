"""Completion model: encoders, fuser, confidence filter, consolidation."""

import numpy as np
import pytest

from cloudfill import network, oracle, views
from cloudfill import tensor as T
from cloudfill.network import ConfigError


def tiny_model(seed=0, **overrides):
    return network.CompletionModel(network.tiny_config(**overrides), seed=seed)


def tiny_sample(seed=0, profile="clean", family="chair_like"):
    return oracle.generate_sample(seed, 0, family, oracle.PROFILES[profile],
                                  v_views=2, n_partial=64, n_gt=2048,
                                  width=16, height=16)


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(ConfigError):
        network.ModelConfig(keep_fraction=0.0)
    with pytest.raises(ConfigError):
        network.ModelConfig(upsample_ratio=3)
    with pytest.raises(ConfigError):
        network.ModelConfig(n_heads=5)
    with pytest.raises(ConfigError):
        network.ModelConfig(sin_width=16)


def test_config_roundtrip():
    cfg = network.small_config(v_views=4)
    back = network.ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_full_config_matches_reference_scale():
    cfg = network.full_config()
    assert cfg.n_in == 2048 and cfg.k_patches == 128 and cfg.radius == 0.2
    assert cfg.n_coarse * 0 + cfg.upsample_ratio * cfg.n_in == 16384
    assert cfg.keep_fraction == 0.75 and cfg.v_views == 6


# ---------------------------------------------------------------------------
# encoders


def test_encode_partial_token_count_and_width():
    m = tiny_model()
    s = tiny_sample()
    tokens, f_p = m.encode_partial(s.partial)
    assert tokens.shape == (8, 128)
    assert f_p.shape == (1, 128)
    assert np.all(np.isfinite(tokens.data))


def test_encode_partial_permutation_invariant():
    m = tiny_model()
    rng = np.random.default_rng(0)
    # generic cloud: pixel-quantized scans can tie FPS distances exactly,
    # making the seed choice (not the geometry) depend on point order
    cloud = rng.uniform(-0.4, 0.4, size=(64, 3))
    perm = rng.permutation(len(cloud))
    _, f1 = m.encode_partial(cloud)
    _, f2 = m.encode_partial(cloud[perm])
    assert np.abs(f1.data - f2.data).max() < 1e-5


def test_edge_features_translation_invariant():
    m = tiny_model()
    rng = np.random.default_rng(1)
    patch = rng.uniform(-0.1, 0.1, size=(8, 3))
    a = m._edge_conv_patch(patch)
    b = m._edge_conv_patch(patch + np.array([0.3, -0.2, 0.5]))
    assert np.abs(a.data - b.data).max() < 1e-5


def test_encode_views_token_count_and_permutation():
    m = tiny_model()
    s = tiny_sample()
    tokens, f_i = m.encode_views(s.views)
    assert tokens.shape == (2, 128)
    assert f_i.shape == (1, 128)
    _, f_rev = m.encode_views(list(reversed(s.views)))
    assert np.abs(f_i.data - f_rev.data).max() < 1e-5


def test_encode_views_all_background_finite():
    m = tiny_model()
    blank = views.DepthView(16, 16, np.ones((16, 16), np.float32),
                            views.CameraPose(0, 0))
    tokens, f_i = m.encode_views([blank, blank])
    assert np.all(np.isfinite(tokens.data)) and np.all(np.isfinite(f_i.data))


# ---------------------------------------------------------------------------
# fusion


def test_fuse_attention_simplex_and_shapes():
    m = tiny_model()
    s = tiny_sample()
    pt, _ = m.encode_partial(s.partial)
    vt, _ = m.encode_views(s.views)
    f_fusion, coarse, attention = m.fuse(pt, vt)
    assert f_fusion.shape == (1, 128)
    assert coarse.shape == (32, 3)
    rows = attention.data.sum(axis=-1)
    assert np.allclose(rows, 1.0, atol=1e-6)


def test_fuse_single_view_degenerate_softmax():
    m = tiny_model()
    s = tiny_sample()
    pt, _ = m.encode_partial(s.partial)
    vt, _ = m.encode_views(s.views[:1])
    _, _, attention = m.fuse(pt, vt)
    assert np.allclose(attention.data, 1.0, atol=1e-6)


def test_fuse_without_views():
    m = network.CompletionModel(network.tiny_config(use_views=False))
    s = tiny_sample()
    pt, _ = m.encode_partial(s.partial)
    f_fusion, coarse, attention = m.fuse(pt, None)
    assert attention is None
    assert coarse.shape == (32, 3)


# ---------------------------------------------------------------------------
# confidence + filtering


def test_confidence_scores_in_unit_interval():
    m = tiny_model()
    s = tiny_sample()
    r = m.forward(s)
    assert r.scores.shape == (32,)
    assert np.all(r.scores.data > 0) and np.all(r.scores.data < 1)


def test_confidence_duplicate_points_equal_scores():
    m = tiny_model()
    s = tiny_sample()
    _, f_views = m.encode_views(s.views)
    pts = np.zeros((4, 3), dtype=np.float32)
    pts[2:] = 0.25
    scores = m.score_confidence(T.Tensor(pts), f_views)
    sd = scores.data
    assert abs(sd[0] - sd[1]) < 1e-7 and abs(sd[2] - sd[3]) < 1e-7


def test_filter_counts_and_tie_rule():
    m = tiny_model()
    coarse = T.Tensor(np.random.default_rng(0).normal(size=(32, 3)))
    equal = T.Tensor(np.full(32, 0.5, dtype=np.float32))
    kept, idx = m.filter_points(coarse, equal)
    assert kept.shape == (24, 3)                      # ceil(0.75 * 32)
    assert idx.tolist() == list(range(24))            # ties -> lower index
    kept2, idx2 = m.filter_points(coarse, equal, keep_fraction=0.5)
    assert kept2.shape == (16, 3)
    with pytest.raises(ConfigError):
        m.filter_points(coarse, equal, keep_fraction=0.0)


def test_filter_rank_invariance_under_logit_shift():
    m = tiny_model()
    rng = np.random.default_rng(1)
    coarse = T.Tensor(rng.normal(size=(32, 3)))
    logits = rng.normal(size=32)
    s1 = T.Tensor(1 / (1 + np.exp(-logits)))
    s2 = T.Tensor(1 / (1 + np.exp(-(logits + 3.0))))
    _, i1 = m.filter_points(coarse, s1)
    _, i2 = m.filter_points(coarse, s2)
    assert np.array_equal(i1, i2)


# ---------------------------------------------------------------------------
# consolidation


def test_consolidate_identity_at_init_with_r1():
    m = tiny_model(**{"upsample_ratio": 1})
    s = tiny_sample()
    r = m.forward(s)
    # offset layer is zero-initialized: dense == P_de exactly
    assert r.dense.shape == (64, 3)
    assert np.array_equal(r.dense.data, r.p_de.data)


def test_consolidate_parent_bookkeeping():
    m = tiny_model()
    s = tiny_sample()
    r = m.forward(s)
    assert r.dense_parent.shape == (128,)
    parents = r.p_de.data[r.dense_parent]
    offsets = r.dense.data - parents
    max_norm = np.linalg.norm(offsets, axis=1).max()
    assert np.linalg.norm(r.dense.data - parents, axis=1).max() <= max_norm + 1e-12
    # each support point has exactly R children
    counts = np.bincount(r.dense_parent, minlength=64)
    assert np.all(counts == 2)


def test_consolidate_merge_too_small():
    m = network.CompletionModel(network.tiny_config(n_in=64))
    f = T.Tensor(np.zeros((1, 128), np.float32))
    with pytest.raises(ValueError):
        m.consolidate(T.Tensor(np.zeros((3, 3), np.float32)),
                      np.zeros((10, 3)), f)


# ---------------------------------------------------------------------------
# full forward


def test_forward_shapes_and_cardinalities():
    m = tiny_model()
    s = tiny_sample()
    r = m.forward(s)
    assert r.coarse.shape == (32, 3)
    assert r.dense.shape == (2 * 64, 3)
    assert r.scores.shape == (32,)
    assert r.filtered.shape == (24, 3)
    assert r.merged_size == 24 + 64


def test_forward_deterministic():
    s = tiny_sample()
    r1 = tiny_model(seed=4).forward(s)
    r2 = tiny_model(seed=4).forward(s)
    assert np.array_equal(r1.dense.data, r2.dense.data)
    assert np.array_equal(r1.scores.data, r2.scores.data)


def test_forward_finite_under_all_profiles():
    for profile in ("clean", "mild", "severe"):
        s = tiny_sample(seed=2, profile=profile)
        r = tiny_model().forward(s)
        for t in (r.coarse, r.dense, r.scores, r.f_fusion):
            assert np.all(np.isfinite(t.data)), profile


def test_save_load_roundtrip(tmp_path):
    m1 = tiny_model(seed=9)
    s = tiny_sample()
    p = tmp_path / "m.pckpt"
    m1.save(p)
    m2 = tiny_model(seed=1)
    before = m2.forward(s).dense.data.copy()
    m2.load(p)
    assert not np.array_equal(before, m2.forward(s).dense.data)
    assert np.array_equal(m1.forward(s).dense.data, m2.forward(s).dense.data)
