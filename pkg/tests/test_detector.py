import math

import numpy as np
import pytest

from splatforensics.dataset_builder import shift_opacity, synth_scene
from splatforensics.detector import (
    Checkpoint,
    DetectorConfig,
    PackedBatch,
    bce_loss,
    forward,
    grad_check,
    grid_pool,
    grid_unpool,
    init_params,
    predict,
    predict_logits,
    scene_mean_pool,
    serialize_scene,
    train,
    zero_params,
)
from splatforensics.detector import layers
from splatforensics.detector.training import pack_scenes
from splatforensics.errors import (
    CheckpointError,
    EmptySceneError,
    GroupMapMismatchError,
    MaskMismatchError,
    ShapeMismatchError,
    SingleClassTrainingSetError,
)
from splatforensics.splat_model import FeatureGroupMask, NormalizationSpec

SMALL = dict(width=16, heads=2, window=8, pool_prefix_bits=2)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def test_layer_norm_backward(rng):
    x, g, b = rng.normal(size=(5, 6)), rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(5, 6))
    y, cache = layers.layer_norm_forward(x, g, b)
    dx, dg, db = layers.layer_norm_backward(w, cache)
    f = lambda: float((layers.layer_norm_forward(x, g, b)[0] * w).sum())
    np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
    np.testing.assert_allclose(dg, numeric_grad(f, g), atol=1e-7)
    np.testing.assert_allclose(db, numeric_grad(f, b), atol=1e-7)


def test_gelu_backward(rng):
    x = rng.normal(size=(4, 5)) * 3
    w = rng.normal(size=(4, 5))
    _, cache = layers.gelu_forward(x)
    f = lambda: float((layers.gelu_forward(x)[0] * w).sum())
    np.testing.assert_allclose(layers.gelu_backward(w, cache), numeric_grad(f, x), atol=1e-7)
    # tanh form against the closed formula
    ref = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3))) for v in x.reshape(-1)]
    np.testing.assert_allclose(layers.gelu_forward(x)[0].reshape(-1), ref, atol=1e-14)


def attn_params(rng, d):
    return {k: rng.normal(size=(d, d)) * 0.5 for k in ("wq", "wk", "wv", "wo")} | {"bo": rng.normal(size=d)}


def test_window_attention_backward(rng):
    d, heads = 6, 2
    h = rng.normal(size=(7, d))
    p = attn_params(rng, d)
    windows = np.array([[3, 0, 5], [1, 6, 2], [4, -1, -1]])
    w = rng.normal(size=(7, d))
    _, cache = layers.window_attention_forward(p, h, windows, heads)
    dh, g = layers.window_attention_backward(w, p, cache)
    f = lambda: float((layers.window_attention_forward(p, h, windows, heads)[0] * w).sum())
    np.testing.assert_allclose(dh, numeric_grad(f, h), atol=1e-6)
    for k in p:
        np.testing.assert_allclose(g[k], numeric_grad(f, p[k]), atol=1e-6)


def test_single_token_attention_is_value_path(rng):
    d = 4
    p = attn_params(rng, d)
    h = rng.normal(size=(1, d))
    out, _ = layers.window_attention_forward(p, h, np.array([[0, -1]]), 2)
    np.testing.assert_allclose(out, h @ p["wv"] @ p["wo"] + p["bo"], atol=1e-12)


def test_windows_do_not_mix(rng):
    d = 4
    p = attn_params(rng, d)
    p["wq"][:] = 0
    p["wk"][:] = 0
    h = rng.normal(size=(4, d))
    windows = np.array([[0, 1], [2, 3]])
    a, _ = layers.window_attention_forward(p, h, windows, 2)
    h2 = h.copy()
    h2[2:] += 10
    b, _ = layers.window_attention_forward(p, h2, windows, 2)
    np.testing.assert_array_equal(a[:2], b[:2])
    # zero Q/K gives uniform weights: both rows of a window get the same output
    np.testing.assert_allclose(a[0], a[1])
    np.testing.assert_allclose(a[0], h[:2].mean(axis=0) @ p["wv"] @ p["wo"] + p["bo"], atol=1e-12)


def test_zero_block_is_identity(rng):
    cfg = DetectorConfig(**SMALL)
    p = {k.split(".", 1)[1]: v for k, v in zero_params(cfg).items() if k.startswith("enc0.")}
    x = rng.normal(size=(10, 16))
    out, _ = layers.block_forward(p, x, np.arange(10).reshape(-1, 5), 2)
    np.testing.assert_array_equal(out, x)


def test_serialize_examples(rng):
    assert serialize_scene(np.zeros((1, 3))).tolist() == [0]
    x = rng.permutation(50).astype(float)
    pos = np.c_[x, np.zeros(50), np.zeros(50)]
    assert serialize_scene(pos, "xyz").tolist() == np.argsort(x).tolist()


def test_serialized_sequence_is_content_stable(rng):
    pos = rng.normal(size=(200, 3))
    pos[10] = pos[20]  # coincident positions
    feats = rng.normal(size=(200, 5))
    perm = rng.permutation(200)
    for order in ("xyz", "yzx", "zxy"):
        a = serialize_scene(pos, order, tiebreak=feats)
        b = serialize_scene(pos[perm], order, tiebreak=feats[perm])
        np.testing.assert_array_equal(pos[a], pos[perm][b])
        np.testing.assert_array_equal(feats[a], feats[perm][b])


def test_grid_pool_examples(rng):
    feats = rng.normal(size=(9, 4))
    pos = rng.normal(size=(9, 3))
    pooled, ppos, gmap = grid_pool(feats, pos, 0)
    np.testing.assert_allclose(pooled, feats.mean(axis=0, keepdims=True))
    np.testing.assert_allclose(ppos, pos.mean(axis=0, keepdims=True))
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1]], float)
    f4 = rng.normal(size=(4, 4))
    pooled, _, gmap = grid_pool(f4, corners, 1)
    assert gmap.n_groups == 4
    np.testing.assert_array_equal(pooled[gmap.group], f4)
    skip = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(grid_unpool(pooled, gmap, skip), f4 + skip)


def test_grid_pool_conservation_and_unpool(rng):
    feats = rng.normal(size=(500, 6))
    pos = rng.normal(size=(500, 3))
    pooled, _, gmap = grid_pool(feats, pos, 2)
    np.testing.assert_allclose((gmap.counts[:, None] * pooled).sum(axis=0), feats.sum(axis=0), atol=1e-5)
    field = grid_unpool(pooled, gmap, np.zeros_like(feats))
    for g in range(gmap.n_groups):
        members = gmap.group == g
        np.testing.assert_allclose(field[members], np.broadcast_to(feats[members].mean(axis=0), field[members].shape))
    one, _, g1 = grid_pool(feats, pos, 0)
    skip = rng.normal(size=feats.shape)
    np.testing.assert_allclose(grid_unpool(one, g1, skip), skip + one[0])
    with pytest.raises(GroupMapMismatchError):
        grid_unpool(pooled[:-1], gmap, feats)


def test_scene_mean_pool_examples(rng):
    x = np.array([[1, 2], [3, 4], [5, 6]], float)
    np.testing.assert_array_equal(scene_mean_pool(x, [0, 2, 3]), [[2, 3], [5, 6]])
    np.testing.assert_array_equal(scene_mean_pool(x[:1], [0, 1]), x[:1])
    m = rng.normal(size=(100, 3))
    cuts = np.sort(rng.choice(np.arange(1, 100), 6, replace=False))
    offsets = np.r_[0, cuts, 100]
    ref = np.array([m[offsets[b] : offsets[b + 1]].mean(axis=0) for b in range(7)])
    np.testing.assert_allclose(scene_mean_pool(m, offsets), ref, atol=1e-7)
    with pytest.raises(EmptySceneError):
        scene_mean_pool(m, [0, 50, 50, 100])


def test_bce_examples(rng):
    loss, g = bce_loss(np.array([0.0]), np.array([1]))
    assert loss == pytest.approx(math.log(2)) and g[0] == pytest.approx(-0.5)
    loss, g = bce_loss(np.array([30.0]), np.array([1]))
    assert 0 <= loss < 1e-12 and abs(g[0]) < 1e-12
    loss, _ = bce_loss(np.array([-800.0, 800.0]), np.array([1, 0]))
    assert loss == pytest.approx(800.0)
    z = rng.normal(size=9) * 3
    y = rng.integers(0, 2, 9)
    _, g = bce_loss(z, y)
    num = numeric_grad(lambda: bce_loss(z, y)[0], z, 1e-5)
    np.testing.assert_allclose(g, num, rtol=1e-6)


def scenes(n, gaussians=40, seed=0, degree=3):
    rng = np.random.default_rng(seed)
    return [synth_scene(gaussians + int(rng.integers(0, 20)), rng, degree) for _ in range(n)]


def batch_for(sc, cfg, labels=None):
    return pack_scenes(sc, cfg, NormalizationSpec.fit(sc), labels)


def test_zero_params_logit_is_head_bias():
    cfg = DetectorConfig(**SMALL)
    p = zero_params(cfg)
    p["head.b"][0] = 0.7
    sc = scenes(1, 1)
    assert forward(batch_for(sc, cfg), p, cfg)[0] == 0.7


def test_permutation_and_batching(rng):
    cfg = DetectorConfig(**SMALL)
    p = init_params(cfg)
    sc = scenes(4)
    norm = NormalizationSpec.fit(sc)
    together = forward(pack_scenes(sc, cfg, norm), p, cfg)
    for i, s in enumerate(sc):
        alone = forward(pack_scenes([s], cfg, norm), p, cfg)[0]
        assert abs(alone - together[i]) <= 1e-5
        shuffled = forward(pack_scenes([s.take(rng.permutation(s.count))], cfg, norm), p, cfg)[0]
        assert abs(shuffled - alone) <= 1e-5


def test_no_cross_scene_leakage():
    cfg = DetectorConfig(**SMALL)
    p = init_params(cfg)
    sc = scenes(3)
    norm = NormalizationSpec.fit(sc)
    a = forward(pack_scenes(sc, cfg, norm), p, cfg)
    sc[1] = shift_opacity(sc[1], 0.3)
    b = forward(pack_scenes(sc, cfg, norm), p, cfg)
    assert a[0] == b[0] and a[2] == b[2] and a[1] != b[1]


def test_shape_checks():
    cfg = DetectorConfig(**SMALL)
    with pytest.raises(ShapeMismatchError):
        forward(PackedBatch(np.zeros((3, 5)), np.zeros((3, 3)), [0, 3]), init_params(cfg), cfg)
    with pytest.raises(ShapeMismatchError):
        PackedBatch(np.zeros((3, 5)), np.zeros((3, 3)), [0, 2, 2, 3])
    with pytest.raises(ValueError):
        DetectorConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        DetectorConfig(window=1)


def test_grad_check_small():
    cfg = DetectorConfig(**SMALL)
    sc = scenes(2, 20)
    b = batch_for(sc, cfg, [0, 1])
    assert grad_check(init_params(cfg), b, cfg, probes=60) < 1e-3
    assert grad_check(init_params(cfg), b, cfg, probes=5, corrupt=("head.w", 0)) > 0.3


def test_grad_check_linear_only():
    cfg = DetectorConfig(**SMALL)
    p = init_params(cfg)
    for k in p:
        if not (k.startswith("embed") or k.startswith("head")):
            p[k][:] = 0
    sc = scenes(2, 20)
    assert grad_check(p, batch_for(sc, cfg, [0, 1]), cfg, probes=80) < 1e-8


def test_training_overfits_and_is_deterministic():
    rng = np.random.default_rng(3)
    reals = [synth_scene(24, rng, 0) for _ in range(10)]
    sc = reals + [shift_opacity(s, 0.4) for s in reals]
    labels = [0] * 10 + [1] * 10
    cfg = DetectorConfig(width=16, heads=2, window=16, pool_prefix_bits=2, sh_degree=0, epochs=30, batch_scenes=4, lr=3e-3)
    seen = []
    ck = train(sc, labels, cfg, on_epoch=seen.append)
    assert len(seen) == 30
    assert max(r["accuracy"] for r in seen) == 100.0
    assert np.all((predict_logits(ck, sc) > 0) == np.array(labels, bool))
    assert train(sc, labels, cfg).to_bytes() == ck.to_bytes()
    with pytest.raises(SingleClassTrainingSetError):
        train(sc[:10], labels[:10], cfg)


def test_checkpoint_round_trip(tmp_path):
    cfg = DetectorConfig(**SMALL, mask=FeatureGroupMask().without("sh_rest"))
    ck = Checkpoint(init_params(cfg), cfg, NormalizationSpec((0.0, 1.0, 2.0), (1.0, 1.0, 1.0)), 3, [{"epoch": 1}])
    ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.config == cfg and back.norm == ck.norm and back.epoch == 3
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32))
    assert back.to_bytes() == ck.to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"XXXX" + ck.to_bytes()[4:])


def test_predict_thresholds():
    cfg = DetectorConfig(**SMALL)
    p = zero_params(cfg)
    ck = Checkpoint(p, cfg, NormalizationSpec((0.0,) * 3, (1.0,) * 3))
    s = scenes(1)[0]
    out = predict(ck, s)
    assert out["score"] == 0.5 and out["label"] == "real"
    p["head.b"][0] = 4.0
    out = predict(ck, s)
    assert out["score"] == pytest.approx(0.98201379) and out["label"] == "fake"


def test_predict_matches_forward():
    cfg = DetectorConfig(**SMALL)
    sc = scenes(50, 16, seed=8)
    norm = NormalizationSpec.fit(sc)
    ck = Checkpoint(init_params(cfg, seed=5), cfg, norm)
    logits = forward(pack_scenes(sc, cfg, norm), ck.params, cfg)
    for s, z in zip(sc, logits):
        assert predict(ck, s)["label"] == ("fake" if z > 0 else "real")


def test_mask_mismatch():
    cfg = DetectorConfig(**SMALL)
    ck = Checkpoint(init_params(cfg), cfg, NormalizationSpec((0.0,) * 3, (1.0,) * 3))
    with pytest.raises(MaskMismatchError):
        predict(ck, scenes(1, degree=1)[0])
