from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from gliostyle import ops
from gliostyle.checkpoint import MAGIC, checkpoint_bytes, checkpoint_load, checkpoint_save
from gliostyle.errors import CheckpointError, DataError, NumericalError
from gliostyle.unet import (LRSchedule, ModelState, UNetConfig, adam_step, backward, build_model,
                            dice_ce_loss, forward, poly_lr, predict_probabilities, preset,
                            sliding_window_predict, supervision_weights)

from conftest import fd_relative_error, random_index


def _param_count_oracle(cfg: UNetConfig) -> int:
    feats = [min(cfg.base_features * 2 ** s, cfg.max_features) for s in range(cfg.stage_count)]
    kvol = [int(np.prod(k)) for k in cfg.kernels]
    total, cin = 0, cfg.in_channels
    for s, f in enumerate(feats):
        total += cin * f * kvol[s] + f * f * kvol[s] + 4 * f
        cin = f
    for s in range(cfg.stage_count - 1):
        up = int(np.prod(cfg.strides[s + 1]))
        total += feats[s + 1] * feats[s] * up + 2 * feats[s] * feats[s] * kvol[s] + feats[s] * feats[s] * kvol[s]
        total += 4 * feats[s]
    for k in range(cfg.deep_supervision_levels + 1):
        total += cfg.num_classes * feats[k] + cfg.num_classes
    return total


# ---------------------------------------------------------------------------
# Naive reference network (2D, loops only)
# ---------------------------------------------------------------------------


def _naive_conv(x, w, stride):
    ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((ci, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x
    oh, ow = (h + 2 * ph - kh) // stride + 1, (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                out[o, i, j] = np.sum(xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[o])
    return out


def _naive_norm_act(x, g, b):
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        mu = x[c].mean()
        var = ((x[c] - mu) ** 2).mean()
        y = (x[c] - mu) / math.sqrt(var + 1e-5) * g[c] + b[c]
        out[c] = np.where(y > 0, y, 0.01 * y)
    return out


def _naive_upconv(x, w):
    ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    out = np.zeros((co, h * kh, wd * kw))
    for c in range(ci):
        for i in range(h):
            for j in range(wd):
                for o in range(co):
                    out[o, i * kh:(i + 1) * kh, j * kw:(j + 1) * kw] += x[c, i, j] * w[c, o]
    return out


def _naive_head(x, w, b):
    out = np.zeros((w.shape[0], *x.shape[1:]))
    for o in range(w.shape[0]):
        out[o] = b[o] + sum(w[o, c] * x[c] for c in range(x.shape[0]))
    return out


def _naive_forward(model, x):
    cfg, p = model.config, {k: v.astype(np.float64) for k, v in model.params.items()}

    def block(h, prefix, stride):
        h = _naive_conv(h, p[prefix + ".conv0.w"], stride)
        h = _naive_norm_act(h, p[prefix + ".norm0.g"], p[prefix + ".norm0.b"])
        h = _naive_conv(h, p[prefix + ".conv1.w"], 1)
        return _naive_norm_act(h, p[prefix + ".norm1.g"], p[prefix + ".norm1.b"])

    skips, h = [], x
    for s in range(cfg.stage_count):
        h = block(h, f"enc{s}", cfg.strides[s][0])
        skips.append(h)
    logits = {}
    for s in range(cfg.stage_count - 2, -1, -1):
        up = _naive_upconv(h, p[f"dec{s}.up.w"])
        h = block(np.concatenate([up, skips[s]]), f"dec{s}", 1)
        if s <= cfg.deep_supervision_levels:
            logits[s] = _naive_head(h, p[f"head{s}.w"], p[f"head{s}.b"])
    return [logits[k] for k in sorted(logits)]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def test_desk2d_parameter_count_closed_form():
    cfg = preset("desk2d")
    assert _param_count_oracle(cfg) == 29768
    assert build_model(cfg).parameter_count == 29768


@pytest.mark.parametrize("name", ["desk3d", "full2d", "full3d"])
def test_other_presets_parameter_count(name):
    cfg = preset(name)
    if name.startswith("full"):
        assert cfg.features == (32, 64, 128, 256, 320, 320)
        return  # full-scale weights are not materialized in tests
    assert build_model(cfg).parameter_count == _param_count_oracle(cfg)


def test_full3d_strides_accepted():
    cfg = preset("full3d")
    assert cfg.strides == ((1, 1, 1),) + ((2, 2, 2),) * 5
    assert cfg.patch_size == (128, 128, 128) and cfg.batch_size == 2 and cfg.base_features == 32
    assert preset("full2d").patch_size == (192, 160) and preset("full2d").batch_size == 105


def test_config_validation():
    with pytest.raises(DataError, match="divisible"):
        UNetConfig(2, 8, 3, patch_size=(30, 32))
    with pytest.raises(DataError):
        UNetConfig(2, 8, 3, deep_supervision_levels=3)
    with pytest.raises(DataError):
        UNetConfig(4)
    with pytest.raises(DataError, match="unknown U-Net config"):
        preset("tiny")


def test_same_seed_same_weights():
    a, b = build_model(preset("desk2d", seed=4)), build_model(preset("desk2d", seed=4))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_model(preset("desk2d", seed=5))
    assert not np.array_equal(a.params["enc0.conv0.w"], c.params["enc0.conv0.w"])


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def test_level_shapes():
    model = build_model(preset("desk2d"))
    out = forward(model, np.random.default_rng(0).normal(size=(2, 4, 32, 32)))
    assert [o.shape for o in out] == [(2, 4, 32, 32), (2, 4, 16, 16)]
    with pytest.raises(DataError):
        forward(model, np.zeros((2, 4, 16, 16)))


def test_zero_input_gives_uniform_softmax():
    model = build_model(preset("desk2d"))
    prob = ops.softmax(forward(model, np.zeros((1, 4, 32, 32)))[0], axis=1)
    np.testing.assert_allclose(prob, 0.25, atol=1e-6)


def test_forward_matches_naive_loops():
    cfg = UNetConfig(2, base_features=3, stage_count=3, patch_size=(8, 8), deep_supervision_levels=1, seed=2)
    model = build_model(cfg).astype(np.float64)
    x = np.random.default_rng(1).normal(size=(2, 4, 8, 8))
    out = forward(model, x)
    for b in range(2):
        ref = _naive_forward(model, x[b])
        for level, r in zip(out, ref):
            np.testing.assert_allclose(level[b], r, atol=1e-5)


def test_forward_32bit_matches_naive_loops():
    cfg = UNetConfig(2, base_features=2, stage_count=2, patch_size=(8, 8), seed=3)
    model = build_model(cfg)
    x = np.random.default_rng(2).normal(size=(1, 4, 8, 8)).astype(np.float32)
    out = forward(model, x)
    ref = _naive_forward(model, x[0].astype(np.float64))
    for level, r in zip(out, ref):
        np.testing.assert_allclose(level[0], r, atol=1e-4)


def test_batch_order_invariance():
    model = build_model(preset("desk2d"))
    x = np.random.default_rng(3).normal(size=(4, 4, 32, 32)).astype(np.float32)
    perm = np.array([2, 0, 3, 1])
    a = forward(model, x)
    b = forward(model, x[perm])
    for la, lb in zip(a, b):
        np.testing.assert_allclose(la[perm], lb, rtol=1e-5, atol=1e-5)


def test_forward_is_deterministic():
    model = build_model(preset("desk2d"))
    x = np.random.default_rng(4).normal(size=(2, 4, 32, 32)).astype(np.float32)
    assert all(np.array_equal(p, q) for p, q in zip(forward(model, x), forward(model, x)))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def test_peaked_logits_give_small_loss():
    target = np.random.default_rng(5).integers(0, 4, (2, 8, 8))
    logits = 30.0 * np.moveaxis(np.eye(4)[target], -1, 1)
    res = dice_ce_loss([logits], target)
    assert res.dice[0] < 0.01 and res.ce[0] < 0.01


def test_uniform_logits_cross_entropy_is_ln4():
    target = np.zeros((1, 4, 4), int)
    target[:, :, 2:] = 1
    res = dice_ce_loss([np.zeros((1, 4, 4, 4))], target)
    assert abs(res.ce[0] - math.log(4)) < 1e-12


def test_supervision_weights():
    for n in range(1, 6):
        w = supervision_weights(n)
        assert abs(w.sum() - 1) < 1e-15
        np.testing.assert_allclose(w[1:] / w[:-1], 0.5)


def test_levels_zero_reduces_to_level0_loss():
    cfg = preset("desk2d", deep_supervision_levels=0)
    model = build_model(cfg)
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(2, 4, 32, 32)), rng.integers(0, 4, (2, 32, 32))
    out = forward(model, x)
    assert len(out) == 1
    res = dice_ce_loss(out, y)
    assert res.total == res.levels[0]


def test_loss_rejects_invalid_codes():
    with pytest.raises(DataError):
        dice_ce_loss([np.zeros((1, 4, 2, 2))], np.full((1, 2, 2), 4))


def test_loss_gradient_fd():
    rng = np.random.default_rng(7)
    logits = [rng.normal(size=(2, 4, 8, 8)), rng.normal(size=(2, 4, 4, 4))]
    target = rng.integers(0, 4, (2, 8, 8))
    res = dice_ce_loss(logits, target)
    for k in range(2):
        err = fd_relative_error(lambda: dice_ce_loss(logits, target).total, logits[k], res.grads[k],
                                random_index(rng, logits[k].shape, 15))
        assert err < 1e-4


@pytest.mark.parametrize("name,patch", [("desk2d", (16, 16)), ("desk3d", (8, 8, 8))])
def test_network_gradient_fd(name, patch):
    model = build_model(preset(name, patch_size=patch)).astype(np.float64)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, *patch))
    y = rng.integers(0, 4, (2, *patch))
    out, caches = forward(model, x, keep_cache=True)
    grads = backward(model, caches, dice_ce_loss(out, y).grads)
    assert set(grads) == set(model.params)
    for key, p in model.params.items():
        err = fd_relative_error(lambda: dice_ce_loss(forward(model, x), y).total, p, grads[key],
                                random_index(rng, p.shape, 3))
        assert err < 1e-3, key


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


def _scalar_model(w0=0.5):
    p = {"w": np.array([w0])}
    return ModelState(UNetConfig(), p, {"w": np.zeros(1)}, {"w": np.zeros(1)})


def test_adam_hand_recurrence():
    model = _scalar_model()
    lr, w = 0.1, 0.5
    m = v = 0.0
    for t, g in enumerate([1.0, 1.0, 1.0], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step(model, {"w": np.array([g])}, lr)
        assert abs(model.params["w"][0] - w) < 1e-15
    # constant unit gradients give unit bias-corrected ratios: three equal steps
    assert abs(w - (0.5 - 3 * 0.1 / (1 + 1e-8))) < 1e-12
    assert model.step == 3


def test_adam_zero_gradient_and_zero_lr():
    model = _scalar_model()
    adam_step(model, {"w": np.array([2.0])}, 0.0)
    assert model.params["w"][0] == 0.5
    m_before = model.m["w"].copy()
    adam_step(model, {"w": np.array([0.0])}, 0.0)
    assert model.params["w"][0] == 0.5
    np.testing.assert_allclose(model.m["w"], 0.9 * m_before)
    model2 = _scalar_model()
    adam_step(model2, {"w": np.array([0.0])}, 0.1)
    assert model2.params["w"][0] == 0.5


def test_adam_non_finite_gradient_names_layer():
    model = build_model(preset("desk2d"))
    grads = {k: np.zeros_like(p) for k, p in model.params.items()}
    grads["dec0.conv1.w"][0, 0, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="dec0.conv1.w"):
        adam_step(model, grads, 0.01)
    with pytest.raises(DataError):
        adam_step(model, {"enc0.conv0.w": np.zeros(3)}, 0.01)


def test_poly_lr():
    s = LRSchedule(0.01, 0.9, 100)
    assert poly_lr(s, 0) == 0.01
    assert poly_lr(s, 100) == 0.0
    assert abs(poly_lr(s, 50) - 0.005359) < 1e-6
    with pytest.raises(DataError):
        poly_lr(s, 101)
    with pytest.raises(DataError):
        LRSchedule(0.01, 1.5, 10)


def test_overfit_single_batch():
    cfg = preset("desk2d")
    model = build_model(cfg)
    rng = np.random.default_rng(9)
    yy, xx = np.mgrid[:32, :32]
    y = np.zeros((4, 32, 32), np.int64)
    for b in range(4):
        cy, cx = rng.integers(10, 22, 2)
        r = np.hypot(yy - cy, xx - cx)
        y[b][r < 9] = 2
        y[b][r < 6] = 1
        y[b][r < 3] = 3
    x = np.stack([np.stack([(y == k) + 0.3 * rng.normal(size=y.shape) for k in range(4)], 1)[b]
                  for b in range(4)]).astype(np.float32)
    losses = []
    for _ in range(200):
        out, caches = forward(model, x, keep_cache=True)
        res = dice_ce_loss(out, y)
        losses.append(res.total)
        adam_step(model, backward(model, caches, res.grads), 0.01)
        if res.total < 0.1:
            break
    assert losses[-1] < 0.1
    # transient upticks may not exceed 5% of the best loss seen so far
    assert np.all(np.array(losses) <= 1.05 * np.minimum.accumulate(losses))


# ---------------------------------------------------------------------------
# Sliding window
# ---------------------------------------------------------------------------


def test_single_tile_equals_forward():
    model = build_model(preset("desk2d"))
    img = np.random.default_rng(10).normal(size=(4, 2, 32, 32)).astype(np.float32)
    pred = sliding_window_predict(model, img)
    direct = np.argmax(forward(model, np.moveaxis(img, 1, 0))[0], axis=1)
    np.testing.assert_array_equal(pred.labels, direct)


def test_two_tile_overlap_is_mean():
    model = build_model(preset("desk2d"))
    img = np.random.default_rng(11).normal(size=(4, 1, 32, 48)).astype(np.float32)
    probs = predict_probabilities(model, img)
    left = ops.softmax(forward(model, img[None, :, 0, :, :32])[0], axis=1)[0]
    right = ops.softmax(forward(model, img[None, :, 0, :, 16:])[0], axis=1)[0]
    np.testing.assert_allclose(probs[:, 0, :, :16], left[:, :, :16], atol=1e-6)
    np.testing.assert_allclose(probs[:, 0, :, 16:32], 0.5 * (left[:, :, 16:] + right[:, :, :16]), atol=1e-6)
    np.testing.assert_allclose(probs[:, 0, :, 32:], right[:, :, 16:], atol=1e-6)


def test_small_volume_is_padded_and_cropped():
    model = build_model(preset("desk2d"))
    pred = sliding_window_predict(model, np.zeros((4, 3, 20, 25)), spacing=(2.0, 1.0, 1.0))
    assert pred.dims == (3, 20, 25) and pred.spacing == (2.0, 1.0, 1.0)


def test_constant_logit_model():
    model = build_model(preset("desk2d"))
    for k in model.params:
        if k.startswith("head"):
            model.params[k][...] = 0
    model.params["head0.b"][2] = 5.0
    pred = sliding_window_predict(model, np.random.default_rng(12).normal(size=(4, 2, 40, 36)))
    assert np.all(pred.labels == 2)


def test_3d_sliding_window_shape():
    model = build_model(preset("desk3d", patch_size=(16, 16, 16)))
    pred = sliding_window_predict(model, np.random.default_rng(13).normal(size=(4, 20, 16, 18)))
    assert pred.dims == (20, 16, 18)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = build_model(preset("desk2d"))
    rng = np.random.default_rng(14)
    adam_step(model, {k: rng.normal(size=p.shape).astype(np.float32) for k, p in model.params.items()}, 0.01)
    model.epoch = 3
    model.meta = {"best": 0.5}
    model.rng.random(5)
    checkpoint_save(model, tmp_path / "m.munt")
    back = checkpoint_load(tmp_path / "m.munt")
    assert checkpoint_bytes(back) == checkpoint_bytes(model)
    assert back.step == 1 and back.epoch == 3 and back.meta == {"best": 0.5}
    assert back.rng.random() == model.rng.random()
    assert (tmp_path / "m.munt").read_bytes()[:4] == MAGIC


def test_checkpoint_errors(tmp_path):
    model = build_model(preset("desk2d"))
    raw = checkpoint_bytes(model)
    path = tmp_path / "c.munt"
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(path)
    bumped = bytearray(raw)
    struct.pack_into("<H", bumped, 4, 9)
    path.write_bytes(bytes(bumped))
    with pytest.raises(CheckpointError, match="version 9"):
        checkpoint_load(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_load(path)
    with pytest.raises(CheckpointError, match="not found"):
        checkpoint_load(tmp_path / "missing.munt")
