"""Network forward/backward against finite differences, trainer
determinism and convergence, and the per-variant prediction paths."""

import math

import numpy as np
import pytest

from metriccam.camera import CameraIntrinsics, ImageMap
from metriccam.errors import DivergenceError, DomainError, StateError
from metriccam.losses import gradcheck
from metriccam.model import (Adam, TinyDepthNet, TrainConfig, evaluate_groups,
                             layer_gradcheck, load_manifest_frames,
                             load_model, predict_metric, save_model, train,
                             variant_in_channels)
from metriccam.synthscene import (AMBIENT, DatasetConfig, Pose, Primitive,
                                  SceneSpec, make_dataset, render,
                                  write_dataset)


@pytest.fixture(scope="module")
def two_group_ds(tmp_path_factory):
    cfg = DatasetConfig(focals=(500.0, 1000.0), per_focal=2, seed=3)
    return make_dataset(tmp_path_factory.mktemp("ds2") / "ds", cfg)


@pytest.fixture(scope="module")
def one_frame_ds(tmp_path_factory):
    cfg = DatasetConfig(focals=(700.0,), per_focal=1, seed=5)
    return make_dataset(tmp_path_factory.mktemp("ds1") / "ds", cfg)


@pytest.fixture(scope="module")
def memorizable_ds(tmp_path_factory):
    # Light along the view axis makes intensity a bijection of depth:
    # constant on the fronto backdrop, radial on each sphere, and the
    # albedo ladder keeps the spheres' shaded ranges disjoint. No
    # texture, no pose jitter, so a pointwise intensity -> depth map
    # fits the frame exactly and the training loop must find it.
    k = CameraIntrinsics(400.0, 400.0, 32.0, 24.0, 64, 48)
    prims = [Primitive("plane", Pose(np.diag([1.0, -1.0, -1.0]),
                                     np.array([0.0, 0.0, 70.0])),
                       240.0, 0.97)]
    for (u, v), depth, size, albedo in (
            ((14, 12), 40.0, 1.8, 0.20), ((50, 12), 48.0, 2.2, 0.29),
            ((14, 36), 56.0, 2.5, 0.42), ((50, 36), 63.0, 2.8, 0.61)):
        center = np.array([(u - 32) / 400 * depth, (v - 24) / 400 * depth,
                           depth])
        prims.append(Primitive("sphere", Pose(np.eye(3), center),
                               size, albedo))
    scene = SceneSpec(tuple(prims), np.array([0.0, 0.0, -1.0]), AMBIENT)
    frame = render(scene, k, Pose.identity())
    return write_dataset(tmp_path_factory.mktemp("ds1f") / "ds", [frame])


def zeroed_net(final_bias=0.0, in_channels=1):
    net = TinyDepthNet(in_channels, rng=np.random.default_rng(0))
    for p in net.params:
        p[:] = 0.0
    net.params[7][:] = final_bias
    return net


def rand_image(seed, c=1, h=24, w=32):
    vals = np.random.default_rng(seed).uniform(0.0, 1.0, (c, h, w))
    return ImageMap(vals)


def k_of(f, w=32, h=24):
    return CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)


# ------------------------------------------------------------------ forward


def test_forward_zero_net_is_ln2():
    net = zeroed_net()
    y = net.forward(np.random.default_rng(1).uniform(0, 1, (2, 1, 5, 7)))
    assert np.all(y == np.log1p(1.0))


@pytest.mark.parametrize("h,w", [(3, 3), (5, 8), (36, 48)])
def test_forward_preserves_grid(h, w):
    net = TinyDepthNet(1, rng=np.random.default_rng(2))
    y = net.forward(np.random.default_rng(3).uniform(0, 1, (2, 1, h, w)))
    assert y.shape == (2, 1, h, w)
    assert np.all(y > 0)


def test_forward_rejects_bad_shapes():
    net = TinyDepthNet(1, rng=np.random.default_rng(2))
    with pytest.raises(DomainError):
        net.forward(np.zeros((1, 2, 8, 8)))
    with pytest.raises(DomainError):
        net.forward(np.zeros((8, 8)))


def test_param_counts_under_budget():
    assert TinyDepthNet(1).n_params == 9441
    assert TinyDepthNet(5).n_params == 10017
    with pytest.raises(DomainError):
        TinyDepthNet(1, widths=(64, 128, 64))


# ----------------------------------------------------------------- backward


def test_input_gradient_matches_fd():
    net = TinyDepthNet(1, rng=np.random.default_rng(4))
    probe = np.random.default_rng(5).normal(size=(1, 1, 6, 6))
    x0 = np.random.default_rng(6).uniform(0.1, 1.0, (1, 1, 6, 6))

    def fn(x):
        y, cache = net.forward(x, want_cache=True)
        _, gx = net.backward(cache, probe, want_input_grad=True)
        return float(np.sum(probe * y)), gx

    assert gradcheck(fn, x0).max_rel_err < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients_match_fd(seed):
    net = TinyDepthNet(1, rng=np.random.default_rng(seed))
    x = np.random.default_rng(seed + 10).uniform(0.1, 1.0, (2, 1, 8, 10))
    reports = layer_gradcheck(net, x, rng=np.random.default_rng(0), sample=25)
    assert sorted(reports) == ["b0", "b1", "b2", "b3",
                               "w0", "w1", "w2", "w3"]
    for name, rep in reports.items():
        assert rep.max_rel_err < 1e-4, name


def test_zero_upstream_grad_gives_zero_param_grads():
    net = TinyDepthNet(1, rng=np.random.default_rng(7))
    x = np.random.default_rng(8).uniform(0.1, 1.0, (1, 1, 8, 8))
    _, cache = net.forward(x, want_cache=True)
    grads = net.backward(cache, np.zeros((1, 1, 8, 8)))
    assert all(np.all(g == 0.0) for g in grads)


def test_backward_requires_forward_cache():
    net = TinyDepthNet(1, rng=np.random.default_rng(9))
    with pytest.raises(StateError):
        net.backward(None, np.zeros((1, 1, 4, 4)))
    with pytest.raises(StateError):
        net.backward(([], 0), np.zeros((1, 1, 4, 4)))


def test_frozen_params_do_not_move():
    net = TinyDepthNet(1, rng=np.random.default_rng(10))
    before = [p.copy() for p in net.params]
    x = np.random.default_rng(11).uniform(0.1, 1.0, (1, 1, 8, 8))
    y, cache = net.forward(x, want_cache=True)
    grads = net.backward(cache, np.ones_like(y))
    opt = Adam(net.params, lr=1e-2)
    opt.step(net.params, grads, frozen=frozenset({0, 1}))
    assert np.array_equal(net.params[0], before[0])
    assert np.array_equal(net.params[1], before[1])
    assert not np.array_equal(net.params[2], before[2])


def test_adam_minimizes_quadratic():
    params = [np.array([5.0, -3.0])]
    opt = Adam(params, lr=0.1)
    for _ in range(300):
        opt.step(params, [2.0 * params[0]])
    assert np.all(np.abs(params[0]) < 1e-2)


# -------------------------------------------------------------- equivariance


def test_flip_equivariance_with_symmetric_kernels():
    net = TinyDepthNet(1, rng=np.random.default_rng(12))
    for i in (0, 2, 4):
        w = net.params[i]
        net.params[i] = 0.5 * (w + w[:, :, :, ::-1])
    x = np.random.default_rng(13).uniform(0, 1, (1, 1, 12, 16))
    ya = net.forward(x)[0, 0]
    yb = net.forward(x[:, :, :, ::-1].copy())[0, 0]
    assert np.max(np.abs(yb[:, ::-1] - ya)) < 1e-12


# --------------------------------------------------------------- checkpoint


def test_save_load_roundtrip(tmp_path):
    net = TinyDepthNet(1, rng=np.random.default_rng(14), widths=(8, 12, 8))
    path = tmp_path / "model.ckpt"
    save_model(path, net, extra={"note": "abc"})
    loaded, meta = load_model(path)
    assert loaded.in_channels == 1 and loaded.widths == (8, 12, 8)
    assert all(np.array_equal(a, b)
               for a, b in zip(loaded.params, net.params))
    assert meta["note"] == "abc"
    with open(path, "rb") as fh:
        assert fh.read(8) == b"MCCKPT1\n"


# -------------------------------------------------------------- predictions


def test_predict_metric_identity_at_canonical_focal():
    net = TinyDepthNet(1, rng=np.random.default_rng(15))
    image = rand_image(16)
    k = k_of(1000.0)
    raw = net.predict(image.channels)
    for variant in ("canon_label", "canon_image", "none"):
        out = predict_metric(net, image, k, variant, 1000.0)
        assert np.array_equal(out.values, raw), variant


def test_predict_metric_label_rescaling():
    # constant canonical prediction of 6 m, shot at half the canonical
    # focal length, means the true depth is 3 m
    net = zeroed_net(final_bias=math.log(math.expm1(6.0)))
    out = predict_metric(net, rand_image(17), k_of(500.0), "canon_label",
                         1000.0)
    assert out.values == pytest.approx(np.full((24, 32), 3.0), rel=1e-12)


def test_predict_metric_validates():
    net = TinyDepthNet(1, rng=np.random.default_rng(18))
    with pytest.raises(DomainError):
        predict_metric(net, rand_image(19), k_of(800.0), "nope", 1000.0)
    with pytest.raises(DomainError):
        # camconvs wants image+4 channels
        predict_metric(net, rand_image(19), k_of(800.0), "camconvs", 1000.0)


def test_variant_in_channels():
    assert variant_in_channels("canon_label", 3) == 3
    assert variant_in_channels("camconvs", 1) == 5


# ----------------------------------------------------------------- training


def small_cfg(manifest, **kw):
    base = dict(manifest=str(manifest), iterations=3, batch_size=2,
                log_every=1, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic(two_group_ds):
    r1 = train(small_cfg(two_group_ds))
    r2 = train(small_cfg(two_group_ds))
    assert all(np.array_equal(a, b)
               for a, b in zip(r1.model.params, r2.model.params))
    assert r1.history == r2.history
    assert r1.groups == (500.0, 1000.0)


def test_train_history_shape(two_group_ds):
    res = train(small_cfg(two_group_ds))
    assert [h["iter"] for h in res.history] == [0, 1, 2]
    for h in res.history:
        assert set(h) == {"iter", "total", "silog", "patchnorm",
                          "vnl", "pwn"}
        assert math.isfinite(h["total"])


def test_train_camconvs_and_image_variants_run(two_group_ds):
    res = train(small_cfg(two_group_ds, variant="camconvs", iterations=2))
    assert res.in_channels == 5 and res.model.in_channels == 5
    res = train(small_cfg(two_group_ds, variant="canon_image", iterations=2))
    assert res.in_channels == 1


def test_train_batch_must_balance_groups(two_group_ds):
    with pytest.raises(DomainError):
        train(small_cfg(two_group_ds, batch_size=3))


def test_train_rejects_unknown_focal_group(two_group_ds):
    with pytest.raises(DomainError):
        train(small_cfg(two_group_ds, train_focals=(250.0,)))


def test_train_divergence_reports_iteration(two_group_ds):
    with pytest.raises(DivergenceError) as err:
        train(small_cfg(two_group_ds, divergence_limit=1e-9))
    assert err.value.iteration == 0


def test_single_frame_overfit(memorizable_ds):
    cfg = small_cfg(memorizable_ds, variant="none", iterations=500,
                    batch_size=1, log_every=100, lr=1e-2,
                    crop_width=64, crop_height=48)
    res = train(cfg)
    first, last = res.history[0]["total"], res.history[-1]["total"]
    assert last < 0.1 * first


def test_evaluate_groups_structure(one_frame_ds):
    net = zeroed_net(final_bias=math.log(math.expm1(5.0)))
    frames = load_manifest_frames(one_frame_ds)
    out = evaluate_groups(net, frames, "none", 1000.0)
    assert set(out["groups"]) == {"700.0"}
    assert out["groups"]["700.0"]["n_frames"] == 1
    assert out["mean_absrel"] == out["groups"]["700.0"]["absrel"] >= 0


def test_trainconfig_validation(two_group_ds):
    good = dict(manifest=str(two_group_ds))
    for bad in (dict(variant="bogus"), dict(iterations=0),
                dict(batch_size=0), dict(crop_width=4),
                dict(hflip_prob=1.5), dict(freeze_layers=(7,)),
                dict(log_every=0), dict(canonical_focal=-1.0)):
        with pytest.raises(DomainError):
            TrainConfig(**{**good, **bad}).validate()


def test_train_respects_frozen_layers(two_group_ds):
    res = train(small_cfg(two_group_ds, freeze_layers=(0,)))
    fresh = train(small_cfg(two_group_ds, iterations=1, freeze_layers=(0,)))
    assert np.array_equal(res.model.params[0], fresh.model.params[0])
    assert not np.array_equal(res.model.params[2], fresh.model.params[2])
