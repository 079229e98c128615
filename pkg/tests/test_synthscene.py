"""Scene sampling and ray-cast rendering against closed-form geometry."""

import filecmp
import math

import numpy as np
import pytest

from metriccam import fileio
from metriccam.camera import CameraIntrinsics
from metriccam.errors import DomainError
from metriccam.synthscene import (AMBIENT, CAMERA_HEIGHT, CLASS_ALBEDOS,
                                  GROUND_ALBEDO, GROUND_RANGE, GROUND_SIZE,
                                  LIGHT_DIR, OBJECT_COUNT, SIZE_CLASSES,
                                  DatasetConfig, Pose, Primitive,
                                  RenderedFrame, SceneSpec, frame_rng,
                                  load_frame, make_dataset, pitch_pose,
                                  render, sample_frame, sample_scene)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def k_of(f=700.0, w=64, h=48):
    return CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)


def fronto_plane(depth, size, albedo=0.3):
    # local +z normal rotated to -z world: the face looks at the camera
    r = np.diag([1.0, -1.0, -1.0])
    return Primitive("plane", Pose(r, np.array([0.0, 0.0, depth])),
                     size, albedo)


def scene_of(*prims):
    return SceneSpec(tuple(prims), unit(LIGHT_DIR), AMBIENT)


# -------------------------------------------------------------------- types


def test_pose_validation():
    with pytest.raises(DomainError):
        Pose(np.ones((3, 3)), np.zeros(3))
    with pytest.raises(DomainError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det -1
    p = Pose.identity()
    assert np.array_equal(p.rotation, np.eye(3))


def test_primitive_validation():
    with pytest.raises(DomainError):
        Primitive("cone", Pose.identity(), 1.0, 0.5)
    with pytest.raises(DomainError):
        Primitive("sphere", Pose.identity(), -1.0, 0.5)
    with pytest.raises(DomainError):
        Primitive("sphere", Pose.identity(), 1.0, 1.5)


def test_scene_validation():
    with pytest.raises(DomainError):
        SceneSpec((), unit(LIGHT_DIR), AMBIENT)
    prim = fronto_plane(5.0, 2.0)
    with pytest.raises(DomainError):
        SceneSpec((prim,), np.array([0.0, 0.0, 2.0]), AMBIENT)
    with pytest.raises(DomainError):
        SceneSpec((prim,), unit(LIGHT_DIR), 1.5)


# ---------------------------------------------------------------- rendering


def test_render_fronto_plane_constant_depth():
    k = k_of()
    fr = render(scene_of(fronto_plane(5.0, 4.0, albedo=0.3)), k,
                Pose.identity())
    assert fr.depth.mask.all()
    assert np.allclose(fr.depth.values, 5.0, atol=1e-12)
    # normal points back at the camera everywhere
    assert np.allclose(fr.normals, [0.0, 0.0, -1.0], atol=1e-12)
    assert np.all(fr.plane_id == 0)
    # Lambertian shading against the scalar formula
    ndl = float(np.array([0.0, 0.0, -1.0]) @ unit(LIGHT_DIR))
    expected = 0.3 * (AMBIENT + (1 - AMBIENT) * max(0.0, ndl))
    assert np.allclose(fr.image.channels, expected, atol=1e-12)


def test_render_sphere_principal_depth():
    k = k_of(200.0)  # wide enough FOV to see past the silhouette
    sphere = Primitive("sphere", Pose(np.eye(3), np.array([0.0, 0.0, 10.0])),
                       2.0, 0.55)
    fr = render(scene_of(sphere), k, Pose.identity())
    v0, u0 = int(k.v0), int(k.u0)
    assert fr.depth.values[v0, u0] == pytest.approx(9.0, abs=1e-12)
    assert np.allclose(fr.normals[v0, u0], [0.0, 0.0, -1.0], atol=1e-12)
    assert fr.plane_id[v0, u0] == -1
    # silhouette interior valid, background invalid
    assert not fr.depth.mask[0, 0]


def slab_box_depth(k, center, edge, u, v):
    """Scalar ray/axis-aligned-box intersection, camera at the origin."""
    d = np.array([(u - k.u0) / k.fx, (v - k.v0) / k.fy, 1.0])
    t0, t1 = -math.inf, math.inf
    for ax in range(3):
        lo = (center[ax] - edge / 2 - 0.0) / d[ax] if d[ax] != 0 else None
        if d[ax] == 0:
            if abs(-center[ax]) > edge / 2:
                return 0.0
            continue
        hi = (center[ax] + edge / 2 - 0.0) / d[ax]
        lo, hi = min(lo, hi), max(lo, hi)
        t0, t1 = max(t0, lo), min(t1, hi)
    if t1 < t0 or t1 <= 0:
        return 0.0
    t = t0 if t0 > 0 else t1
    return t * d[2]


def test_render_box_matches_slab_oracle():
    k = k_of(100.0)  # keeps the off-axis box inside the frame
    center = np.array([0.8, 0.0, 6.0])
    box = Primitive("box", Pose(np.eye(3), center), 1.0, 0.55)
    fr = render(scene_of(box), k, Pose.identity())
    hits = 0
    for v in range(0, 48, 3):
        for u in range(0, 64, 3):
            expected = slab_box_depth(k, center, 1.0, u, v)
            got = fr.depth.values[v, u]
            if expected == 0.0:
                assert not fr.depth.mask[v, u]
            else:
                hits += 1
                assert got == pytest.approx(expected, abs=1e-9)
    assert hits > 10


def test_render_normals_unit_or_zero():
    k = k_of()
    fr = sample_frame(np.random.default_rng(0), k)
    norms = np.linalg.norm(fr.normals, axis=-1)
    assert np.allclose(norms[fr.depth.mask], 1.0, atol=1e-9)
    assert np.allclose(norms[~fr.depth.mask], 0.0, atol=0)
    # normals face the camera: n . ray <= 0 at valid pixels
    from metriccam.camera import pixel_rays
    dots = np.sum(fr.normals * pixel_rays(k), axis=-1)
    assert np.all(dots[fr.depth.mask] < 1e-9)


def test_o2_thin_silhouette_focal_distance_scaling():
    """Doubling focal and distance together leaves the silhouette pixel
    set of a fronto-parallel square unchanged."""
    near = render(scene_of(fronto_plane(3.0, 0.24)), k_of(500.0),
                  Pose.identity())
    far = render(scene_of(fronto_plane(6.0, 0.24)), k_of(1000.0),
                 Pose.identity())
    assert near.depth.mask.any() and not near.depth.mask.all()
    assert np.array_equal(near.depth.mask, far.depth.mask)


def test_render_rejects_bad_channels():
    with pytest.raises(DomainError):
        render(scene_of(fronto_plane(5.0, 4.0)), k_of(), Pose.identity(),
               channels=2)


# ----------------------------------------------------------------- sampling


def test_sample_scene_respects_prior():
    pose = pitch_pose(0.78)
    for f, sigma in ((500.0, 0.5), (1000.0, 1.0)):
        k = k_of(f)
        ground_y = CAMERA_HEIGHT * sigma
        buried = visible = 0
        for seed in range(12):
            scene = sample_scene(np.random.default_rng(seed), k, pose)
            ground, objects = scene.primitives[0], scene.primitives[1:]
            assert ground.kind == "plane" and ground.albedo == GROUND_ALBEDO
            assert ground.size == GROUND_SIZE * sigma
            assert OBJECT_COUNT[0] <= len(objects) <= OBJECT_COUNT[1]
            for obj in objects:
                assert obj.kind in ("box", "sphere")
                cls = SIZE_CLASSES.index(obj.size)
                assert obj.albedo == CLASS_ALBEDOS[cls]
                c = obj.pose.translation
                if c[1] > ground_y:
                    # parked under the ground plane, fully out of view
                    buried += 1
                    assert c[1] - ground_y >= 0.45 * obj.size
                else:
                    visible += 1
                    # the camera stays strictly outside the object
                    assert np.linalg.norm(c) >= 1.05 * (obj.size / 2.0)
                    z = (pose.rotation.T @ c)[2]
                    assert 0.5 * GROUND_RANGE * sigma < z <= 1.65 * GROUND_RANGE * sigma
        # scene depth scales with focal length; both placements occur
        assert buried and visible


def test_sample_scene_deterministic():
    k = k_of()
    pose = pitch_pose(0.78)
    a = sample_scene(np.random.default_rng(7), k, pose)
    b = sample_scene(np.random.default_rng(7), k, pose)
    assert len(a.primitives) == len(b.primitives)
    for pa, pb in zip(a.primitives, b.primitives):
        assert pa.kind == pb.kind and pa.size == pb.size
        assert np.array_equal(pa.pose.translation, pb.pose.translation)


def test_sampled_frames_mostly_valid():
    k = k_of()
    fractions = []
    for seed in range(20):
        fr = sample_frame(np.random.default_rng(seed), k)
        fractions.append(fr.depth.mask.mean())
    assert min(fractions) > 0.5


# ------------------------------------------------------------------ dataset


def test_dataset_config_validation():
    with pytest.raises(DomainError):
        DatasetConfig(focals=()).validate()
    with pytest.raises(DomainError):
        DatasetConfig(focals=(500.0, 500.0)).validate()
    with pytest.raises(DomainError):
        DatasetConfig(per_focal=0).validate()
    with pytest.raises(DomainError):
        DatasetConfig(width=4).validate()


def test_make_dataset_layout_and_counts(tmp_path):
    cfg = DatasetConfig(focals=(500.0, 1000.0), per_focal=3, width=32,
                        height=24, seed=7)
    path = make_dataset(tmp_path / "ds", cfg)
    manifest = fileio.read_json(path)
    assert len(manifest["frames"]) == 6
    assert manifest["seed"] == 7
    groups = [fr["focal_group"] for fr in manifest["frames"]]
    assert groups == [500.0] * 3 + [1000.0] * 3
    for fr in manifest["frames"]:
        for key in ("image", "depth", "normals", "plane_id"):
            assert (tmp_path / "ds" / fr[key]).exists()
        assert fr["intrinsics"]["u0"] == 16.0
        assert fr["intrinsics"]["v0"] == 12.0
        assert fr["metric_reliable"] is True


def test_make_dataset_deterministic(tmp_path):
    cfg = DatasetConfig(focals=(700.0,), per_focal=2, width=32, height=24,
                        seed=3)
    p1 = make_dataset(tmp_path / "a", cfg)
    p2 = make_dataset(tmp_path / "b", cfg)
    names = sorted(f.name for f in p1.parent.iterdir())
    assert names == sorted(f.name for f in p2.parent.iterdir())
    for name in names:
        assert filecmp.cmp(p1.parent / name, p2.parent / name, shallow=False), name


def test_frame_rng_independent_of_order():
    a = frame_rng(0, 5).uniform()
    frame_rng(0, 4).uniform()
    assert frame_rng(0, 5).uniform() == a


def test_load_frame_round_trip(tmp_path):
    cfg = DatasetConfig(focals=(700.0,), per_focal=1, width=32, height=24,
                        seed=11)
    path = make_dataset(tmp_path / "ds", cfg)
    manifest = fileio.read_json(path)
    record = manifest["frames"][0]
    k = CameraIntrinsics(700.0, 700.0, 16.0, 12.0, 32, 24)
    original = sample_frame(frame_rng(11, 0), k)
    loaded = load_frame(path.parent, record)
    assert np.array_equal(loaded.depth.mask, original.depth.mask)
    m = original.depth.mask
    assert np.max(np.abs(loaded.image.channels - original.image.channels)) \
        <= 0.5 / 65535 + 1e-12
    assert np.max(np.abs(loaded.depth.values[m] - original.depth.values[m])) < 1e-5
    assert np.max(np.abs(loaded.normals - original.normals)) < 1e-6
    assert np.array_equal(loaded.plane_id, original.plane_id)
    assert loaded.intrinsics == original.intrinsics
    assert np.allclose(loaded.pose.rotation, original.pose.rotation, atol=0)
    assert np.array_equal(loaded.pose.translation, original.pose.translation)
