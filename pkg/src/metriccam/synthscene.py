"""Synthetic scenes: primitives, ray-cast rendering, and dataset export.

Scenes are oblique far-field views of one small ground patch plus a
handful of boxes and spheres drawn from discrete size classes. Albedo
is tied to the size class and light/ambient are fixed across the
corpus, so an object's intensity range identifies its real-world size
class while its pixel footprint fixes distance; depth then follows
from local appearance alone, which is what a small fully-convolutional
network can actually learn. The patch is kept to a minor share of the
valid pixels on purpose: a flat untextured plane shades to a constant,
so nothing local says how far away it is, and whichever label space a
run trains in, plane pixels carry an irreducible error that must not
dominate.

Rendering is Lambertian: albedo * (ambient + (1-ambient) * max(0, n.l))
with a single directional light, no shadows or textures. Depth is
camera-frame z. Per-pixel rays pass through integer pixel coordinates.
"""

from dataclasses import dataclass, field
import math
from pathlib import Path

import numpy as np

from . import fileio, kernels
from .camera import CameraIntrinsics, DepthMap, ImageMap, effective_focal
from .errors import DomainError

KIND_CODES = {"plane": 0, "box": 1, "sphere": 2}

SIZE_CLASSES = (0.5, 1.0, 2.0)
CLASS_ALBEDOS = (0.30, 0.55, 0.95)
GROUND_ALBEDO = 0.14
GROUND_SIZE = 2.8           # patch side, absolute like the object sizes
                            # so its pixel footprint holds across groups;
                            # small so objects own most of the valid pixels
GROUND_JITTER = 0.35        # patch center offset range, in-plane
GROUND_RANGE = 60.0         # ground level distance along the view axis
CAMERA_HEIGHT = 60.0
PITCH_RANGE = (0.76, 0.81)  # radians, downward; near 45 deg the ground
                            # depth band is narrowest per radian of view
FRAC_HI = 1.08              # object depth over its ray's ground distance
CLASS_FRAC_LO = (0.08, 0.18, 0.42)  # per size class; big ones sit farther
                                    # so footprints stay inside the frame
REFERENCE_FOCAL = 1000.0    # placements scale with f / REFERENCE_FOCAL
ANCHOR_MARGIN_U = (0.12, 0.88)
ANCHOR_MARGIN_V = (0.25, 0.90)
OBJECT_COUNT = (2, 6)
P_BOX = 0.1
LIGHT_DIR = (-0.35, -0.65, -0.55)
AMBIENT = 0.7


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: x_world = R @ x_cam + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.isfinite(r).all() or not np.isfinite(t).all():
            raise DomainError("pose entries must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise DomainError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class Primitive:
    """One scene object.

    kind: "plane" (square of side ``size`` in its local xy plane,
    normal +z), "box" (cube of edge ``size``), or "sphere" (diameter
    ``size``). ``pose`` places the local frame in the world.
    """

    kind: str
    pose: Pose
    size: float
    albedo: float

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise DomainError(f"unknown primitive kind {self.kind!r}")
        if not (math.isfinite(self.size) and self.size > 0):
            raise DomainError("size must be finite and positive")
        if not (0.0 <= self.albedo <= 1.0):
            raise DomainError("albedo must lie in [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    light_dir: np.ndarray
    ambient: float

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise DomainError("scene needs at least one primitive")
        l = np.asarray(self.light_dir, dtype=np.float64).reshape(3)
        n = np.linalg.norm(l)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-9:
            raise DomainError("light_dir must be a unit vector")
        if not (0.0 <= self.ambient <= 1.0):
            raise DomainError("ambient must lie in [0, 1]")
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "light_dir", l)


@dataclass
class RenderedFrame:
    image: ImageMap
    depth: DepthMap
    normals: np.ndarray        # (H, W, 3) camera frame, toward the camera
    plane_id: np.ndarray       # (H, W) int32, -1 where no plane primitive
    intrinsics: CameraIntrinsics
    pose: Pose


def render(scene: SceneSpec, k: CameraIntrinsics, pose: Pose,
           channels: int = 1) -> RenderedFrame:
    """Ray-cast the scene through camera ``k`` at ``pose``."""
    if channels not in (1, 3):
        raise DomainError("channels must be 1 or 3")
    n = len(scene.primitives)
    kinds = np.empty(n, dtype=np.int64)
    rots = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    sizes = np.empty(n)
    albedos = np.empty(n)
    for i, p in enumerate(scene.primitives):
        kinds[i] = KIND_CODES[p.kind]
        rots[i] = p.pose.rotation
        trans[i] = p.pose.translation
        sizes[i] = p.size
        albedos[i] = p.albedo

    depth, image, normals, prim_id = kernels.render_scene(
        k.width, k.height, k.fx, k.fy, k.u0, k.v0,
        pose.rotation, pose.translation,
        kinds, rots, trans, sizes, albedos,
        scene.light_dir, scene.ambient)

    plane_mask = np.isin(prim_id, [i for i in range(n) if kinds[i] == 0])
    plane_id = np.where(plane_mask, prim_id, -1).astype(np.int32)
    img = np.repeat(image[None], channels, axis=0) if channels == 3 else image[None]
    return RenderedFrame(
        image=ImageMap(img),
        depth=DepthMap(depth, depth > 0),
        normals=normals,
        plane_id=plane_id,
        intrinsics=k,
        pose=pose,
    )


def pitch_pose(pitch: float) -> Pose:
    """Camera at the origin pitched down by ``pitch`` radians (world y
    points down, matching the camera frame of an unpitched camera)."""
    c, s = math.cos(pitch), math.sin(pitch)
    r = np.array([[1.0, 0.0, 0.0],
                  [0.0, c, s],
                  [0.0, -s, c]])
    return Pose(r, np.zeros(3))


def _ground_pose(scale: float, pose: Pose, gx: float, gz: float) -> Pose:
    # local +z -> world -y (plane normal points up toward the camera)
    r = np.array([[1.0, 0.0, 0.0],
                  [0.0, 0.0, -1.0],
                  [0.0, 1.0, 0.0]])
    ground_y = CAMERA_HEIGHT * scale
    axis = pose.rotation @ np.array([0.0, 0.0, 1.0])
    if axis[1] > 1e-6:
        center = pose.translation + axis * ((ground_y - pose.translation[1])
                                            / axis[1])
    else:
        center = np.array([0.0, ground_y, GROUND_RANGE * scale])
    return Pose(r, center + np.array([gx, 0.0, gz]))


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sample_scene(rng: np.random.Generator, k: CameraIntrinsics,
                 pose: Pose) -> SceneSpec:
    """Draw a scene from the corpus prior: a ground patch plus 2..6
    objects anchored on view rays, sizes from the discrete classes with
    class-coded albedo.

    Placements scale with focal length so that image statistics do not:
    a camera with twice the focal length photographs a scene twice as
    large, twice as far away, giving the same picture. Metric depth
    then varies severalfold across focal groups at fixed appearance,
    which is the ambiguity the canonical transforms exist to resolve.
    Object size classes stay absolute; pixel footprint plus the
    class-coded albedo carries the metric cue. Each object sits at a
    random fraction of its ray's ground-level distance, with larger
    classes kept farther out so footprints stay inside the frame.
    Fractions of one or more drop the object half a size below ground
    level at its ground point: under the patch that hides it entirely,
    elsewhere it stays in view as one more far object. The same drop is
    applied when the object is too large to stand off the camera at its
    drawn distance.
    """
    scale = effective_focal(k) / REFERENCE_FOCAL
    light = np.asarray(LIGHT_DIR, dtype=np.float64)
    light = light / np.linalg.norm(light)
    gx = rng.uniform(-GROUND_JITTER, GROUND_JITTER) * scale
    gz = rng.uniform(-GROUND_JITTER, GROUND_JITTER) * scale
    prims = [Primitive("plane", _ground_pose(scale, pose, gx, gz),
                       GROUND_SIZE, GROUND_ALBEDO)]
    ground_y = CAMERA_HEIGHT * scale
    n_obj = int(rng.integers(OBJECT_COUNT[0], OBJECT_COUNT[1] + 1))
    for _ in range(n_obj):
        cls = int(rng.integers(0, len(SIZE_CLASSES)))
        size = SIZE_CLASSES[cls]
        albedo = CLASS_ALBEDOS[cls]
        kind = "box" if rng.random() < P_BOX else "sphere"
        u = rng.uniform(ANCHOR_MARGIN_U[0] * k.width, ANCHOR_MARGIN_U[1] * k.width)
        v = rng.uniform(ANCHOR_MARGIN_V[0] * k.height, ANCHOR_MARGIN_V[1] * k.height)
        frac = rng.uniform(CLASS_FRAC_LO[cls], FRAC_HI)
        dir_cam = np.array([(u - k.u0) / k.fx, (v - k.v0) / k.fy, 1.0])
        w = pose.rotation @ dir_cam
        if w[1] > 1e-6:
            z_ground = (ground_y - pose.translation[1]) / w[1]
        else:
            z_ground = GROUND_RANGE * scale  # ray misses the ground
        # nearer than this and the object would engulf the camera
        standoff = 2.2 * (0.5 * size) / z_ground
        if frac >= 1.0 or standoff >= 1.0:
            center = pose.rotation @ (dir_cam * z_ground) + pose.translation
            center = center + np.array([0.0, 0.5 * size + 0.1 * scale, 0.0])
        else:
            d = max(frac, standoff) * z_ground
            center = pose.rotation @ (dir_cam * d) + pose.translation
        rot = _random_rotation(rng) if kind == "box" else np.eye(3)
        prims.append(Primitive(kind, Pose(rot, center), size, albedo))
    return SceneSpec(tuple(prims), light, AMBIENT)


def sample_frame(rng: np.random.Generator, k: CameraIntrinsics,
                 channels: int = 1) -> RenderedFrame:
    """Sample a camera pitch and a scene, then render."""
    pitch = rng.uniform(*PITCH_RANGE)
    pose = pitch_pose(pitch)
    scene = sample_scene(rng, k, pose)
    return render(scene, k, pose, channels=channels)


@dataclass
class DatasetConfig:
    focals: tuple = (400.0, 700.0, 1000.0, 1300.0, 550.0, 1600.0)
    per_focal: int = 24
    width: int = 64
    height: int = 48
    seed: int = 0
    channels: int = 1

    def validate(self):
        if not self.focals:
            raise DomainError("need at least one focal group")
        if any(f <= 0 or not math.isfinite(f) for f in self.focals):
            raise DomainError("focal lengths must be finite and positive")
        if len(set(self.focals)) != len(self.focals):
            raise DomainError("duplicate focal group")
        if self.per_focal < 1:
            raise DomainError("per_focal must be >= 1")
        if self.width < 8 or self.height < 8:
            raise DomainError("frames must be at least 8x8")
        if self.channels not in (1, 3):
            raise DomainError("channels must be 1 or 3")


SCENE_STREAM = 71   # RNG sub-stream tag for scene sampling


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    """Independent per-frame generator: reordering or adding frames
    never perturbs other frames' draws."""
    return np.random.default_rng([seed, SCENE_STREAM, frame_index])


def write_dataset(out_dir, frames, seed: int = 0,
                  config: dict | None = None) -> Path:
    """Write rendered frames plus a JSON manifest under ``out_dir``.

    Layout: img_XXXX.ppm (16-bit), dep_XXXX.pfm, nrm_XXXX.npy (float32
    camera-frame normals), pid_XXXX.npy (int16 plane ids), and
    manifest.json grouping frames by focal length. Returns the
    manifest path.
    """
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for frame_index, fr in enumerate(frames):
        img_name = f"img_{frame_index:04d}.ppm"
        dep_name = f"dep_{frame_index:04d}.pfm"
        nrm_name = f"nrm_{frame_index:04d}.npy"
        pid_name = f"pid_{frame_index:04d}.npy"
        fileio.write_ppm(out / img_name, fr.image.channels)
        fileio.write_pfm(out / dep_name, fr.depth.values, fr.depth.mask)
        np.save(out / nrm_name, fr.normals.astype(np.float32))
        np.save(out / pid_name, fr.plane_id.astype(np.int16))
        records.append({
            "image": img_name,
            "depth": dep_name,
            "normals": nrm_name,
            "plane_id": pid_name,
            "intrinsics": fileio.intrinsics_to_dict(fr.intrinsics),
            "pose": fileio.pose_to_dict(fr.pose.rotation, fr.pose.translation),
            "focal_group": effective_focal(fr.intrinsics),
            "metric_reliable": True,
            "frame_index": frame_index,
        })
    manifest = {
        "version": __version__,
        "seed": seed,
        "config": config or {},
        "frames": records,
    }
    path = out / "manifest.json"
    fileio.write_json(path, manifest)
    return path


def make_dataset(out_dir, config: DatasetConfig) -> Path:
    """Render a dataset from the corpus prior and write it.

    Frame RNG streams depend only on (seed, frame index), so output is
    byte-identical across runs and render order. Returns the manifest
    path.
    """
    config.validate()
    frames = []
    frame_index = 0
    for focal in config.focals:
        k = CameraIntrinsics(focal, focal, config.width / 2.0,
                             config.height / 2.0, config.width, config.height)
        for _ in range(config.per_focal):
            rng = frame_rng(config.seed, frame_index)
            frames.append(sample_frame(rng, k, channels=config.channels))
            frame_index += 1
    meta = {
        "focals": list(config.focals),
        "per_focal": config.per_focal,
        "width": config.width,
        "height": config.height,
        "channels": config.channels,
        "size_classes": list(SIZE_CLASSES),
        "class_albedos": list(CLASS_ALBEDOS),
        "ambient": AMBIENT,
        "light_dir": list(LIGHT_DIR),
    }
    return write_dataset(out_dir, frames, seed=config.seed, config=meta)


def load_frame(manifest_dir, record: dict) -> RenderedFrame:
    """Load one manifest frame back into memory."""
    base = Path(manifest_dir)
    img = fileio.read_ppm(base / record["image"])
    values, mask = fileio.read_pfm(base / record["depth"])
    normals = np.load(base / record["normals"]).astype(np.float64)
    plane_id = np.load(base / record["plane_id"]).astype(np.int32)
    k, _ = fileio.intrinsics_from_dict(record["intrinsics"])
    r, t = fileio.pose_from_dict(record["pose"])
    return RenderedFrame(
        image=ImageMap(img),
        depth=DepthMap(values, mask),
        normals=normals,
        plane_id=plane_id,
        intrinsics=k,
        pose=Pose(r, t),
    )
