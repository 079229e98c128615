"""Pinhole camera types and canonical-focal-length transforms.

Conventions used across the package:

- Pixel (u, v) samples the ray ((u - u0)/fx, (v - v0)/fy, 1) in the
  camera frame (x right, y down, z forward). Depth maps hold z-depth,
  the camera-frame z coordinate, not ray length.
- Resampling maps destination coordinate x to source coordinate
  x / scale (origin-anchored). This makes the intrinsics transform
  {f, u0, v0} -> {s*f, s*u0, s*v0} geometrically exact, so a resize to
  the canonical focal length and the canonical intrinsics stay
  consistent.

Two routes map a camera with pixel focal length f to a shared canonical
focal length f_c:

- label scaling: multiply depths by f_c / f, leave the image alone;
- image resizing: resample the image by f_c / f, leave depth values
  alone (only resampled onto the new grid).

Both make the appearance-to-target relation consistent across lenses;
inverses recover metric depth.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from .errors import DegenerateInputError, DomainError

ANISOTROPY_LIMIT = 0.1


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "u0", "v0"):
            val = getattr(self, name)
            if not math.isfinite(val):
                raise DomainError(f"{name} must be finite, got {val}")
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise DomainError("image dimensions must be >= 1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


@dataclass(frozen=True)
class PhysicalCameraMeta:
    """Lens and sensor metadata: focal length and pixel pitch, both in
    micrometers."""

    focal_um: float
    pixel_size_um: float

    def __post_init__(self):
        if not (math.isfinite(self.focal_um) and self.focal_um > 0):
            raise DomainError("focal_um must be finite and positive")
        if not (math.isfinite(self.pixel_size_um) and self.pixel_size_um > 0):
            raise DomainError("pixel_size_um must be finite and positive")


def pixel_focal(meta: PhysicalCameraMeta) -> float:
    """Focal length expressed in pixels: focal_um / pixel_size_um.

    Two cameras with equal pixel focal length image a given scene
    identically regardless of their physical sensor dimensions.
    """
    return meta.focal_um / meta.pixel_size_um


def effective_focal(k: CameraIntrinsics) -> float:
    """Single focal value for near-isotropic intrinsics: sqrt(fx*fy).

    Rejects anisotropy beyond 10% since a single canonical scale cannot
    represent strongly anamorphic optics.
    """
    if k.fx == k.fy:
        return k.fx
    if abs(k.fx - k.fy) / k.fx > ANISOTROPY_LIMIT:
        raise DomainError(
            f"fx/fy anisotropy too large: fx={k.fx}, fy={k.fy}")
    return math.sqrt(k.fx * k.fy)


class DepthMap:
    """Dense z-depth grid with a validity mask.

    values: (H, W) float64, meters. mask: (H, W) bool. Valid entries
    must be finite and positive; invalid entries are kept as stored but
    never read by package code.
    """

    def __init__(self, values: np.ndarray, mask: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise DomainError(f"depth values must be 2-d, got {values.shape}")
        if mask is None:
            mask = np.isfinite(values) & (values > 0)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape:
                raise DomainError("mask shape mismatch")
        vv = values[mask]
        if vv.size and not (np.isfinite(vv).all() and (vv > 0).all()):
            raise DomainError("valid depth values must be finite and > 0")
        self.values = values
        self.mask = mask

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def valid_values(self) -> np.ndarray:
        return self.values[self.mask]


class ImageMap:
    """Channel-first image grid, (C, H, W) float64 in [0, 1], C in {1, 3}."""

    def __init__(self, channels: np.ndarray):
        channels = np.asarray(channels, dtype=np.float64)
        if channels.ndim == 2:
            channels = channels[None]
        if channels.ndim != 3 or channels.shape[0] not in (1, 3):
            raise DomainError(f"image must be (C,H,W) with C in {{1,3}}, got {channels.shape}")
        if channels.size and (channels.min() < -1e-9 or channels.max() > 1 + 1e-9):
            raise DomainError("image intensities must lie in [0, 1]")
        self.channels = np.clip(channels, 0.0, 1.0)

    @property
    def shape(self):
        return self.channels.shape

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]


def _src_coords(n_dst: int, s: float, n_src: int) -> np.ndarray:
    """Destination index -> continuous source coordinate (dst / s), clamped."""
    x = np.arange(n_dst, dtype=np.float64) / s
    return np.clip(x, 0.0, float(n_src - 1))


def resize_bilinear(arr: np.ndarray, new_h: int, new_w: int, s: float) -> np.ndarray:
    """Bilinear resample of (..., H, W) with dst->src mapping x/s."""
    h, w = arr.shape[-2:]
    xs = _src_coords(new_w, s, w)
    ys = _src_coords(new_h, s, h)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xs - x0
    wy = ys - y0
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def resize_nearest(arr: np.ndarray, new_h: int, new_w: int, s: float) -> np.ndarray:
    """Nearest-neighbor resample of (..., H, W) with dst->src mapping x/s,
    round half up."""
    h, w = arr.shape[-2:]
    xs = np.floor(_src_coords(new_w, s, w) + 0.5).astype(np.int64)
    ys = np.floor(_src_coords(new_h, s, h) + 0.5).astype(np.int64)
    xs = np.minimum(xs, w - 1)
    ys = np.minimum(ys, h - 1)
    return arr[..., ys[:, None], xs[None, :]]


def canonicalize_labels(depth: DepthMap, k: CameraIntrinsics,
                        canonical_focal: float) -> tuple[DepthMap, CameraIntrinsics, float]:
    """Scale depth values by canonical_focal / f; image untouched.

    Returns (scaled depth, canonical intrinsics, scale). The canonical
    intrinsics keep the pixel grid and principal point and replace both
    focals with the canonical value.
    """
    if not (math.isfinite(canonical_focal) and canonical_focal > 0):
        raise DomainError("canonical focal must be finite and positive")
    f = effective_focal(k)
    scale = canonical_focal / f
    values = np.where(depth.mask, depth.values * scale, 0.0)
    out = DepthMap(values, depth.mask.copy())
    k_c = CameraIntrinsics(canonical_focal, canonical_focal, k.u0, k.v0,
                           k.width, k.height)
    return out, k_c, scale


def decanonicalize_labels(depth_c: DepthMap, scale: float) -> DepthMap:
    """Inverse of canonicalize_labels: divide values by the stored scale."""
    if not (math.isfinite(scale) and scale > 0):
        raise DomainError("scale must be finite and positive")
    values = np.where(depth_c.mask, depth_c.values / scale, 0.0)
    return DepthMap(values, depth_c.mask.copy())


def canonicalize_image(image: ImageMap, depth: DepthMap | None,
                       k: CameraIntrinsics, canonical_focal: float
                       ) -> tuple[ImageMap, DepthMap | None, CameraIntrinsics, float]:
    """Resample image (bilinear) and depth (nearest, values unscaled) by
    canonical_focal / f.

    Depth values stay metric; only the grid changes. Output intrinsics:
    {f_c, f_c, s*u0, s*v0, round(s*w), round(s*h)} with s = f_c / f.
    ``depth`` may be None (inference has no labels to carry along).
    """
    if not (math.isfinite(canonical_focal) and canonical_focal > 0):
        raise DomainError("canonical focal must be finite and positive")
    if depth is not None and (image.height, image.width) != depth.shape:
        raise DomainError("image and depth dimensions differ")
    f = effective_focal(k)
    scale = canonical_focal / f
    new_w = round_half_up(scale * k.width)
    new_h = round_half_up(scale * k.height)
    if new_w < 1 or new_h < 1:
        raise DomainError("canonical size collapses to zero pixels")
    chans = resize_bilinear(image.channels, new_h, new_w, scale)
    depth_c = None
    if depth is not None:
        values = resize_nearest(depth.values, new_h, new_w, scale)
        mask = resize_nearest(depth.mask, new_h, new_w, scale)
        values = np.where(mask, values, 0.0)
        depth_c = DepthMap(values, mask)
    k_c = CameraIntrinsics(canonical_focal, canonical_focal,
                           scale * k.u0, scale * k.v0, new_w, new_h)
    return ImageMap(chans), depth_c, k_c, scale


def decanonicalize_image(depth_c: DepthMap, scale: float,
                         orig_size: tuple[int, int]) -> DepthMap:
    """Resample a canonical-grid depth back to the original grid
    (nearest, values unscaled).

    orig_size is (width, height). The canonical grid must be consistent
    with the declared scale to within one pixel of rounding.
    """
    if not (math.isfinite(scale) and scale > 0):
        raise DomainError("scale must be finite and positive")
    ow, oh = int(orig_size[0]), int(orig_size[1])
    if ow < 1 or oh < 1:
        raise DomainError("original size must be positive")
    if abs(round_half_up(scale * ow) - depth_c.width) > 1 or \
       abs(round_half_up(scale * oh) - depth_c.height) > 1:
        raise DomainError(
            f"canonical grid {depth_c.width}x{depth_c.height} inconsistent "
            f"with scale {scale} and original size {ow}x{oh}")
    values = resize_nearest(depth_c.values, oh, ow, 1.0 / scale)
    mask = resize_nearest(depth_c.mask, oh, ow, 1.0 / scale)
    values = np.where(mask, values, 0.0)
    return DepthMap(values, mask)


def crop(image: ImageMap, depth: DepthMap, k: CameraIntrinsics,
         rect: tuple[int, int, int, int]
         ) -> tuple[ImageMap, DepthMap, CameraIntrinsics]:
    """Crop both grids to rect (x0, y0, w, h) and shift the principal
    point; focal lengths are unchanged (a crop only narrows the field of
    view)."""
    x0, y0, w, h = (int(r) for r in rect)
    if w < 1 or h < 1:
        raise DomainError("crop size must be positive")
    if x0 < 0 or y0 < 0 or x0 + w > k.width or y0 + h > k.height:
        raise DomainError(f"crop rect {rect} outside {k.width}x{k.height}")
    if (image.height, image.width) != (k.height, k.width) or depth.shape != (k.height, k.width):
        raise DomainError("grids do not match intrinsics dimensions")
    img = ImageMap(image.channels[:, y0:y0 + h, x0:x0 + w].copy())
    dep = DepthMap(depth.values[y0:y0 + h, x0:x0 + w].copy(),
                   depth.mask[y0:y0 + h, x0:x0 + w].copy())
    k2 = CameraIntrinsics(k.fx, k.fy, k.u0 - x0, k.v0 - y0, w, h)
    return img, dep, k2


def crop_padded(image: ImageMap, depth: DepthMap, k: CameraIntrinsics,
                rect: tuple[int, int, int, int]
                ) -> tuple[ImageMap, DepthMap, CameraIntrinsics]:
    """Like crop, but the rect may extend past the grid; out-of-range
    pixels become invalid (zero intensity, masked-out depth)."""
    x0, y0, w, h = (int(r) for r in rect)
    if w < 1 or h < 1:
        raise DomainError("crop size must be positive")
    c = image.channels.shape[0]
    img = np.zeros((c, h, w))
    dep = np.zeros((h, w))
    msk = np.zeros((h, w), dtype=bool)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + w, k.width), min(y0 + h, k.height)
    if sx1 > sx0 and sy1 > sy0:
        dx0, dy0 = sx0 - x0, sy0 - y0
        dx1, dy1 = dx0 + (sx1 - sx0), dy0 + (sy1 - sy0)
        img[:, dy0:dy1, dx0:dx1] = image.channels[:, sy0:sy1, sx0:sx1]
        dep[dy0:dy1, dx0:dx1] = depth.values[sy0:sy1, sx0:sx1]
        msk[dy0:dy1, dx0:dx1] = depth.mask[sy0:sy1, sx0:sx1]
    dep = np.where(msk, dep, 0.0)
    k2 = CameraIntrinsics(k.fx, k.fy, k.u0 - x0, k.v0 - y0, w, h)
    return ImageMap(img), DepthMap(dep, msk), k2


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """Per-pixel ray directions ((u-u0)/fx, (v-v0)/fy, 1), shape (H, W, 3).

    Multiplying by the z-depth at a pixel unprojects it to camera space.
    """
    u = (np.arange(k.width, dtype=np.float64) - k.u0) / k.fx
    v = (np.arange(k.height, dtype=np.float64) - k.v0) / k.fy
    rays = np.empty((k.height, k.width, 3))
    rays[:, :, 0] = u[None, :]
    rays[:, :, 1] = v[:, None]
    rays[:, :, 2] = 1.0
    return rays


def camconvs_encoding(k: CameraIntrinsics) -> np.ndarray:
    """Four per-pixel channels describing the camera geometry:

    0: (u - u0) / width          1: (v - v0) / height
    2: arctan((u - u0) / f)      3: arctan((v - v0) / f)

    where f is the effective focal length. Stacking these onto the
    image input gives a focal-aware baseline network.
    """
    f = effective_focal(k)
    u = np.arange(k.width, dtype=np.float64) - k.u0
    v = np.arange(k.height, dtype=np.float64) - k.v0
    ch0 = np.broadcast_to(u[None, :] / k.width, (k.height, k.width))
    ch1 = np.broadcast_to(v[:, None] / k.height, (k.height, k.width))
    ch2 = np.broadcast_to(np.arctan(u[None, :] / f), (k.height, k.width))
    ch3 = np.broadcast_to(np.arctan(v[:, None] / f), (k.height, k.width))
    return np.stack((ch0, ch1, ch2, ch3)).copy()


def mirror_intrinsics(k: CameraIntrinsics) -> CameraIntrinsics:
    """Intrinsics after a horizontal flip: u0 -> width - 1 - u0."""
    return replace(k, u0=k.width - 1 - k.u0)
