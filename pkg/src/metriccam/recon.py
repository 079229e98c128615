"""Point-cloud reconstruction and comparison on top of metric depth.

Nearest-neighbor queries dispatch to a uniform spatial hash when the
cloud geometry suits one and fall back to exact brute force otherwise;
both paths return exact nearest neighbors, so results never depend on
the dispatch choice.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import CameraIntrinsics, DepthMap, pixel_rays
from .errors import DegenerateInputError, DomainError

FSCORE_TAU = 0.05
GRID_MAX_CELLS_PER_AXIS = 512
NN_SPACING_SAMPLE = 500


def unproject(depth: DepthMap, k: CameraIntrinsics,
              rotation: np.ndarray | None = None,
              translation: np.ndarray | None = None) -> np.ndarray:
    """Valid pixels to 3-d points, row-major pixel order, shape (N, 3).

    With a camera-to-world rotation/translation the points land in the
    world frame, else in the camera frame.
    """
    if (depth.height, depth.width) != (k.height, k.width):
        raise DomainError("depth size does not match intrinsics")
    rays = pixel_rays(k)
    pts = rays[depth.mask] * depth.values[depth.mask][:, None]
    if rotation is not None or translation is not None:
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        pts = pts @ r.T + t
    return pts


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Replace each occupied voxel by the centroid of its points.

    Cells are keyed relative to the cloud minimum and visited in sorted
    key order, so output order is deterministic.
    """
    pts = _as_cloud(points)
    if not (np.isfinite(voxel) and voxel > 0):
        raise DomainError("voxel size must be finite and positive")
    if len(pts) == 0:
        return pts.copy()
    keys = np.floor((pts - pts.min(axis=0)) / voxel).astype(np.int64)
    nx = int(keys[:, 0].max()) + 1
    ny = int(keys[:, 1].max()) + 1
    lin = (keys[:, 2] * ny + keys[:, 1]) * nx + keys[:, 0]
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    uniq, starts = np.unique(lin_sorted, return_index=True)
    sums = np.add.reduceat(pts[order], starts, axis=0)
    counts = np.diff(np.append(starts, len(pts)))
    return sums / counts[:, None]


def transform_fuse(clouds, voxel: float | None = None) -> np.ndarray:
    """Apply per-cloud rigid transforms and concatenate.

    ``clouds`` is an iterable of (points, rotation, translation);
    rotation/translation may be None for identity. An optional voxel
    size downsamples the fused result by cell centroids.
    """
    parts = []
    for points, rotation, translation in clouds:
        pts = _as_cloud(points)
        if rotation is not None:
            r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
            pts = pts @ r.T
        if translation is not None:
            pts = pts + np.asarray(translation, dtype=np.float64).reshape(3)
        parts.append(pts)
    if not parts:
        return np.zeros((0, 3))
    fused = np.concatenate(parts, axis=0)
    if voxel is not None:
        fused = voxel_downsample(fused, voxel)
    return fused


def _as_cloud(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError("point cloud must have shape (N, 3)")
    if len(pts) and not np.isfinite(pts).all():
        raise DomainError("point cloud contains non-finite values")
    return pts


def _typical_spacing(ref: np.ndarray) -> float:
    """Median nearest-neighbor distance of a deterministic subsample."""
    n = len(ref)
    take = min(NN_SPACING_SAMPLE, n)
    idx = np.unique(np.linspace(0, n - 1, take).astype(np.int64))
    sub = ref[idx]
    if len(sub) < 2:
        return 0.0
    d = np.empty(len(sub))
    for i in range(len(sub)):
        diff = sub - sub[i]
        dist2 = np.einsum("ij,ij->i", diff, diff)
        dist2[i] = np.inf
        d[i] = np.sqrt(dist2.min())
    return float(np.median(d))


def _nearest(q: np.ndarray, r: np.ndarray,
             cell: float | None) -> tuple[np.ndarray, np.ndarray]:
    if cell is None:
        cell = 2.0 * _typical_spacing(r)
    use_grid = cell > 0
    if use_grid:
        extent = r.max(axis=0) - r.min(axis=0)
        if (extent / cell > GRID_MAX_CELLS_PER_AXIS).any():
            use_grid = False
    if use_grid:
        grid = kernels.build_grid(r, cell)
        return kernels.grid_nn(q, grid)
    return kernels.brute_nn(q, r)


def nearest_distances(query: np.ndarray, ref: np.ndarray,
                      cell: float | None = None) -> np.ndarray:
    """Exact euclidean distance from each query point to its nearest
    reference point. ``cell`` overrides the hash cell size (callers
    with a known tolerance, like the f-score, pass it directly)."""
    q = _as_cloud(query)
    r = _as_cloud(ref)
    if len(r) == 0:
        raise DegenerateInputError("empty reference cloud")
    if len(q) == 0:
        return np.zeros(0)
    return _nearest(q, r, cell)[1]


def chamfer_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance:
    0.5 * (mean_a min_b |a-b| + mean_b min_a |b-a|)."""
    a = _as_cloud(a)
    b = _as_cloud(b)
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("chamfer distance needs non-empty clouds")
    return 0.5 * (float(nearest_distances(a, b).mean())
                  + float(nearest_distances(b, a).mean()))


def fscore(pred: np.ndarray, gt: np.ndarray, tau: float = FSCORE_TAU) -> dict:
    """Precision/recall/f-score at distance threshold tau."""
    if not (np.isfinite(tau) and tau > 0):
        raise DomainError("tau must be finite and positive")
    p = _as_cloud(pred)
    g = _as_cloud(gt)
    if len(p) == 0 or len(g) == 0:
        raise DegenerateInputError("fscore needs non-empty clouds")
    precision = float((nearest_distances(p, g, cell=tau) < tau).mean())
    recall = float((nearest_distances(g, p, cell=tau) < tau).mean())
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "fscore": f, "tau": tau}


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform minimizing |R src + t - dst|^2 (proper rotation)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    r = vt.T @ flip @ u.T
    return r, cd - r @ cs


@dataclass
class ICPResult:
    rotation: np.ndarray
    translation: np.ndarray
    rmse: float
    n_iterations: int
    converged: bool


def icp(src: np.ndarray, dst: np.ndarray, max_iterations: int = 50,
        tol: float = 1e-8, trim_fraction: float = 0.0) -> ICPResult:
    """Rigid point-to-point ICP aligning src onto dst.

    Correspondences are exact nearest neighbors; each step solves the
    orthogonal Procrustes problem in closed form. Stops when the rmse
    improvement drops below ``tol``. Deterministic: no sampling.

    ``trim_fraction`` discards that fraction of the worst correspondences
    before each update, for clouds with partial overlap or outliers. The
    default keeps every pair, which is right for clean synthetic clouds.
    """
    s = _as_cloud(src)
    d = _as_cloud(dst)
    if len(s) < 3 or len(d) < 3:
        raise DegenerateInputError("icp needs at least three points per cloud")
    if not 0.0 <= trim_fraction < 1.0:
        raise DomainError("trim_fraction must be in [0, 1)")
    sv = np.linalg.svd(s - s.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateInputError(
            "source cloud is collinear or coincident; rotation is ambiguous")
    r_tot = np.eye(3)
    t_tot = np.zeros(3)
    cur = s.copy()
    prev_rmse = np.inf
    rmse = np.inf
    it = 0
    converged = False
    cell = 2.0 * _typical_spacing(d)
    for it in range(1, max_iterations + 1):
        nn_idx, dist = _nearest(cur, d, cell)
        rmse = float(np.sqrt(np.mean(dist ** 2)))
        if prev_rmse - rmse < tol:
            converged = True
            break
        keep = np.arange(len(cur))
        if trim_fraction > 0.0:
            n_keep = max(3, int(round(len(cur) * (1.0 - trim_fraction))))
            keep = np.argsort(dist, kind="stable")[:n_keep]
        r, t = _kabsch(cur[keep], d[nn_idx[keep]])
        cur = cur @ r.T + t
        r_tot = r @ r_tot
        t_tot = r @ t_tot + t
        prev_rmse = rmse
    return ICPResult(r_tot, t_tot, rmse, it, converged)


def measure(depth: DepthMap, k: CameraIntrinsics,
            pixel_a: tuple, pixel_b: tuple) -> float:
    """Euclidean distance in meters between two valid pixels.

    Pixels are (u, v) integer coordinates. The point of predicting
    metric depth is that this needs no reference object.
    """
    pts = []
    for u, v in (pixel_a, pixel_b):
        u = int(u)
        v = int(v)
        if not (0 <= u < depth.width and 0 <= v < depth.height):
            raise DomainError(f"pixel ({u}, {v}) outside the depth map")
        if not depth.mask[v, u]:
            raise DegenerateInputError(f"pixel ({u}, {v}) has no valid depth")
        z = depth.values[v, u]
        pts.append(np.array([(u - k.u0) / k.fx * z, (v - k.v0) / k.fy * z, z]))
    return float(np.linalg.norm(pts[0] - pts[1]))
