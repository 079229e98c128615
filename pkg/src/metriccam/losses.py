"""Depth training losses with analytic gradients.

All losses share one calling shape: predicted depth as an (H, W) float
array, ground truth as a DepthMap, and they return a LossResult whose
``grad`` matches the prediction's shape (zero at pixels that did not
contribute). Validity is the gt mask intersected with finite, positive
predictions.

Losses that subsample (patches, point triplets, plane pairs) take an
explicit numpy Generator so callers control determinism; re-seeding the
generator and calling again reproduces the same subsample, which is how
the finite-difference checker freezes the stochastic part.

Gradients are exact for the sampled objective, including the dependency
of normalization statistics (medians, absolute deviations, plane-fit
normal equations) on the prediction, so central differences agree to
first order everywhere off the measure-zero tie/kink set.
"""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .camera import CameraIntrinsics, DepthMap, pixel_rays
from .errors import DegenerateInputError, DomainError

SILOG_LAMBDA = 0.5
VALUE_FLOOR = 1e-12


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _validate_pred(pred, gt: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    """Accepts a raw array (network output) or a DepthMap; returns
    (values, valid) where valid intersects the gt mask, the pred mask
    if present, and finite positive pred values."""
    if isinstance(pred, DepthMap):
        values, pmask = pred.values, pred.mask
    else:
        values, pmask = np.asarray(pred, dtype=np.float64), None
    if values.shape != (gt.height, gt.width):
        raise DomainError(
            f"prediction shape {values.shape} does not match ground truth "
            f"({gt.height}, {gt.width})")
    valid = gt.mask & np.isfinite(values) & (values > 0)
    if pmask is not None:
        valid = valid & pmask
    return values, valid


def silog(pred: np.ndarray, gt: DepthMap,
          lam: float = SILOG_LAMBDA) -> LossResult:
    """Scale-invariant log loss.

    sqrt( mean(e^2) - lam * mean(e)^2 ),  e = log(pred) - log(gt),
    over valid pixels. lam = 0 is a plain log RMS; lam = 1 is fully
    scale-invariant; the default 0.5 penalizes scale errors at half
    weight, which keeps the metric anchor.
    """
    if not (0.0 <= lam <= 1.0):
        raise DomainError("lam must lie in [0, 1]")
    p, valid = _validate_pred(pred, gt)
    n = int(valid.sum())
    if n < 2:
        raise DegenerateInputError("silog needs at least two valid pixels")
    e = np.log(p[valid]) - np.log(gt.values[valid])
    s = e.sum()
    v = (e * e).sum() / n - lam * (s / n) ** 2
    value = float(np.sqrt(max(v, 0.0)))
    grad = np.zeros_like(p)
    if value >= VALUE_FLOOR:
        ge = (2.0 / n) * e - (2.0 * lam / (n * n)) * s
        grad[valid] = ge / (2.0 * value) / p[valid]
    return LossResult(value, grad)


PATCH_COUNT = 32
PATCH_SIDE_RANGE = (0.125, 0.5)


@dataclass(frozen=True)
class PatchSpec:
    """One patch rectangle for the patch-normalized loss."""

    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise DomainError("patch sides must be >= 1 pixel")
        if self.x0 < 0 or self.y0 < 0:
            raise DomainError("patch origin must be non-negative")


def sample_patches(rng: np.random.Generator, height: int, width: int,
                   n_patches: int = PATCH_COUNT,
                   side_range: tuple = PATCH_SIDE_RANGE) -> list:
    """Draw patch rectangles: each side uniform in ``side_range`` of its
    axis (independently per axis), position uniform over placements
    that stay in bounds. Draw order per patch: width, height, x0, y0."""
    lo, hi = side_range
    if not (0.0 < lo <= hi <= 1.0):
        raise DomainError("need 0 < lo <= hi <= 1 for patch sides")
    if n_patches < 1:
        raise DomainError("n_patches must be >= 1")
    rects = []
    for _ in range(n_patches):
        w = min(width, max(1, int(round(rng.uniform(lo, hi) * width))))
        h = min(height, max(1, int(round(rng.uniform(lo, hi) * height))))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        rects.append(PatchSpec(x0, y0, w, h))
    return rects


def _median_lower(x: np.ndarray) -> tuple[float, int]:
    """Lower-middle median and the flat index attaining it.

    Even-length inputs take the element at sorted position (n-1)//2, so
    the statistic is always one of the inputs and the gradient stays
    well defined. Ties resolve to the first occurrence in array order.
    """
    order = np.argsort(x, kind="stable")
    k = order[(len(x) - 1) // 2]
    return float(x[k]), int(k)


def _normalize_patch(x: np.ndarray) -> tuple[np.ndarray, float, int, np.ndarray]:
    med, k = _median_lower(x)
    a = x - med
    s = np.abs(a).mean()
    if s == 0.0:
        s = 1e-6
    return a / s, s, k, a


def patchnorm(pred: np.ndarray, gt: DepthMap, rng: np.random.Generator,
              patches: list | None = None,
              n_patches: int = PATCH_COUNT) -> LossResult:
    """Random-patch normalized depth loss.

    Each patch rectangle is normalized independently: subtract the
    lower-middle median, divide by the mean absolute deviation about
    it, and compare pred to gt with an L1 penalty, averaged per patch
    and then across patches. Normalizing per patch makes the loss
    exactly invariant to positive affine maps of the prediction and
    sensitive to local relative structure at every scale the patch
    distribution covers.

    An explicit ``patches`` list (PatchSpec rects) bypasses sampling;
    otherwise ``n_patches`` rects are drawn from ``rng``. Patches with
    no valid pixel contribute zero with the divisor unchanged. If every
    patch is degenerate (empty, or constant in both pred and gt) the
    loss is zero with a warning rather than an error.
    """
    p, valid = _validate_pred(pred, gt)
    if patches is None:
        patches = sample_patches(rng, gt.height, gt.width, n_patches)
    elif not patches:
        raise DomainError("patches list must not be empty")
    total = 0.0
    grad = np.zeros_like(p)
    informative = False
    m = len(patches)
    for rect in patches:
        x0, y0, w, h = rect.x0, rect.y0, rect.w, rect.h
        if x0 + w > gt.width or y0 + h > gt.height:
            raise DomainError("patch extends outside the frame")
        sub = valid[y0:y0 + h, x0:x0 + w]
        if not sub.any():
            continue
        d = p[y0:y0 + h, x0:x0 + w][sub]
        g = gt.values[y0:y0 + h, x0:x0 + w][sub]
        n = d.size
        u, sd, kd, ad = _normalize_patch(d)
        vref, sg, _, ag = _normalize_patch(g)
        if np.abs(ad).sum() > 0 or np.abs(ag).sum() > 0:
            informative = True
        r = u - vref
        total += np.abs(r).mean() / m

        sig = np.sign(r)
        sum_sig = sig.sum()
        sum_sig_u = (sig * u).sum()
        sgn_a = np.sign(ad)
        ds = (sgn_a - np.where(np.arange(n) == kd, sgn_a.sum(), 0.0)) / n
        gp = (sig / sd
              - np.where(np.arange(n) == kd, sum_sig / sd, 0.0)
              - ds / sd * sum_sig_u) / n
        block = np.zeros((h, w))
        block[sub] = gp / m
        grad[y0:y0 + h, x0:x0 + w] += block
    if not informative:
        warnings.warn("patchnorm: every patch was empty or constant")
        return LossResult(0.0, np.zeros_like(p))
    return LossResult(float(total), grad)


def _unit_and_jacobian(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize c and return d(unit)/dc = (I - nn^T)/|c|."""
    norm = np.linalg.norm(c)
    if norm < VALUE_FLOOR:
        return np.zeros(3), np.zeros((3, 3))
    n = c / norm
    return n, (np.eye(3) - np.outer(n, n)) / norm


def _unit_rows(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; rows shorter than the floor become zero
    (their norm output is returned as 0 so callers can mask)."""
    norm = np.linalg.norm(c, axis=-1)
    safe = np.where(norm < VALUE_FLOOR, 1.0, norm)
    n = c / safe[..., None]
    n[norm < VALUE_FLOOR] = 0.0
    return n, np.where(norm < VALUE_FLOOR, 0.0, norm)


def vnl(pred: np.ndarray, gt: DepthMap, k: CameraIntrinsics,
        rng: np.random.Generator, n_triplets: int = 100,
        min_side_frac: float = 0.01,
        min_angle_deg: float = 15.0) -> LossResult:
    """Virtual-normal loss over random pixel triplets.

    ``n_triplets`` index triples are drawn uniformly over the valid
    pixels in one batch; triples with a repeated pixel are dropped, the
    rest are unprojected with gt depth and kept only when the gt
    triangle is well conditioned: every side at least ``min_side_frac``
    times the median valid gt depth and every interior angle at least
    ``min_angle_deg``. The side threshold is deliberately small
    relative to depth because a narrow field of view bounds lateral
    extent at a few percent of the viewing distance; the angle test
    alone removes the needle triangles. Survivors are scored:
    componentwise L1 between the unit normals of the pred- and
    gt-unprojected triangles, same vertex order, averaged over
    triplets.

    Long-range triangles couple distant pixels, so this constrains
    global surface orientation where pixelwise losses are blind.
    """
    if n_triplets < 1:
        raise DomainError("n_triplets must be >= 1")
    p, valid = _validate_pred(pred, gt)
    idx = np.flatnonzero(valid)
    if idx.size < 3:
        raise DegenerateInputError("vnl needs at least three valid pixels")
    rays = pixel_rays(k).reshape(-1, 3)
    flat_gt = gt.values.reshape(-1)
    med = float(np.median(flat_gt[idx]))
    min_side = min_side_frac * med
    cos_max = np.cos(np.deg2rad(min_angle_deg))

    draws = rng.integers(0, idx.size, size=(n_triplets, 3))
    distinct = ((draws[:, 0] != draws[:, 1]) & (draws[:, 0] != draws[:, 2])
                & (draws[:, 1] != draws[:, 2]))
    ids = idx[draws[distinct]]
    pg = rays[ids] * flat_gt[ids][..., None]
    e_ab = pg[:, 1] - pg[:, 0]
    e_bc = pg[:, 2] - pg[:, 1]
    e_ca = pg[:, 0] - pg[:, 2]
    s_ab = np.linalg.norm(e_ab, axis=1)
    s_bc = np.linalg.norm(e_bc, axis=1)
    s_ca = np.linalg.norm(e_ca, axis=1)
    nz = (s_ab > 0) & (s_bc > 0) & (s_ca > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_a = -np.einsum("ij,ij->i", e_ca, e_ab) / (s_ca * s_ab)
        cos_b = -np.einsum("ij,ij->i", e_ab, e_bc) / (s_ab * s_bc)
        cos_c = -np.einsum("ij,ij->i", e_bc, e_ca) / (s_bc * s_ca)
    keep = (nz & (np.minimum(np.minimum(s_ab, s_bc), s_ca) >= min_side)
            & (np.maximum(np.maximum(cos_a, cos_b), cos_c) <= cos_max))
    ids = ids[keep]
    if len(ids) == 0:
        raise DegenerateInputError("vnl: no triplet passed the geometry tests")

    flat_pred = p.reshape(-1)
    r3 = rays[ids]                                   # (T, 3 vertices, xyz)
    pp = r3 * flat_pred[ids][..., None]
    pg = r3 * flat_gt[ids][..., None]
    e1 = pp[:, 1] - pp[:, 0]
    e2 = pp[:, 2] - pp[:, 0]
    cp = np.cross(e1, e2)
    cg = np.cross(pg[:, 1] - pg[:, 0], pg[:, 2] - pg[:, 0])
    np_, norm_p = _unit_rows(cp)
    ng, _ = _unit_rows(cg)
    diff = np_ - ng
    total = float(np.abs(diff).sum(axis=1).mean())

    sig = np.sign(diff)
    # d(unit)/dc is (I - nn^T)/|c|, symmetric; degenerate rows get zero
    dot = np.einsum("ij,ij->i", np_, sig)
    inv = np.where(norm_p > 0, 1.0 / np.where(norm_p > 0, norm_p, 1.0), 0.0)
    gc = (sig - np_ * dot[:, None]) * inv[:, None]
    g_e1 = np.cross(e2, gc)
    g_e2 = np.cross(gc, e1)
    g_pts = np.stack((-g_e1 - g_e2, g_e1, g_e2), axis=1)
    gd = np.einsum("tvj,tvj->tv", g_pts, r3) / len(ids)
    grad_flat = np.zeros_like(flat_pred)
    np.add.at(grad_flat, ids.reshape(-1), gd.reshape(-1))
    return LossResult(total, grad_flat.reshape(p.shape))


def _fit_normals_batch(rays9: np.ndarray, d9: np.ndarray,
                       gout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched 3x3-neighborhood plane fits with exact gradients.

    rays9: (M, 9, 3) pixel rays, d9: (M, 9) depths, gout: (M, 3)
    gradient w.r.t. each fit's unit normal. Fits z = a x + b y + c by
    least squares over the unprojected points; the unit normal is
    (a, b, -1) normalized (z negative: toward the camera, matching
    rendered normals). Returns (unit normals (M, 3), depth gradients
    (M, 9)) with the full dependence of the normal equations on depth
    accounted for.
    """
    pts = rays9 * d9[..., None]
    x_mat = pts.copy()
    x_mat[..., 2] = 1.0                            # rows (x, y, 1)
    z = pts[..., 2]
    m = np.einsum("mia,mib->mab", x_mat, x_mat)
    v = np.einsum("mia,mi->ma", x_mat, z)
    m_inv = np.linalg.inv(m)
    w = np.einsum("mab,mb->ma", m_inv, v)
    nvec = np.stack((w[:, 0], w[:, 1], -np.ones(len(w))), axis=1)
    n, norm = _unit_rows(nvec)

    inv = np.where(norm > 0, 1.0 / np.where(norm > 0, norm, 1.0), 0.0)
    dot = np.einsum("ma,ma->m", n, gout)
    gw3 = (gout - n * dot[:, None]) * inv[:, None]  # (I - nn^T)/|. | @ gout
    gw = gw3.copy()
    gw[:, 2] = 0.0                                  # c does not enter the normal
    lam = np.einsum("mab,mb->ma", m_inv, gw)
    dx = rays9.copy()
    dx[..., 2] = 0.0
    xw = np.einsum("mia,ma->mi", x_mat, w)
    dxw = np.einsum("mia,ma->mi", dx, w)
    dv = dx * z[..., None] + x_mat                  # d(X^T z)/d depth_i rows
    dmw = dx * xw[..., None] + x_mat * dxw[..., None]
    gd = np.einsum("mia,ma->mi", dv - dmw, lam)
    return n, gd


def pwn(pred: np.ndarray, gt: DepthMap, gt_normals: np.ndarray,
        plane_id: np.ndarray, k: CameraIntrinsics,
        rng: np.random.Generator, n_pairs: int = 100) -> LossResult:
    """Plane-region normal consistency loss.

    Candidate pixels have a fully valid 3x3 neighborhood lying on a
    single annotated plane. For each of ``n_pairs`` sampled same-plane
    pixel pairs, a local plane is least-squares fitted to the pred
    unprojection of each member's 3x3 neighborhood and its unit normal
    is penalized by (1 - n_fit . n_gt) against the analytic gt normal,
    averaged over all 2 * n_pairs members. Planes with fewer than two
    candidates never form pairs; with no candidates at all the loss is
    zero (with a warning) so plane-free frames stay usable.
    """
    p, valid = _validate_pred(pred, gt)
    pid = np.asarray(plane_id)
    if pid.shape != p.shape:
        raise DomainError("plane_id shape mismatch")
    gn = np.asarray(gt_normals, dtype=np.float64)
    if gn.shape != (gt.height, gt.width, 3):
        raise DomainError("gt_normals must be (H, W, 3)")

    h, w = p.shape
    ok = np.zeros((h, w), dtype=bool)
    if h >= 3 and w >= 3:
        win_ok = np.ones((h - 2, w - 2), dtype=bool)
        win_same = np.ones((h - 2, w - 2), dtype=bool)
        center = pid[1:h - 1, 1:w - 1]
        for dy in range(3):
            for dx in range(3):
                win_ok &= valid[dy:dy + h - 2, dx:dx + w - 2]
                win_same &= pid[dy:dy + h - 2, dx:dx + w - 2] == center
        ok[1:h - 1, 1:w - 1] = win_ok & win_same & (center >= 0)
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        warnings.warn("pwn: no plane-interior candidates, returning zero")
        return LossResult(0.0, np.zeros_like(p))

    cand_pid = pid.reshape(-1)[cand]
    by_plane = {}
    for ci, pl in zip(cand, cand_pid):
        by_plane.setdefault(int(pl), []).append(int(ci))
    planes = [pl for pl in sorted(by_plane) if len(by_plane[pl]) >= 2]
    if not planes:
        warnings.warn("pwn: no plane with two candidates, returning zero")
        return LossResult(0.0, np.zeros_like(p))

    members = []
    for _ in range(n_pairs):
        pl = planes[int(rng.integers(0, len(planes)))]
        pool = by_plane[pl]
        i = int(rng.integers(0, len(pool)))
        j = int(rng.integers(0, len(pool) - 1))
        if j >= i:
            j += 1
        members.append(pool[i])
        members.append(pool[j])

    members = np.asarray(members, dtype=np.int64)
    offsets = np.array([dy * w + dx for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    nbr = members[:, None] + offsets[None, :]          # (M, 9) flat indices
    rays = pixel_rays(k).reshape(-1, 3)
    rays9 = rays[nbr]
    d9 = p.reshape(-1)[nbr]
    n_gt = gn.reshape(-1, 3)[members]
    n_fit, gd = _fit_normals_batch(rays9, d9, -n_gt)
    total = float(np.mean(1.0 - np.einsum("ma,ma->m", n_fit, n_gt)))
    grad_flat = np.zeros(p.size)
    np.add.at(grad_flat, nbr.reshape(-1), gd.reshape(-1) / len(members))
    return LossResult(total, grad_flat.reshape(p.shape))


DEFAULT_WEIGHTS = {"silog": 1.0, "patchnorm": 1.0, "vnl": 1.0, "pwn": 1.0}


@dataclass
class TotalLossResult:
    value: float
    grad: np.ndarray
    components: dict = field(default_factory=dict)


def total_loss(pred: np.ndarray, gt: DepthMap, k: CameraIntrinsics,
               gt_normals: np.ndarray, plane_id: np.ndarray,
               rng_patch: np.random.Generator,
               rng_triplet: np.random.Generator,
               rng_pair: np.random.Generator,
               weights: dict | None = None,
               metric_reliable: bool = True) -> TotalLossResult:
    """Weighted combination of all four losses.

    Frames whose absolute scale cannot be trusted set
    ``metric_reliable=False``, which drops the metric-anchored silog
    term for that frame; the normalized and geometric terms still
    apply. Unknown weight keys are rejected. A weight of zero skips the
    corresponding loss entirely (its sampler is still advanced by not
    being called, so per-loss generators stay independent).
    """
    w = dict(DEFAULT_WEIGHTS)
    if weights is not None:
        for key, val in weights.items():
            if key not in DEFAULT_WEIGHTS:
                raise DomainError(f"unknown loss weight {key!r}")
            if not (np.isfinite(val) and val >= 0):
                raise DomainError("loss weights must be finite and >= 0")
            w[key] = float(val)
    if not metric_reliable:
        w["silog"] = 0.0

    p, _ = _validate_pred(pred, gt)
    value = 0.0
    grad = np.zeros_like(p)
    comps = {}
    if w["silog"] > 0:
        r = silog(pred, gt)
        comps["silog"] = r.value
        value += w["silog"] * r.value
        grad += w["silog"] * r.grad
    else:
        comps["silog"] = 0.0
    if w["patchnorm"] > 0:
        r = patchnorm(pred, gt, rng_patch)
        comps["patchnorm"] = r.value
        value += w["patchnorm"] * r.value
        grad += w["patchnorm"] * r.grad
    else:
        comps["patchnorm"] = 0.0
    if w["vnl"] > 0:
        r = vnl(pred, gt, k, rng_triplet)
        comps["vnl"] = r.value
        value += w["vnl"] * r.value
        grad += w["vnl"] * r.grad
    else:
        comps["vnl"] = 0.0
    if w["pwn"] > 0:
        r = pwn(pred, gt, gt_normals, plane_id, k, rng_pair)
        comps["pwn"] = r.value
        value += w["pwn"] * r.value
        grad += w["pwn"] * r.grad
    else:
        comps["pwn"] = 0.0
    return TotalLossResult(value, grad, comps)


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst_index: tuple


def gradcheck(fn, x0: np.ndarray, eps: float = 1e-4, rel_tol: float = 1e-4,
              abs_floor: float = 1e-8, sample: int | None = None,
              rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare fn's analytic gradient against central differences.

    ``fn(x) -> (value, grad)`` must be deterministic in x: losses with
    internal sampling should rebuild their generator from a fixed seed
    on every call. Coordinates are perturbed one at a time by
    ``eps * max(1, |x_i|)``. When ``sample`` is given, only that many
    randomly chosen coordinates are checked (generator required).

    ``eps`` may be a sequence of step sizes. A coordinate whose error
    exceeds ``rel_tol`` is retried at the next step and keeps its best
    error. This separates genuinely wrong gradients (wrong at every
    step) from finite-step artifacts, which flip between too-large
    steps (crossing a ReLU or median kink) and too-small ones (roundoff
    amplified by 1/step).

    The relative error at a coordinate is
    |g_fd - g_an| / max(|g_fd|, |g_an|) when either magnitude exceeds
    ``abs_floor``; below the floor the coordinate passes if the
    absolute difference is under ``abs_floor``. Returns the worst
    coordinate; callers assert on ``max_rel_err``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _, grad = fn(x0)
    grad = np.asarray(grad)
    if grad.shape != x0.shape:
        raise DomainError("fn returned gradient of mismatched shape")
    steps = (eps,) if np.isscalar(eps) else tuple(eps)
    if not steps or any(e <= 0 for e in steps):
        raise DomainError("eps must be one or more positive step sizes")
    flat = np.arange(x0.size)
    if sample is not None and sample < x0.size:
        if rng is None:
            raise DomainError("sampled gradcheck needs a generator")
        flat = rng.choice(x0.size, size=sample, replace=False)
    worst = 0.0
    worst_idx = ()
    for i in flat:
        ii = np.unravel_index(i, x0.shape)
        g_an = grad[ii]
        err = math.inf
        for e in steps:
            step = e * max(1.0, abs(x0[ii]))
            xp = x0.copy()
            xp[ii] += step
            xm = x0.copy()
            xm[ii] -= step
            fp, _ = fn(xp)
            fm, _ = fn(xm)
            g_fd = (fp - fm) / (2.0 * step)
            mag = max(abs(g_fd), abs(g_an))
            if mag > abs_floor:
                this = abs(g_fd - g_an) / mag
            else:
                this = 0.0 if abs(g_fd - g_an) <= abs_floor else 1.0
            err = min(err, this)
            if err <= rel_tol:
                break
        if err > worst:
            worst = err
            worst_idx = ii
    return GradCheckReport(float(worst), len(flat), worst_idx)
