"""Pure-numpy implementations of the hot kernels.

Every function here has a numba twin in ``_numba.py`` with the same
signature and semantics. This module is the fallback path and the
reference for cross-backend agreement tests.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

T_MIN = 1e-9
EPS_DIR = 1e-12

KIND_PLANE = 0
KIND_BOX = 1
KIND_SPHERE = 2


def render_scene(width, height, fx, fy, u0, v0, cam_r, cam_t,
                 kinds, rots, trans, sizes, albedos, light, ambient):
    """Ray-cast a primitive scene.

    Rays go through integer pixel coordinates: direction
    ((u - u0)/fx, (v - v0)/fy, 1) in the camera frame, rotated to world
    by ``cam_r``. Depth is the ray parameter t, i.e. camera-frame z.

    Returns (depth, image, normals_cam, prim_id). Missed pixels carry
    depth 0, intensity 0 and prim_id -1.
    """
    with np.errstate(all="ignore"):
        return _render_scene_impl(width, height, fx, fy, u0, v0, cam_r,
                                  cam_t, kinds, rots, trans, sizes,
                                  albedos, light, ambient)


def _render_scene_impl(width, height, fx, fy, u0, v0, cam_r, cam_t,
                       kinds, rots, trans, sizes, albedos, light, ambient):
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    a = (u[None, :] - u0) / fx          # (1, W)
    b = (v[:, None] - v0) / fy          # (H, 1)
    a = np.broadcast_to(a, (height, width))
    b = np.broadcast_to(b, (height, width))

    # world-frame ray directions, components kept separate
    dx = cam_r[0, 0] * a + cam_r[0, 1] * b + cam_r[0, 2]
    dy = cam_r[1, 0] * a + cam_r[1, 1] * b + cam_r[1, 2]
    dz = cam_r[2, 0] * a + cam_r[2, 1] * b + cam_r[2, 2]
    ox, oy, oz = cam_t[0], cam_t[1], cam_t[2]

    best_t = np.full((height, width), np.inf)
    prim_id = np.full((height, width), -1, dtype=np.int32)
    nwx = np.zeros((height, width))
    nwy = np.zeros((height, width))
    nwz = np.zeros((height, width))

    for i in range(kinds.shape[0]):
        r = rots[i]
        p = trans[i]
        # ray in the primitive's local frame (R^T applied)
        lox = r[0, 0] * (ox - p[0]) + r[1, 0] * (oy - p[1]) + r[2, 0] * (oz - p[2])
        loy = r[0, 1] * (ox - p[0]) + r[1, 1] * (oy - p[1]) + r[2, 1] * (oz - p[2])
        loz = r[0, 2] * (ox - p[0]) + r[1, 2] * (oy - p[1]) + r[2, 2] * (oz - p[2])
        ldx = r[0, 0] * dx + r[1, 0] * dy + r[2, 0] * dz
        ldy = r[0, 1] * dx + r[1, 1] * dy + r[2, 1] * dz
        ldz = r[0, 2] * dx + r[1, 2] * dy + r[2, 2] * dz

        half = sizes[i] * 0.5
        if kinds[i] == KIND_PLANE:
            denom_ok = np.abs(ldz) >= EPS_DIR
            t = np.where(denom_ok, -loz / np.where(denom_ok, ldz, 1.0), np.inf)
            hx = lox + t * ldx
            hy = loy + t * ldy
            hit = denom_ok & (t > T_MIN) & (np.abs(hx) <= half) & (np.abs(hy) <= half)
            lnx = np.zeros_like(t)
            lny = np.zeros_like(t)
            lnz = np.ones_like(t)
        elif kinds[i] == KIND_BOX:
            tnear = np.full((height, width), -np.inf)
            tfar = np.full((height, width), np.inf)
            hit = np.ones((height, width), dtype=bool)
            near_ax = np.zeros((height, width), dtype=np.int64)
            for ax, (lo, ld) in enumerate(((lox, ldx), (loy, ldy), (loz, ldz))):
                par = np.abs(ld) < EPS_DIR
                ld_safe = np.where(par, 1.0, ld)
                t1 = (-half - lo) / ld_safe
                t2 = (half - lo) / ld_safe
                tlo = np.minimum(t1, t2)
                thi = np.maximum(t1, t2)
                tlo = np.where(par, -np.inf, tlo)
                thi = np.where(par, np.inf, thi)
                hit &= ~(par & (np.abs(lo) > half))
                upd = tlo > tnear
                near_ax = np.where(upd, ax, near_ax)
                tnear = np.maximum(tnear, tlo)
                tfar = np.minimum(tfar, thi)
            hit &= (tnear <= tfar) & (tfar > T_MIN)
            t = np.where(tnear > T_MIN, tnear, tfar)
            lds = np.stack((ldx, ldy, ldz))
            ld_near = np.take_along_axis(lds, near_ax[None], axis=0)[0]
            sign = np.where(ld_near > 0.0, -1.0, 1.0)
            lnx = np.where(near_ax == 0, sign, 0.0)
            lny = np.where(near_ax == 1, sign, 0.0)
            lnz = np.where(near_ax == 2, sign, 0.0)
        else:  # sphere
            qa = ldx * ldx + ldy * ldy + ldz * ldz
            qb = 2.0 * (lox * ldx + loy * ldy + loz * ldz)
            qc = lox * lox + loy * loy + loz * loz - half * half
            disc = qb * qb - 4.0 * qa * qc
            ok = disc >= 0.0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-qb - sq) / (2.0 * qa)
            t1 = (-qb + sq) / (2.0 * qa)
            t = np.where(t0 > T_MIN, t0, t1)
            hit = ok & (t > T_MIN)
            hlx = lox + t * ldx
            hly = loy + t * ldy
            hlz = loz + t * ldz
            inv = 1.0 / np.sqrt(hlx * hlx + hly * hly + hlz * hlz)
            lnx = hlx * inv
            lny = hly * inv
            lnz = hlz * inv

        closer = hit & (t < best_t)
        if not closer.any():
            continue
        wnx = r[0, 0] * lnx + r[0, 1] * lny + r[0, 2] * lnz
        wny = r[1, 0] * lnx + r[1, 1] * lny + r[1, 2] * lnz
        wnz = r[2, 0] * lnx + r[2, 1] * lny + r[2, 2] * lnz
        flip = np.where(wnx * dx + wny * dy + wnz * dz > 0.0, -1.0, 1.0)
        best_t = np.where(closer, t, best_t)
        prim_id = np.where(closer, np.int32(i), prim_id)
        nwx = np.where(closer, wnx * flip, nwx)
        nwy = np.where(closer, wny * flip, nwy)
        nwz = np.where(closer, wnz * flip, nwz)

    hit_any = prim_id >= 0
    depth = np.where(hit_any, best_t, 0.0)

    ndl = nwx * light[0] + nwy * light[1] + nwz * light[2]
    shade = ambient + (1.0 - ambient) * np.maximum(0.0, ndl)
    alb = np.zeros((height, width))
    for i in range(kinds.shape[0]):
        alb = np.where(prim_id == i, albedos[i], alb)
    image = np.where(hit_any, alb * shade, 0.0)

    # camera-frame normals (R^T n_world)
    ncx = cam_r[0, 0] * nwx + cam_r[1, 0] * nwy + cam_r[2, 0] * nwz
    ncy = cam_r[0, 1] * nwx + cam_r[1, 1] * nwy + cam_r[2, 1] * nwz
    ncz = cam_r[0, 2] * nwx + cam_r[1, 2] * nwy + cam_r[2, 2] * nwz
    normals = np.stack((ncx, ncy, ncz), axis=-1)
    normals[~hit_any] = 0.0
    return depth, image, normals, prim_id


def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H,W,kh,kw)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)
    return np.ascontiguousarray(col)


def conv2d_forward(x, w, b):
    """Same-padded stride-1 correlation. x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    col = _im2col(x, kh, kw)
    wmat = np.ascontiguousarray(w.reshape(f, -1).T)
    y = col @ wmat + b
    return y.reshape(n, h, wd, f).transpose(0, 3, 1, 2).copy()


def conv2d_backward_input(gy, w):
    f, c, kh, kw = w.shape
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zeros = np.zeros(c)
    return conv2d_forward(gy, wflip, zeros)


def conv2d_backward_params(gy, x, kh, kw):
    """Parameter gradients. gy (N,F,H,W), x (N,C,H,W) -> (gw, gb)."""
    n, c, h, wd = x.shape
    f = gy.shape[1]
    col = _im2col(x, kh, kw)
    gyc = np.ascontiguousarray(gy.transpose(0, 2, 3, 1).reshape(n * h * wd, f))
    gw = (gyc.T @ col).reshape(f, c, kh, kw)
    gb = gy.sum(axis=(0, 2, 3))
    return gw, gb


def brute_nn(query, ref):
    """Exact nearest neighbor by brute force.

    query (n,3), ref (m,3) -> (idx (n,), dist (n,)) with euclidean dist.
    """
    n = query.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    chunk = max(1, int(2_000_000 // max(1, ref.shape[0])))
    for s in range(0, n, chunk):
        q = query[s:s + chunk]
        d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        ii = d2.argmin(axis=1)
        idx[s:s + chunk] = ii
        dist[s:s + chunk] = np.sqrt(d2[np.arange(q.shape[0]), ii])
    return idx, dist


def _cell_key(c, nx, ny):
    return (c[:, 2] * ny + c[:, 1]) * nx + c[:, 0]


def build_grid(ref, cell):
    """Uniform spatial hash over ``ref``. Returns an opaque tuple."""
    mins = ref.min(axis=0)
    c = np.floor((ref - mins) / cell).astype(np.int64)
    nx = int(c[:, 0].max()) + 1
    ny = int(c[:, 1].max()) + 1
    nz = int(c[:, 2].max()) + 1
    keys = _cell_key(c, nx, ny)
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    uniq, starts = np.unique(skeys, return_index=True)
    counts = np.diff(np.append(starts, skeys.shape[0]))
    return (ref, np.ascontiguousarray(order), uniq, starts, counts,
            mins, float(cell), nx, ny, nz)


def grid_nn(query, grid):
    """Exact nearest neighbor using the spatial hash built by build_grid."""
    (ref, order, uniq, starts, counts, mins, cell, nx, ny, nz) = grid
    n = query.shape[0]
    out_i = np.empty(n, dtype=np.int64)
    out_d = np.empty(n, dtype=np.float64)
    for qi in range(n):
        q = query[qi]
        qc = np.floor((q - mins) / cell).astype(np.int64)
        max_shell = 0
        for ax, nax in ((0, nx), (1, ny), (2, nz)):
            max_shell = max(max_shell, abs(int(qc[ax])), abs(nax - 1 - int(qc[ax])))
        best_d2 = np.inf
        best_i = -1
        s = 0
        while True:
            cands = []
            x0, x1 = qc[0] - s, qc[0] + s
            y0, y1 = qc[1] - s, qc[1] + s
            z0, z1 = qc[2] - s, qc[2] + s
            for cz in range(max(z0, 0), min(z1, nz - 1) + 1):
                for cy in range(max(y0, 0), min(y1, ny - 1) + 1):
                    for cx in range(max(x0, 0), min(x1, nx - 1) + 1):
                        if s > 0 and (abs(cx - qc[0]) != s and abs(cy - qc[1]) != s
                                      and abs(cz - qc[2]) != s):
                            continue
                        key = (cz * ny + cy) * nx + cx
                        j = np.searchsorted(uniq, key)
                        if j < uniq.shape[0] and uniq[j] == key:
                            st = starts[j]
                            cands.append(order[st:st + counts[j]])
            if cands:
                cand = np.concatenate(cands)
                d2 = ((ref[cand] - q) ** 2).sum(axis=1)
                k = d2.argmin()
                if d2[k] < best_d2:
                    best_d2 = d2[k]
                    best_i = cand[k]
            # shells beyond s cannot contain anything closer than s*cell
            if best_i >= 0 and best_d2 <= (s * cell) ** 2:
                break
            s += 1
            if s > max_shell + 1:
                break
        out_i[qi] = best_i
        out_d[qi] = np.sqrt(best_d2)
    return out_i, out_d
