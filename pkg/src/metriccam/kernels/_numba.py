"""Numba twins of the hot kernels in ``_numpy.py``.

Same signatures and, for the renderer, the same per-pixel arithmetic so
that the two backends agree to floating-point noise. Kernels are
single-threaded on purpose: equal-seed runs must be bit-identical.
"""

import math

import numpy as np
import numba as nb

from ._numpy import build_grid  # grid construction is shared

T_MIN = 1e-9
EPS_DIR = 1e-12


@nb.njit(cache=True)
def _render_impl(width, height, fx, fy, u0, v0, cam_r, cam_t,
                 kinds, rots, trans, sizes, albedos, light, ambient):
    depth = np.zeros((height, width))
    image = np.zeros((height, width))
    normals = np.zeros((height, width, 3))
    prim_id = np.full((height, width), -1, dtype=np.int32)

    ox, oy, oz = cam_t[0], cam_t[1], cam_t[2]
    nprim = kinds.shape[0]

    for py in range(height):
        b = (py - v0) / fy
        for px in range(width):
            a = (px - u0) / fx
            dx = cam_r[0, 0] * a + cam_r[0, 1] * b + cam_r[0, 2]
            dy = cam_r[1, 0] * a + cam_r[1, 1] * b + cam_r[1, 2]
            dz = cam_r[2, 0] * a + cam_r[2, 1] * b + cam_r[2, 2]

            best_t = np.inf
            best_i = -1
            bnx = 0.0
            bny = 0.0
            bnz = 0.0
            for i in range(nprim):
                r = rots[i]
                p = trans[i]
                lox = r[0, 0] * (ox - p[0]) + r[1, 0] * (oy - p[1]) + r[2, 0] * (oz - p[2])
                loy = r[0, 1] * (ox - p[0]) + r[1, 1] * (oy - p[1]) + r[2, 1] * (oz - p[2])
                loz = r[0, 2] * (ox - p[0]) + r[1, 2] * (oy - p[1]) + r[2, 2] * (oz - p[2])
                ldx = r[0, 0] * dx + r[1, 0] * dy + r[2, 0] * dz
                ldy = r[0, 1] * dx + r[1, 1] * dy + r[2, 1] * dz
                ldz = r[0, 2] * dx + r[1, 2] * dy + r[2, 2] * dz

                half = sizes[i] * 0.5
                t = np.inf
                lnx = 0.0
                lny = 0.0
                lnz = 1.0
                hit = False
                if kinds[i] == 0:  # plane
                    if abs(ldz) >= EPS_DIR:
                        tc = -loz / ldz
                        if tc > T_MIN:
                            hx = lox + tc * ldx
                            hy = loy + tc * ldy
                            if abs(hx) <= half and abs(hy) <= half:
                                hit = True
                                t = tc
                elif kinds[i] == 1:  # box (slab test)
                    tnear = -np.inf
                    tfar = np.inf
                    near_ax = 0
                    near_sign = 1.0
                    ok = True
                    for ax in range(3):
                        if ax == 0:
                            lo, ld = lox, ldx
                        elif ax == 1:
                            lo, ld = loy, ldy
                        else:
                            lo, ld = loz, ldz
                        if abs(ld) < EPS_DIR:
                            if abs(lo) > half:
                                ok = False
                                break
                        else:
                            t1 = (-half - lo) / ld
                            t2 = (half - lo) / ld
                            if t1 < t2:
                                tlo, thi = t1, t2
                            else:
                                tlo, thi = t2, t1
                            if tlo > tnear:
                                tnear = tlo
                                near_ax = ax
                                near_sign = -1.0 if ld > 0.0 else 1.0
                            if thi < tfar:
                                tfar = thi
                    if ok and tnear <= tfar and tfar > T_MIN:
                        tc = tnear if tnear > T_MIN else tfar
                        hit = True
                        t = tc
                        lnx = near_sign if near_ax == 0 else 0.0
                        lny = near_sign if near_ax == 1 else 0.0
                        lnz = near_sign if near_ax == 2 else 0.0
                else:  # sphere
                    qa = ldx * ldx + ldy * ldy + ldz * ldz
                    qb = 2.0 * (lox * ldx + loy * ldy + loz * ldz)
                    qc = lox * lox + loy * loy + loz * loz - half * half
                    disc = qb * qb - 4.0 * qa * qc
                    if disc >= 0.0:
                        sq = math.sqrt(disc)
                        t0 = (-qb - sq) / (2.0 * qa)
                        t1 = (-qb + sq) / (2.0 * qa)
                        tc = t0 if t0 > T_MIN else t1
                        if tc > T_MIN:
                            hit = True
                            t = tc
                            hlx = lox + t * ldx
                            hly = loy + t * ldy
                            hlz = loz + t * ldz
                            inv = 1.0 / math.sqrt(hlx * hlx + hly * hly + hlz * hlz)
                            lnx = hlx * inv
                            lny = hly * inv
                            lnz = hlz * inv

                if hit and t < best_t:
                    wnx = r[0, 0] * lnx + r[0, 1] * lny + r[0, 2] * lnz
                    wny = r[1, 0] * lnx + r[1, 1] * lny + r[1, 2] * lnz
                    wnz = r[2, 0] * lnx + r[2, 1] * lny + r[2, 2] * lnz
                    if wnx * dx + wny * dy + wnz * dz > 0.0:
                        wnx = -wnx
                        wny = -wny
                        wnz = -wnz
                    best_t = t
                    best_i = i
                    bnx = wnx
                    bny = wny
                    bnz = wnz

            if best_i >= 0:
                depth[py, px] = best_t
                prim_id[py, px] = best_i
                ndl = bnx * light[0] + bny * light[1] + bnz * light[2]
                shade = ambient + (1.0 - ambient) * max(0.0, ndl)
                image[py, px] = albedos[best_i] * shade
                normals[py, px, 0] = cam_r[0, 0] * bnx + cam_r[1, 0] * bny + cam_r[2, 0] * bnz
                normals[py, px, 1] = cam_r[0, 1] * bnx + cam_r[1, 1] * bny + cam_r[2, 1] * bnz
                normals[py, px, 2] = cam_r[0, 2] * bnx + cam_r[1, 2] * bny + cam_r[2, 2] * bnz
    return depth, image, normals, prim_id


def render_scene(width, height, fx, fy, u0, v0, cam_r, cam_t,
                 kinds, rots, trans, sizes, albedos, light, ambient):
    return _render_impl(int(width), int(height), float(fx), float(fy),
                        float(u0), float(v0), cam_r, cam_t,
                        kinds, rots, trans, sizes, albedos, light,
                        float(ambient))


@nb.njit(cache=True)
def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    ph = kh // 2
    pw = kw // 2
    col = np.zeros((n * h * w, c * kh * kw))
    row = 0
    for ni in range(n):
        for yy in range(h):
            for xx in range(w):
                base = 0
                for ci in range(c):
                    for ky in range(kh):
                        sy = yy + ky - ph
                        for kx in range(kw):
                            sx = xx + kx - pw
                            if 0 <= sy < h and 0 <= sx < w:
                                col[row, base] = x[ni, ci, sy, sx]
                            base += 1
                row += 1
    return col


@nb.njit(cache=True)
def conv2d_forward(x, w, b):
    n, c, h, wd = x.shape
    f = w.shape[0]
    kh = w.shape[2]
    kw = w.shape[3]
    col = _im2col(x, kh, kw)
    wmat = np.ascontiguousarray(w.reshape(f, c * kh * kw).T)
    y2 = np.dot(col, wmat)
    out = np.empty((n, f, h, wd))
    row = 0
    for ni in range(n):
        for yy in range(h):
            for xx in range(wd):
                for fi in range(f):
                    out[ni, fi, yy, xx] = y2[row, fi] + b[fi]
                row += 1
    return out


@nb.njit(cache=True)
def conv2d_backward_input(gy, w):
    f, c, kh, kw = w.shape
    wflip = np.empty((c, f, kh, kw))
    for fi in range(f):
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    wflip[ci, fi, ky, kx] = w[fi, ci, kh - 1 - ky, kw - 1 - kx]
    zeros = np.zeros(c)
    return conv2d_forward(gy, wflip, zeros)


@nb.njit(cache=True)
def conv2d_backward_params(gy, x, kh, kw):
    n, c, h, wd = x.shape
    f = gy.shape[1]
    col = _im2col(x, kh, kw)
    gyc = np.empty((n * h * wd, f))
    row = 0
    for ni in range(n):
        for yy in range(h):
            for xx in range(wd):
                for fi in range(f):
                    gyc[row, fi] = gy[ni, fi, yy, xx]
                row += 1
    gw2 = np.dot(np.ascontiguousarray(gyc.T), col)
    gw = gw2.reshape(f, c, kh, kw)
    gb = np.zeros(f)
    for ni in range(n):
        for fi in range(f):
            for yy in range(h):
                for xx in range(wd):
                    gb[fi] += gy[ni, fi, yy, xx]
    return gw, gb


@nb.njit(cache=True)
def brute_nn(query, ref):
    n = query.shape[0]
    m = ref.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for i in range(n):
        qx, qy, qz = query[i, 0], query[i, 1], query[i, 2]
        best = np.inf
        bj = -1
        for j in range(m):
            ddx = qx - ref[j, 0]
            ddy = qy - ref[j, 1]
            ddz = qz - ref[j, 2]
            d2 = ddx * ddx + ddy * ddy + ddz * ddz
            if d2 < best:
                best = d2
                bj = j
        idx[i] = bj
        dist[i] = math.sqrt(best)
    return idx, dist


@nb.njit(cache=True)
def _grid_nn_impl(query, ref, order, uniq, starts, counts, mins, cell,
                  nx, ny, nz):
    n = query.shape[0]
    out_i = np.empty(n, dtype=np.int64)
    out_d = np.empty(n, dtype=np.float64)
    for qi in range(n):
        qx, qy, qz = query[qi, 0], query[qi, 1], query[qi, 2]
        qcx = int(math.floor((qx - mins[0]) / cell))
        qcy = int(math.floor((qy - mins[1]) / cell))
        qcz = int(math.floor((qz - mins[2]) / cell))
        max_shell = max(abs(qcx), abs(nx - 1 - qcx), abs(qcy),
                        abs(ny - 1 - qcy), abs(qcz), abs(nz - 1 - qcz))
        best_d2 = np.inf
        best_i = -1
        s = 0
        while True:
            for cz in range(max(qcz - s, 0), min(qcz + s, nz - 1) + 1):
                for cy in range(max(qcy - s, 0), min(qcy + s, ny - 1) + 1):
                    for cx in range(max(qcx - s, 0), min(qcx + s, nx - 1) + 1):
                        if s > 0 and (abs(cx - qcx) != s and abs(cy - qcy) != s
                                      and abs(cz - qcz) != s):
                            continue
                        key = (cz * ny + cy) * nx + cx
                        j = np.searchsorted(uniq, key)
                        if j < uniq.shape[0] and uniq[j] == key:
                            st = starts[j]
                            for t in range(st, st + counts[j]):
                                ri = order[t]
                                ddx = qx - ref[ri, 0]
                                ddy = qy - ref[ri, 1]
                                ddz = qz - ref[ri, 2]
                                d2 = ddx * ddx + ddy * ddy + ddz * ddz
                                if d2 < best_d2:
                                    best_d2 = d2
                                    best_i = ri
            if best_i >= 0 and best_d2 <= (s * cell) * (s * cell):
                break
            s += 1
            if s > max_shell + 1:
                break
        out_i[qi] = best_i
        out_d[qi] = math.sqrt(best_d2)
    return out_i, out_d


def grid_nn(query, grid):
    (ref, order, uniq, starts, counts, mins, cell, nx, ny, nz) = grid
    return _grid_nn_impl(query, ref, order, uniq, starts, counts, mins,
                         cell, nx, ny, nz)
