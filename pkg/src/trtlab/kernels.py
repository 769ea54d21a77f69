"""Hot loops of the transform: line integrals, their transpose, and the
geometric (cone-beam style) backprojection.

Every kernel has a numba implementation and a pure-numpy implementation with
identical arithmetic up to summation order. The public wrappers dispatch on
:func:`trtlab._accel.get_backend`.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit
from .symtensor import dim_sym, pattern_table, weighted_patterns

_TWO_PI = 2.0 * math.pi


def _box(data_shape, origin, spacing):
    # support of the trilinear interpolant: one voxel beyond the outer centers
    n = np.asarray(data_shape[:3], dtype=np.float64)
    lo = origin - spacing
    hi = origin + n * spacing
    return lo, hi


# --------------------------------------------------------------------------- numba

@njit(cache=True)
def _clip_line_nb(p, d, lo, hi):
    s0 = -np.inf
    s1 = np.inf
    for k in range(3):
        if abs(d[k]) < 1e-300:
            if p[k] <= lo[k] or p[k] >= hi[k]:
                return 1.0, 0.0
            continue
        a = (lo[k] - p[k]) / d[k]
        b = (hi[k] - p[k]) / d[k]
        if a > b:
            a, b = b, a
        if a > s0:
            s0 = a
        if b < s1:
            s1 = b
    return s0, s1


@njit(cache=True)
def _line_integrals_nb(data, origin, spacing, lo, hi, p0, dirs, ds, out):
    nx, ny, nz, N = data.shape
    L = dirs.shape[0]
    acc = np.zeros(N)
    for l in range(L):
        for j in range(N):
            acc[j] = 0.0
        s0, s1 = _clip_line_nb(p0[l], dirs[l], lo, hi)
        if s0 < s1:
            k0 = int(math.ceil(s0 / ds - 0.5))
            k1 = int(math.floor(s1 / ds - 0.5))
            for k in range(k0, k1 + 1):
                s = (k + 0.5) * ds
                ux = (p0[l, 0] + s * dirs[l, 0] - origin[0]) / spacing[0]
                uy = (p0[l, 1] + s * dirs[l, 1] - origin[1]) / spacing[1]
                uz = (p0[l, 2] + s * dirs[l, 2] - origin[2]) / spacing[2]
                ix = int(math.floor(ux))
                iy = int(math.floor(uy))
                iz = int(math.floor(uz))
                fx = ux - ix
                fy = uy - iy
                fz = uz - iz
                for cx in range(2):
                    jx = ix + cx
                    if jx < 0 or jx >= nx:
                        continue
                    wx = fx if cx else 1.0 - fx
                    for cy in range(2):
                        jy = iy + cy
                        if jy < 0 or jy >= ny:
                            continue
                        wy = fy if cy else 1.0 - fy
                        for cz in range(2):
                            jz = iz + cz
                            if jz < 0 or jz >= nz:
                                continue
                            w = wx * wy * (fz if cz else 1.0 - fz)
                            for j in range(N):
                                acc[j] += w * data[jx, jy, jz, j]
        for j in range(N):
            out[l, j] = ds * acc[j]


@njit(cache=True)
def _scatter_lines_nb(out, origin, spacing, lo, hi, p0, dirs, ds, q):
    nx, ny, nz, N = out.shape
    L = dirs.shape[0]
    for l in range(L):
        nonzero = False
        for j in range(N):
            if q[l, j] != 0.0:
                nonzero = True
        if not nonzero:
            continue
        s0, s1 = _clip_line_nb(p0[l], dirs[l], lo, hi)
        if s0 >= s1:
            continue
        k0 = int(math.ceil(s0 / ds - 0.5))
        k1 = int(math.floor(s1 / ds - 0.5))
        for k in range(k0, k1 + 1):
            s = (k + 0.5) * ds
            ux = (p0[l, 0] + s * dirs[l, 0] - origin[0]) / spacing[0]
            uy = (p0[l, 1] + s * dirs[l, 1] - origin[1]) / spacing[1]
            uz = (p0[l, 2] + s * dirs[l, 2] - origin[2]) / spacing[2]
            ix = int(math.floor(ux))
            iy = int(math.floor(uy))
            iz = int(math.floor(uz))
            fx = ux - ix
            fy = uy - iy
            fz = uz - iz
            for cx in range(2):
                jx = ix + cx
                if jx < 0 or jx >= nx:
                    continue
                wx = fx if cx else 1.0 - fx
                for cy in range(2):
                    jy = iy + cy
                    if jy < 0 or jy >= ny:
                        continue
                    wy = fy if cy else 1.0 - fy
                    for cz in range(2):
                        jz = iz + cz
                        if jz < 0 or jz >= nz:
                            continue
                        w = ds * wx * wy * (fz if cz else 1.0 - fz)
                        for j in range(N):
                            out[jx, jy, jz, j] += w * q[l, j]


@njit(cache=True)
def _patterns_nb(u, v, m, alpha, beta, gamma, coef, start, upow, vpow, pat):
    for k in range(3):
        upow[k, 0] = 1.0
        vpow[k, 0] = 1.0
        for e in range(1, m + 1):
            upow[k, e] = upow[k, e - 1] * u[k]
            vpow[k, e] = vpow[k, e - 1] * v[k]
    pat[:, :] = 0.0
    for i in range(m + 1):
        for e in range(start[i], start[i + 1]):
            val = coef[e]
            for k in range(3):
                val *= upow[k, beta[e, k]] * vpow[k, gamma[e, k]]
            pat[i, alpha[e]] += val


@njit(cache=True)
def _rotation_nb(m, c, s, R, poly, tmp):
    # row i: coefficients of (c X + s Y)^(m-i) (-s X + c Y)^i in the basis X^(m-j) Y^j
    for i in range(m + 1):
        poly[:] = 0.0
        poly[0] = 1.0
        deg = 0
        for f in range(m):
            if f < m - i:
                a, b = c, s
            else:
                a, b = -s, c
            tmp[:] = 0.0
            for j in range(deg + 1):
                tmp[j] += a * poly[j]
                tmp[j + 1] += b * poly[j]
            deg += 1
            poly[:] = tmp[:]
        for j in range(m + 1):
            R[i, j] = poly[j]


@njit(cache=True)
def _backproject_geometric_nb(out, origin, spacing, p0, slab, th1_0, dth1, dth2, weight, m,
                              alpha, beta, gamma, coef, start, use_gauge, gxi):
    nx, ny, nz, N = out.shape
    n1 = slab.shape[1]
    n2 = slab.shape[2]
    M1 = m + 1
    g = np.empty(M1)
    g2 = np.empty(M1)
    pat = np.empty((M1, N))
    upow = np.empty((3, m + 1))
    vpow = np.empty((3, m + 1))
    R = np.empty((M1, M1))
    poly = np.empty(M1 + 1)
    tmp = np.empty(M1 + 1)
    u = np.empty(3)
    v = np.empty(3)
    skipped = 0
    for ix in range(nx):
        x0 = origin[0] + ix * spacing[0] - p0[0]
        for iy in range(ny):
            x1 = origin[1] + iy * spacing[1] - p0[1]
            for iz in range(nz):
                x2 = origin[2] + iz * spacing[2] - p0[2]
                r2 = x0 * x0 + x1 * x1 + x2 * x2
                if r2 == 0.0:
                    skipped += 1
                    continue
                r = math.sqrt(r2)
                w0 = x0 / r
                w1 = x1 / r
                w2 = x2 / r
                th1 = math.acos(min(1.0, max(-1.0, w0)))
                th2 = math.atan2(w2, w1)
                if th2 < 0.0:
                    th2 += _TWO_PI
                af = (th1 - th1_0) / dth1
                if af < 0.0 or af > n1 - 1:
                    skipped += 1
                    continue
                a0 = int(af)
                if a0 > n1 - 2:
                    a0 = max(n1 - 2, 0)
                fa = af - a0
                a1 = min(a0 + 1, n1 - 1)
                bf = th2 / dth2
                bi = int(bf)
                fb = bf - bi
                b0 = bi % n2
                b1 = (bi + 1) % n2
                for i in range(M1):
                    g[i] = ((1.0 - fa) * ((1.0 - fb) * slab[i, a0, b0] + fb * slab[i, a0, b1])
                            + fa * ((1.0 - fb) * slab[i, a1, b0] + fb * slab[i, a1, b1]))
                s1 = math.sin(th1)
                c1 = math.cos(th1)
                s2 = math.sin(th2)
                c2 = math.cos(th2)
                u[0] = -s1
                u[1] = c1 * c2
                u[2] = c1 * s2
                v[0] = 0.0
                v[1] = -s2
                v[2] = c2
                if use_gauge:
                    d = gxi[0] * w0 + gxi[1] * w1 + gxi[2] * w2
                    e0 = gxi[0] - d * w0
                    e1 = gxi[1] - d * w1
                    e2 = gxi[2] - d * w2
                    en = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
                    if en > 1e-12:
                        e0 /= en
                        e1 /= en
                        e2 /= en
                        # omega1' = omega2' x omega
                        f0 = e1 * w2 - e2 * w1
                        f1 = e2 * w0 - e0 * w2
                        f2 = e0 * w1 - e1 * w0
                        cr = f0 * u[0] + f1 * u[1] + f2 * u[2]
                        sr = f0 * v[0] + f1 * v[1] + f2 * v[2]
                        _rotation_nb(m, cr, sr, R, poly, tmp)
                        for i in range(M1):
                            acc = 0.0
                            for j in range(M1):
                                acc += R[i, j] * g[j]
                            g2[i] = acc
                        for i in range(M1):
                            g[i] = g2[i]
                        u[0] = f0
                        u[1] = f1
                        u[2] = f2
                        v[0] = e0
                        v[1] = e1
                        v[2] = e2
                _patterns_nb(u, v, m, alpha, beta, gamma, coef, start, upow, vpow, pat)
                sc = weight / r2
                for j in range(N):
                    acc = 0.0
                    for i in range(M1):
                        acc += g[i] * pat[i, j]
                    out[ix, iy, iz, j] += sc * acc
    return skipped


# --------------------------------------------------------------------------- numpy

def _clip_lines_np(p0, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - p0) / dirs
        b = (hi - p0) / dirs
    tiny = np.abs(dirs) < 1e-300
    inside = (p0 > lo) & (p0 < hi)
    a = np.where(tiny, np.where(inside, -np.inf, np.inf), a)
    b = np.where(tiny, np.where(inside, np.inf, -np.inf), b)
    s0 = np.minimum(a, b).max(axis=1)
    s1 = np.maximum(a, b).min(axis=1)
    return s0, s1


def _sample_lines_np(p0, dirs, lo, hi, ds, chunk=200_000):
    """Yield (line index, sample points, ds) blocks of midpoint samples."""
    s0, s1 = _clip_lines_np(p0, dirs, lo, hi)
    valid = s0 < s1
    k0 = np.where(valid, np.ceil(s0 / ds - 0.5), 0).astype(np.int64)
    k1 = np.where(valid, np.floor(s1 / ds - 0.5), -1).astype(np.int64)
    cnt = np.maximum(k1 - k0 + 1, 0)
    lines = np.nonzero(cnt)[0]
    if lines.size == 0:
        return
    per = max(1, chunk // max(int(cnt.max()), 1))
    for c0 in range(0, lines.size, per):
        sel = lines[c0:c0 + per]
        kk = np.arange(int(cnt[sel].max()))
        mask = kk[None, :] < cnt[sel, None]
        li = np.broadcast_to(sel[:, None], mask.shape)[mask]
        s = (k0[sel, None] + kk[None, :] + 0.5)[mask] * ds
        pts = p0[li] + s[:, None] * dirs[li]
        yield li, pts


def _trilinear_weights_np(pts, origin, spacing, shape):
    u = (pts - origin) / spacing
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    idx, wts = [], []
    n = np.asarray(shape[:3])
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                c = np.array([cx, cy, cz])
                j = i0 + c
                w = np.prod(np.where(c.astype(bool), f, 1.0 - f), axis=1)
                ok = np.all((j >= 0) & (j < n), axis=1)
                flat = np.where(ok, np.ravel_multi_index(tuple(np.clip(j, 0, n - 1).T), tuple(n)), 0)
                idx.append(flat)
                wts.append(np.where(ok, w, 0.0))
    return np.stack(idx, 1), np.stack(wts, 1)


def _line_integrals_np(data, origin, spacing, lo, hi, p0, dirs, ds):
    N = data.shape[3]
    flat = data.reshape(-1, N)
    out = np.zeros((dirs.shape[0], N))
    for li, pts in _sample_lines_np(p0, dirs, lo, hi, ds):
        idx, w = _trilinear_weights_np(pts, origin, spacing, data.shape)
        vals = np.einsum("sc,scj->sj", w, flat[idx])
        np.add.at(out, li, vals)
    return out * ds


def _scatter_lines_np(out, origin, spacing, lo, hi, p0, dirs, ds, q):
    N = out.shape[3]
    flat = out.reshape(-1, N)
    for li, pts in _sample_lines_np(p0, dirs, lo, hi, ds):
        idx, w = _trilinear_weights_np(pts, origin, spacing, out.shape)
        contrib = ds * w[:, :, None] * q[li][:, None, :]
        np.add.at(flat, idx.ravel(), contrib.reshape(-1, N))


def rotation_matrices(m, c, s):
    """Binary-form rotation matrices, shape c.shape + (m+1, m+1).

    Row i holds the coefficients of (c X + s Y)^(m-i) (-s X + c Y)^i in the basis
    X^(m-j) Y^j. If (u', v') = (c u + s v, -s u + c v), the transverse components
    of a tensor in the rotated frame are ``R @ components_in_(u, v)``.
    """
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    R = np.zeros(c.shape + (m + 1, m + 1))
    for i in range(m + 1):
        poly = np.zeros(c.shape + (m + 1,))
        poly[..., 0] = 1.0
        for f in range(m):
            a, b = (c, s) if f < m - i else (-s, c)
            new = a[..., None] * poly
            new[..., 1:] += b[..., None] * poly[..., :-1]
            poly = new
        R[..., i, :] = poly
    return R


def _backproject_geometric_np(out, origin, spacing, p0, slab, th1_0, dth1, dth2, weight, m,
                              use_gauge, gxi):
    nx, ny, nz, N = out.shape
    n1, n2 = slab.shape[1], slab.shape[2]
    axes = [origin[k] + spacing[k] * np.arange(out.shape[k]) - p0[k] for k in range(3)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    r2 = np.einsum("ij,ij->i", X, X)
    good = r2 > 0
    r = np.sqrt(np.where(good, r2, 1.0))
    w = X / r[:, None]
    th1 = np.arccos(np.clip(w[:, 0], -1.0, 1.0))
    th2 = np.arctan2(w[:, 2], w[:, 1])
    th2 = np.where(th2 < 0, th2 + _TWO_PI, th2)
    af = (th1 - th1_0) / dth1
    good &= (af >= 0) & (af <= n1 - 1)
    skipped = int((~good).sum())
    sel = np.nonzero(good)[0]
    af, th1, th2, w, r2s = af[sel], th1[sel], th2[sel], w[sel], r2[sel]
    a0 = np.minimum(af.astype(np.int64), max(n1 - 2, 0))
    fa = af - a0
    a1 = np.minimum(a0 + 1, n1 - 1)
    bf = th2 / dth2
    bi = bf.astype(np.int64)
    fb = bf - bi
    b0 = bi % n2
    b1 = (bi + 1) % n2
    g = ((1 - fa) * ((1 - fb) * slab[:, a0, b0] + fb * slab[:, a0, b1])
         + fa * ((1 - fb) * slab[:, a1, b0] + fb * slab[:, a1, b1])).T  # (V, m+1)
    s1, c1, s2, c2 = np.sin(th1), np.cos(th1), np.sin(th2), np.cos(th2)
    u = np.stack([-s1, c1 * c2, c1 * s2], axis=-1)
    v = np.stack([np.zeros_like(s2), -s2, c2], axis=-1)
    if use_gauge:
        d = w @ gxi
        e = gxi[None, :] - d[:, None] * w
        en = np.linalg.norm(e, axis=1)
        ok = en > 1e-12
        e = np.where(ok[:, None], e / np.where(ok, en, 1.0)[:, None], v)
        f = np.cross(e, w)
        f = np.where(ok[:, None], f, u)
        cr = np.einsum("ij,ij->i", f, u)
        sr = np.einsum("ij,ij->i", f, v)
        R = rotation_matrices(m, cr, sr)
        g = np.einsum("vij,vj->vi", R, g)
        u, v = f, e
    pat = weighted_patterns(u, v, m)
    contrib = (weight / r2s)[:, None] * np.einsum("vi,vij->vj", g, pat)
    flat = out.reshape(-1, N)
    flat[sel] += contrib
    return skipped


# --------------------------------------------------------------------------- dispatch

def line_integrals(data, origin, spacing, p0, dirs, ds):
    """Midpoint-rule integrals of every field component along L lines.

    Lines are ``p0[l] + s * dirs[l]`` with samples at ``s = (k + 1/2) ds``.
    Returns an (L, N) array.
    """
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    p0 = np.ascontiguousarray(np.broadcast_to(p0, dirs.shape), dtype=np.float64)
    lo, hi = _box(data.shape, origin, spacing)
    if _accel.use_numba():
        out = np.empty((dirs.shape[0], data.shape[3]))
        _line_integrals_nb(data, origin, spacing, lo, hi, p0, dirs, float(ds), out)
        return out
    return _line_integrals_np(data, origin, spacing, lo, hi, p0, dirs, float(ds))


def scatter_lines(out, origin, spacing, p0, dirs, ds, q):
    """Exact transpose of :func:`line_integrals`: out += L^T q (in place)."""
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    p0 = np.ascontiguousarray(np.broadcast_to(p0, dirs.shape), dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    lo, hi = _box(out.shape, origin, spacing)
    if _accel.use_numba():
        _scatter_lines_nb(out, origin, spacing, lo, hi, p0, dirs, float(ds), q)
    else:
        _scatter_lines_np(out, origin, spacing, lo, hi, p0, dirs, float(ds), q)


def backproject_geometric(out, origin, spacing, p0, slab, th1_0, dth1, dth2, weight, m, gauge_xi=None):
    """Add one curve sample's contribution to the geometric backprojection.

    ``slab`` holds the sinogram at this curve sample, shape (m+1, n1, n2).
    Returns the number of voxels whose direction fell outside the chart.
    """
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64).reshape(3)
    slab = np.ascontiguousarray(slab, dtype=np.float64)
    use_gauge = gauge_xi is not None
    gxi = np.zeros(3) if gauge_xi is None else np.asarray(gauge_xi, dtype=np.float64).reshape(3)
    if use_gauge:
        gxi = gxi / np.linalg.norm(gxi)
    if _accel.use_numba():
        alpha, beta, gamma, coef, start = pattern_table(m)
        return int(_backproject_geometric_nb(out, origin, spacing, p0, slab, float(th1_0), float(dth1),
                                             float(dth2), float(weight), m, alpha, beta, gamma, coef, start,
                                             use_gauge, gxi))
    return _backproject_geometric_np(out, origin, spacing, p0, slab, th1_0, dth1, dth2, weight, m,
                                     use_gauge, gxi)


__all__ = ["line_integrals", "scatter_lines", "backproject_geometric", "rotation_matrices", "dim_sym"]
