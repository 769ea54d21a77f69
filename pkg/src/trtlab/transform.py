"""Restricted transverse ray transform, its backprojections and normal operator.

For every source point gamma(t) and direction omega(theta1, theta2) the
transform returns m + 1 numbers

    T_i = int f(gamma(t) + s omega)(omega1^(m-i), omega2^i) ds ,  i = 0..m,

computed with trilinear interpolation of the field and the midpoint rule in s.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .geometry import Curve, frames_from_angles, frame_from_angles
from .symtensor import SymTensorField, dim_sym, weighted_patterns


class Mode(str, enum.Enum):
    EXACT = "ExactDiscrete"
    GEOMETRIC = "Geometric"


def _mode(mode):
    if isinstance(mode, Mode):
        return mode
    for m in Mode:
        if str(mode).lower() in (m.value.lower(), m.name.lower()):
            return m
    raise ValueError(f"unknown backprojection mode {mode!r}")


@dataclass
class AcquisitionGeometry:
    """Sampling of the line complex through the curve.

    Curve samples sit at midpoints of ``n_t`` equal parameter cells. The polar
    angle uses cell midpoints of (theta_min, pi - theta_min); the azimuth is
    periodic with ``theta2_b = 2 pi b / n2``.
    """
    curve: Curve
    n_t: int
    n1: int
    n2: int
    theta_min: float = 0.05
    ds: float = 0.01
    t_range: Optional[tuple] = None
    end_taper: float = 0.0  # fraction of the parameter range ramped in at each curve end

    def __post_init__(self):
        if min(self.n_t, self.n1, self.n2) <= 0:
            raise ValueError("sample counts must be positive")
        if not 0 < self.theta_min < math.pi / 2:
            raise ValueError("theta_min must lie in (0, pi/2)")
        if self.ds <= 0:
            raise ValueError("ds must be positive")
        if self.t_range is None:
            self.t_range = (self.curve.t_min, self.curve.t_max)
        self.t_range = (float(self.t_range[0]), float(self.t_range[1]))
        if not 0.0 <= self.end_taper < 0.5:
            raise ValueError("end_taper must lie in [0, 0.5)")

    def t_weight(self, t):
        """Smooth apodization of the curve ends used by Geometric backprojection."""
        t = np.asarray(t, dtype=np.float64)
        if self.end_taper == 0.0:
            return np.ones_like(t)
        L = self.t_range[1] - self.t_range[0]
        d = np.minimum(t - self.t_range[0], self.t_range[1] - t) / (self.end_taper * L)
        s = np.clip(d, 0.0, 1.0)
        return np.where(d <= 0, 0.0, 0.5 - 0.5 * np.cos(np.pi * s))

    @property
    def dt(self):
        return (self.t_range[1] - self.t_range[0]) / self.n_t

    @property
    def dth1(self):
        return (math.pi - 2 * self.theta_min) / self.n1

    @property
    def dth2(self):
        return 2 * math.pi / self.n2

    @property
    def th1_0(self):
        return self.theta_min + 0.5 * self.dth1

    def t_samples(self):
        return self.t_range[0] + (np.arange(self.n_t) + 0.5) * self.dt

    def theta1(self):
        return self.th1_0 + np.arange(self.n1) * self.dth1

    def theta2(self):
        return np.arange(self.n2) * self.dth2

    def directions(self):
        """Chart frames on the direction grid, each (n1, n2, 3)."""
        t1, t2 = np.meshgrid(self.theta1(), self.theta2(), indexing="ij")
        return frames_from_angles(t1, t2)

    def check_grid(self, f: SymTensorField):
        if self.ds > 0.5 * float(f.spacing.min()) + 1e-15:
            raise ValueError(f"ds = {self.ds} exceeds half the voxel spacing {f.spacing.min()}")

    def to_dict(self):
        return {"n_t": self.n_t, "n1": self.n1, "n2": self.n2, "theta_min": self.theta_min,
                "ds": self.ds, "t_range": list(self.t_range), "end_taper": self.end_taper}


@dataclass
class Sinogram:
    values: np.ndarray      # (m+1, n_t, n1, n2)
    geom: AcquisitionGeometry

    def __post_init__(self):
        g = self.geom
        if self.values.ndim != 4 or self.values.shape[1:] != (g.n_t, g.n1, g.n2):
            raise ValueError(f"sinogram shape {self.values.shape} does not match geometry "
                             f"(m+1, {g.n_t}, {g.n1}, {g.n2})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram values must be finite")

    @property
    def order(self):
        return self.values.shape[0] - 1

    def inner(self, other):
        return float(np.vdot(self.values, other.values))


class _Patterns:
    """Per-direction weighted patterns, cached for one geometry and order."""

    def __init__(self, geom, m):
        w, u, v = geom.directions()
        self.dirs = np.ascontiguousarray(w.reshape(-1, 3))
        self.pats = weighted_patterns(u.reshape(-1, 3), v.reshape(-1, 3), m)  # (L, m+1, N)


def trt_line(f: SymTensorField, p0, theta1, theta2, ds) -> np.ndarray:
    """Transform components along the line p0 + s omega(theta1, theta2)."""
    fr = frame_from_angles(theta1, theta2)
    li = kernels.line_integrals(f.data, f.origin, f.spacing, np.asarray(p0, float), fr.omega[None, :], ds)
    pat = weighted_patterns(fr.omega1, fr.omega2, f.order)
    return pat @ li[0]


def _forward_slab(f, geom, pat, p0):
    li = kernels.line_integrals(f.data, f.origin, f.spacing, p0, pat.dirs, geom.ds)
    return np.einsum("lj,lij->il", li, pat.pats).reshape(f.order + 1, geom.n1, geom.n2)


def forward(f: SymTensorField, geom: AcquisitionGeometry) -> Sinogram:
    geom.check_grid(f)
    pat = _Patterns(geom, f.order)
    out = np.empty((f.order + 1, geom.n_t, geom.n1, geom.n2))
    pts = geom.curve.point(geom.t_samples())
    for k in range(geom.n_t):
        out[:, k] = _forward_slab(f, geom, pat, pts[k])
    return Sinogram(out, geom)


def _backproject_slab(out, slab, geom, pat, p0, mode, gauge_xi, tw=1.0):
    if mode is Mode.EXACT:
        q = np.einsum("il,lij->lj", slab.reshape(slab.shape[0], -1), pat.pats)
        kernels.scatter_lines(out.data, out.origin, out.spacing, p0, pat.dirs, geom.ds, q)
        return 0
    return kernels.backproject_geometric(out.data, out.origin, out.spacing, p0, slab, geom.th1_0,
                                         geom.dth1, geom.dth2, geom.dt * tw, out.order, gauge_xi)


def backproject(g: Sinogram, geom: AcquisitionGeometry, like: SymTensorField, mode=Mode.EXACT,
                gauge_xi=None, return_skipped=False):
    """Backprojection onto the grid of ``like``.

    ``ExactDiscrete`` is the transpose of :func:`forward` for plain sums over
    array entries. ``Geometric`` integrates, for every voxel x and curve sample,
    the bilinearly interpolated datum at direction (x - gamma(t)) / |x - gamma(t)|
    with weight dt / |x - gamma(t)|^2 (times the optional end apodization). Both return coefficients paired with the
    stored components (dual coordinates). With ``gauge_xi`` set, Geometric mode
    first rotates every datum into the frame whose second vector is closest to
    ``gauge_xi``.
    """
    mode = _mode(mode)
    out = like.like()
    pat = _Patterns(geom, out.order) if mode is Mode.EXACT else None
    pts = geom.curve.point(geom.t_samples())
    tw = geom.t_weight(geom.t_samples())
    skipped = 0
    for k in range(geom.n_t):
        if mode is Mode.GEOMETRIC and tw[k] == 0.0:
            continue
        skipped += _backproject_slab(out, g.values[:, k], geom, pat, pts[k], mode, gauge_xi, tw[k])
    return (out, skipped) if return_skipped else out


def normal(f: SymTensorField, geom: AcquisitionGeometry, mode=Mode.EXACT, gauge_xi=None,
           return_skipped=False):
    """backproject(forward(f)) fused per curve sample (the sinogram is never stored)."""
    mode = _mode(mode)
    geom.check_grid(f)
    pat = _Patterns(geom, f.order)
    out = f.like()
    pts = geom.curve.point(geom.t_samples())
    tw = geom.t_weight(geom.t_samples())
    skipped = 0
    for k in range(geom.n_t):
        if mode is Mode.GEOMETRIC and tw[k] == 0.0:
            continue
        slab = _forward_slab(f, geom, pat, pts[k])
        skipped += _backproject_slab(out, slab, geom, pat, pts[k], mode, gauge_xi, tw[k])
    return (out, skipped) if return_skipped else out


def _lookup_cells(geom, w):
    """Bilinear cells and weights of directions w (P, 3) in the angle grid."""
    th1 = np.arccos(np.clip(w[:, 0], -1.0, 1.0))
    th2 = np.mod(np.arctan2(w[:, 2], w[:, 1]), 2 * math.pi)
    af = (th1 - geom.th1_0) / geom.dth1
    ok = (af >= 0) & (af <= geom.n1 - 1)
    a0 = np.minimum(af.astype(np.int64), max(geom.n1 - 2, 0))
    fa = af - a0
    a1 = np.minimum(a0 + 1, geom.n1 - 1)
    bf = th2 / geom.dth2
    bi = bf.astype(np.int64)
    fb = bf - bi
    b0, b1 = bi % geom.n2, (bi + 1) % geom.n2
    cells = np.stack([np.stack([a0, b0], -1), np.stack([a0, b1], -1),
                      np.stack([a1, b0], -1), np.stack([a1, b1], -1)], axis=1)   # (P, 4, 2)
    wts = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=1)
    return cells, wts, ok, th1, th2


def point_response(profile: np.ndarray, spacing, origin, geom: AcquisitionGeometry, x, m: int,
                   gauge_xi=None, t_chunk=1024):
    """Geometric normal operator at a single point for fields ``profile * e_J``.

    ``profile`` is a scalar grid. Returns the (N, N) matrix whose column J is the
    Geometric-mode normal operator (dual coordinates) of ``profile * e_J``
    evaluated at ``x``. Only the four grid lines around each looked-up direction
    are integrated, so the direction grid can be very fine.
    """
    from .kernels import rotation_matrices

    x = np.asarray(x, dtype=np.float64).reshape(3)
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    data = np.ascontiguousarray(profile, dtype=np.float64)[..., None]
    N = dim_sym(m)
    M = np.zeros((N, N))
    ts = geom.t_samples()
    if gauge_xi is not None:
        gxi = np.asarray(gauge_xi, dtype=np.float64)
        gxi = gxi / np.linalg.norm(gxi)
    for c0 in range(0, ts.size, t_chunk):
        p = geom.curve.point(ts[c0:c0 + t_chunk])
        d = x - p
        r2 = np.einsum("ij,ij->i", d, d)
        w = d / np.sqrt(r2)[:, None]
        cells, wts, ok, th1, th2 = _lookup_cells(geom, w)
        if not ok.any():
            continue
        p, r2, w, cells, wts, th1, th2 = p[ok], r2[ok], w[ok], cells[ok], wts[ok], th1[ok], th2[ok]
        P = p.shape[0]
        t1 = geom.th1_0 + cells[..., 0] * geom.dth1
        t2 = cells[..., 1] * geom.dth2
        cw, cu, cv = frames_from_angles(t1, t2)                          # (P, 4, 3)
        li = kernels.line_integrals(data, origin, spacing, np.repeat(p, 4, axis=0),
                                    cw.reshape(-1, 3), geom.ds).reshape(P, 4)
        cpat = weighted_patterns(cu, cv, m)                              # (P, 4, m+1, N)
        G = np.einsum("pc,pc,pcij->pij", wts, li, cpat)                  # data g_i per input J
        _, u, v = frames_from_angles(th1, th2)
        if gauge_xi is not None:
            dd = w @ gxi
            e = gxi - dd[:, None] * w
            en = np.linalg.norm(e, axis=1)
            good = en > 1e-12
            e = np.where(good[:, None], e / np.where(good, en, 1.0)[:, None], v)
            f1 = np.where(good[:, None], np.cross(e, w), u)
            R = rotation_matrices(m, np.einsum("ij,ij->i", f1, u), np.einsum("ij,ij->i", f1, v))
            G = np.einsum("pik,pkj->pij", R, G)
            u, v = f1, e
        pat = weighted_patterns(u, v, m)                                 # (P, m+1, N)
        tw = geom.t_weight(ts[c0:c0 + t_chunk])[ok]
        M += np.einsum("p,pik,pij->kj", geom.dt * tw / r2, pat, G)
    return M


def chord_length(p0, direction, center, radius):
    """Length of the intersection of a line with a ball (analytic oracle)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    q = np.asarray(p0, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    b = q @ d
    disc = b * b - (q @ q - radius * radius)
    return 2.0 * math.sqrt(disc) if disc > 0 else 0.0
