"""Source curves, direction frames and plane-curve intersections."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

# Default tolerances (configurable per call).
TAU_TANGENT = 1e-6      # on the unit-normalized product gamma'.xi
TAU_CURVATURE = 1e-8    # on gamma''.xi_hat
SAMPLES_PER_UNIT = 2048
BISECTION_STEPS = 60
_MAX_BATCH_ELEMS = 4_000_000


class Kind(enum.IntEnum):
    TRANSVERSAL = 0
    TANGENTIAL = 1
    DEGENERATE = 2


# --------------------------------------------------------------------------- curves

class Curve:
    """Parametrized source curve on [t_min, t_max].

    Subclasses implement vectorized ``point``, ``tangent`` and ``accel`` that
    accept any array of parameters and return ``t.shape + (3,)``.
    """
    t_min: float
    t_max: float
    closed: bool = False

    def point(self, t):
        raise NotImplementedError

    def tangent(self, t):
        raise NotImplementedError

    def accel(self, t):
        raise NotImplementedError

    @property
    def length(self):
        return self.t_max - self.t_min

    def sample_params(self, per_unit=SAMPLES_PER_UNIT):
        n = max(int(np.ceil(per_unit * self.length)), 16)
        if self.closed:
            return self.t_min + self.length * np.arange(n) / n
        return np.linspace(self.t_min, self.t_max, n + 1)

    def extent(self):
        """Max distance of the curve from the origin (sampled)."""
        return float(np.linalg.norm(self.point(self.sample_params(64)), axis=-1).max())

    def check_regular(self, n=4096, tol=1e-12):
        t = np.linspace(self.t_min, self.t_max, n)
        speed = np.linalg.norm(self.tangent(t), axis=-1)
        if speed.min() <= tol:
            raise ValueError(f"curve is not regular: |gamma'| = {speed.min():.3g} at t = {t[speed.argmin()]:.6g}")
        return float(speed.min())

    def check_simple(self, n=1024, tol=1e-6):
        """Pairwise sample distances, ignoring parameter neighbours, must exceed ``tol``."""
        t = np.linspace(self.t_min, self.t_max, n, endpoint=not self.closed)
        p = self.point(t)
        d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        step = np.linalg.norm(np.diff(p, axis=0), axis=-1).max()
        # parameter neighbours closer than a few steps are allowed to be close
        idx = np.arange(n)
        sep = np.abs(idx[:, None] - idx[None, :])
        if self.closed:
            sep = np.minimum(sep, n - sep)
        near = d < max(tol, 0.0)
        far_pairs = sep * step > 4 * step
        bad = near & far_pairs & (d < 0.5 * step)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"curve self-intersects near t = {t[i]:.6g} and t = {t[j]:.6g}")
        return True

    def to_dict(self):
        raise NotImplementedError


_AXES = {"x": (0, 1, 2), "y": (1, 2, 0), "z": (2, 0, 1)}


class Helix(Curve):
    """gamma(t) = center + r cos t e_a + r sin t e_b + pitch * t * e_axis.

    With ``axis='z'`` this is (r cos t, r sin t, pitch t). The parameter runs over
    [-pi turns, pi turns] unless ``t_range`` is given.
    """

    def __init__(self, radius=1.0, pitch=1.0, turns=2.0, axis="z", center=(0.0, 0.0, 0.0), t_range=None):
        if axis not in _AXES:
            raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
        self.radius, self.pitch, self.turns, self.axis = float(radius), float(pitch), float(turns), axis
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        if t_range is None:
            t_range = (-np.pi * self.turns, np.pi * self.turns)
        self.t_min, self.t_max = map(float, t_range)
        self._ax, self._a, self._b = _AXES[axis]

    def _assemble(self, c_ax, c_a, c_b, with_center):
        shape = np.broadcast(c_ax, c_a, c_b).shape
        out = np.empty(shape + (3,))
        out[..., self._ax] = c_ax
        out[..., self._a] = c_a
        out[..., self._b] = c_b
        if with_center:
            out += self.center
        return out

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self._assemble(self.pitch * t, self.radius * np.cos(t), self.radius * np.sin(t), True)

    def tangent(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self._assemble(np.full_like(t, self.pitch), -self.radius * np.sin(t), self.radius * np.cos(t), False)

    def accel(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self._assemble(np.zeros_like(t), -self.radius * np.cos(t), -self.radius * np.sin(t), False)

    def to_dict(self):
        return {"kind": "helix", "radius": self.radius, "pitch": self.pitch, "turns": self.turns,
                "axis": self.axis, "center": self.center.tolist(), "t_range": [self.t_min, self.t_max]}


class Circle(Curve):
    """Closed circle of radius r in the plane through ``center`` normal to ``axis``."""
    closed = True

    def __init__(self, radius=1.0, center=(0.0, 0.0, 0.0), axis="z"):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.axis = axis
        self._ax, self._a, self._b = _AXES[axis]
        self.t_min, self.t_max = 0.0, 2 * np.pi

    def _assemble(self, c_a, c_b, with_center):
        out = np.zeros(np.shape(c_a) + (3,))
        out[..., self._a] = c_a
        out[..., self._b] = c_b
        if with_center:
            out += self.center
        return out

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self._assemble(self.radius * np.cos(t), self.radius * np.sin(t), True)

    def tangent(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self._assemble(-self.radius * np.sin(t), self.radius * np.cos(t), False)

    def accel(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self._assemble(-self.radius * np.cos(t), -self.radius * np.sin(t), False)

    def to_dict(self):
        return {"kind": "circle", "radius": self.radius, "center": self.center.tolist(), "axis": self.axis}


class Saddle(Curve):
    """Closed saddle curve (r cos t, r sin t, height cos 2t) + center."""
    closed = True

    def __init__(self, radius=1.0, height=0.5, center=(0.0, 0.0, 0.0)):
        self.radius, self.height = float(radius), float(height)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.t_min, self.t_max = 0.0, 2 * np.pi

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        r, h = self.radius, self.height
        return np.stack([r * np.cos(t), r * np.sin(t), h * np.cos(2 * t)], axis=-1) + self.center

    def tangent(self, t):
        t = np.asarray(t, dtype=np.float64)
        r, h = self.radius, self.height
        return np.stack([-r * np.sin(t), r * np.cos(t), -2 * h * np.sin(2 * t)], axis=-1)

    def accel(self, t):
        t = np.asarray(t, dtype=np.float64)
        r, h = self.radius, self.height
        return np.stack([-r * np.cos(t), -r * np.sin(t), -4 * h * np.cos(2 * t)], axis=-1)

    def to_dict(self):
        return {"kind": "saddle", "radius": self.radius, "height": self.height, "center": self.center.tolist()}


class SampledCurve(Curve):
    """Cubic-spline interpolant through sampled points ``(t_i, gamma(t_i))``."""

    def __init__(self, t, points, source=None):
        t = np.asarray(t, dtype=np.float64)
        points = np.asarray(points, dtype=np.float64)
        if t.ndim != 1 or points.shape != (t.size, 3) or t.size < 4:
            raise ValueError("need at least 4 samples given as t (n,) and points (n, 3)")
        if np.any(np.diff(t) <= 0):
            raise ValueError("curve parameters must be strictly increasing")
        self._t, self._p, self.source = t, points, source
        self._spline = CubicSpline(t, points, axis=0)
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self.t_min, self.t_max = float(t[0]), float(t[-1])

    @classmethod
    def from_file(cls, path):
        """Plain text, one ``t x y z`` quadruple per line; ``#`` starts a comment."""
        arr = np.loadtxt(path, comments="#", ndmin=2)
        if arr.shape[1] != 4:
            raise ValueError(f"{path}: expected 4 columns (t x y z), got {arr.shape[1]}")
        return cls(arr[:, 0], arr[:, 1:], source=str(path))

    def point(self, t):
        return self._spline(np.asarray(t, dtype=np.float64))

    def tangent(self, t):
        return self._d1(np.asarray(t, dtype=np.float64))

    def accel(self, t):
        return self._d2(np.asarray(t, dtype=np.float64))

    def to_dict(self):
        if self.source is not None:
            return {"kind": "polyline", "path": self.source}
        return {"kind": "polyline", "t": self._t.tolist(), "points": self._p.tolist()}


def curve_from_spec(spec: dict) -> Curve:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "helix":
        return Helix(**spec)
    if kind == "circle":
        return Circle(**spec)
    if kind == "saddle":
        return Saddle(**spec)
    if kind == "polyline":
        if "path" in spec:
            return SampledCurve.from_file(spec["path"])
        return SampledCurve(spec["t"], spec["points"])
    raise ValueError(f"unknown curve kind {kind!r}")


# --------------------------------------------------------------------------- frames

@dataclass(frozen=True)
class Frame:
    omega: np.ndarray
    omega1: np.ndarray
    omega2: np.ndarray

    def matrix(self):
        return np.stack([self.omega, self.omega1, self.omega2])


def frames_from_angles(theta1, theta2):
    """Vectorized direction frames; returns (omega, omega1, omega2), each (..., 3)."""
    th1 = np.asarray(theta1, dtype=np.float64)
    th2 = np.asarray(theta2, dtype=np.float64)
    s1, c1, s2, c2 = np.sin(th1), np.cos(th1), np.sin(th2), np.cos(th2)
    s1, c1, s2, c2 = np.broadcast_arrays(s1, c1, s2, c2)
    omega = np.stack([c1, s1 * c2, s1 * s2], axis=-1)
    omega1 = np.stack([-s1, c1 * c2, c1 * s2], axis=-1)
    omega2 = np.stack([np.zeros_like(s2), -s2, c2], axis=-1)
    return omega, omega1, omega2


def frame_from_angles(theta1: float, theta2: float, pole_tol: float = 1e-9) -> Frame:
    if not (pole_tol < theta1 < np.pi - pole_tol):
        raise ValueError(
            f"theta1 = {theta1!r} is at a pole of the spherical chart; rotate the chart "
            "(e.g. choose a different curve axis) so directions stay away from +-e1")
    w, w1, w2 = frames_from_angles(theta1, theta2)
    return Frame(w, w1, w2)


def angles_from_direction(omega):
    """Inverse of the chart: theta1 in [0, pi], theta2 in [0, 2 pi)."""
    omega = np.asarray(omega, dtype=np.float64)
    th1 = np.arccos(np.clip(omega[..., 0], -1.0, 1.0))
    th2 = np.mod(np.arctan2(omega[..., 2], omega[..., 1]), 2 * np.pi)
    return th1, th2


def adapted_frame(omega, xi_hat, tol: float = 1e-9) -> Frame:
    """Frame with omega2 = xi_hat and omega1 = xi_hat x omega.

    The triple (omega, omega1, omega2) has the same handedness as the spherical
    chart frames, i.e. omega x omega1 = omega2.
    """
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    xi_hat = np.asarray(xi_hat, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(omega) - 1) > 1e-9 or abs(np.linalg.norm(xi_hat) - 1) > 1e-9:
        raise ValueError("omega and xi_hat must be unit vectors")
    if abs(omega @ xi_hat) > tol:
        raise ValueError(f"omega is not perpendicular to xi_hat (dot = {omega @ xi_hat:.3g})")
    return Frame(omega, np.cross(xi_hat, omega), xi_hat.copy())


# --------------------------------------------------------------------------- intersections

@dataclass(frozen=True)
class Covector:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(3)
        xi = np.asarray(self.xi, dtype=np.float64).reshape(3)
        if not np.linalg.norm(xi) > 0:
            raise ValueError("covector direction must be nonzero")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    @property
    def xi_hat(self):
        return self.xi / np.linalg.norm(self.xi)


@dataclass(frozen=True)
class PlaneIntersection:
    t: float
    kind: Kind
    sigma: float            # unit tangent . xi_hat
    tangency_strength: float  # gamma''(t) . xi_hat


@dataclass
class IntersectionSet:
    """Flat intersection data for a batch of covectors.

    Root r belongs to covector ``cov[r]``; roots are sorted by (cov, t).
    ``degenerate[b]`` flags queries whose plane contains an arc of the curve;
    such queries contribute no roots.
    """
    n: int
    cov: np.ndarray
    t: np.ndarray
    kind: np.ndarray
    sigma: np.ndarray       # normalized gamma'.xi_hat (signed)
    gdot: np.ndarray        # raw gamma'.xi_hat
    curv: np.ndarray        # gamma''.xi_hat
    degenerate: np.ndarray
    ext_cov: np.ndarray = None
    ext_t: np.ndarray = None
    ext_h: np.ndarray = None

    def counts(self):
        return np.bincount(self.cov, minlength=self.n)

    def for_covector(self, b):
        sel = self.cov == b
        return [PlaneIntersection(float(t), Kind(int(k)), float(s), float(c))
                for t, k, s, c in zip(self.t[sel], self.kind[sel], self.sigma[sel], self.curv[sel])]


def _bisect(fun, lo, hi, steps=BISECTION_STEPS):
    """Vectorized bisection for sign changes of ``fun(t)`` on [lo, hi]."""
    flo = fun(lo)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def intersect(curve: Curve, x, xi, samples_per_unit=SAMPLES_PER_UNIT, tau_t=TAU_TANGENT,
              tau_c=TAU_CURVATURE, with_extrema=False) -> IntersectionSet:
    """All roots of h(t) = (gamma(t) - x) . xi_hat for a batch of covectors.

    Roots are bracketed by sign changes on a uniform sample of the parameter
    interval and refined by bisection plus a Newton polish. Extrema of h
    (sign changes of gamma'.xi) are refined as well: this catches tangential
    roots and pairs of close roots that the sample grid straddles.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    x, xi = np.broadcast_arrays(x, xi)
    nrm = np.linalg.norm(xi, axis=1)
    if np.any(nrm <= 0):
        raise ValueError("covector directions must be nonzero")
    xh = xi / nrm[:, None]
    B = x.shape[0]

    ts = curve.sample_params(samples_per_unit)
    if curve.closed:
        ts_ext = np.append(ts, curve.t_max)
    else:
        ts_ext = ts
    G = curve.point(ts_ext)
    D = curve.tangent(ts_ext)
    scale = max(curve.extent(), 1.0)
    period = curve.length

    covs, roots, ecov, et, eh = [], [], [], [], []
    degenerate = np.zeros(B, dtype=bool)
    n = ts_ext.size
    bs = max(1, _MAX_BATCH_ELEMS // n)
    for b0 in range(0, B, bs):
        b1 = min(B, b0 + bs)
        xb, xib = x[b0:b1], xh[b0:b1]
        off = np.einsum("ij,ij->i", xb, xib)
        H = G @ xib.T - off
        HD = D @ xib.T
        tol = 1e-12 * (scale + np.linalg.norm(xb, axis=1))
        zero = np.abs(H) <= tol
        if curve.closed:
            zero[-1] = zero[0]
            H[-1] = np.where(zero[0], 0.0, H[-1])
        run = zero[:-2] & zero[1:-1] & zero[2:]
        deg = run.any(axis=0)
        degenerate[b0:b1] = deg

        def h_of(t, c):
            return np.einsum("ij,ij->i", curve.point(t), xib[c]) - off[c]

        def hd_of(t, c):
            return np.einsum("ij,ij->i", curve.tangent(t), xib[c])

        # exact zeros on the sample grid
        zi, zc = np.nonzero(zero[:-1] if curve.closed else zero)
        keep = ~deg[zc]
        covs.append(zc[keep] + b0)
        roots.append(ts_ext[zi[keep]])

        # sign-change brackets
        sc = (H[:-1] * H[1:] < 0) & ~zero[:-1] & ~zero[1:]
        bi, bc = np.nonzero(sc)
        keep = ~deg[bc]
        bi, bc = bi[keep], bc[keep]
        lo, hi = ts_ext[bi], ts_ext[bi + 1]
        tr = _bisect(lambda t: h_of(t, bc), lo.copy(), hi.copy())
        for _ in range(2):  # Newton polish, kept only when it stays in the bracket and improves
            hv, dv = h_of(tr, bc), hd_of(tr, bc)
            with np.errstate(divide="ignore", invalid="ignore"):
                tn = tr - hv / dv
            ok = np.isfinite(tn) & (tn >= lo) & (tn <= hi) & (np.abs(h_of(tn, bc)) <= np.abs(hv))
            tr = np.where(ok, tn, tr)
        covs.append(bc + b0)
        roots.append(tr)

        # extremum brackets of h
        pos = HD >= 0
        ei, ec = np.nonzero(pos[:-1] != pos[1:])
        keep = ~deg[ec]
        ei, ec = ei[keep], ec[keep]
        if ei.size:
            te = _bisect(lambda t: hd_of(t, ec), ts_ext[ei].copy(), ts_ext[ei + 1].copy())
            he = h_of(te, ec)
            if with_extrema:
                ecov.append(ec + b0)
                et.append(te)
                eh.append(he)
            tol_e = tol[ec]
            touch = np.abs(he) <= tol_e
            covs.append(ec[touch] + b0)
            roots.append(te[touch])
            hl, hr = H[ei, ec], H[ei + 1, ec]
            pair = (~touch) & (hl * hr > 0) & (np.sign(he) != np.sign(hl)) & ~zero[ei, ec] & ~zero[ei + 1, ec]
            if pair.any():
                pc = ec[pair]
                for lo, hi in ((ts_ext[ei[pair]], te[pair]), (te[pair], ts_ext[ei[pair] + 1])):
                    covs.append(pc + b0)
                    roots.append(_bisect(lambda t: h_of(t, pc), lo.copy(), hi.copy()))

    cov = np.concatenate(covs) if covs else np.zeros(0, dtype=np.int64)
    t = np.concatenate(roots) if roots else np.zeros(0)
    cov = cov.astype(np.int64)
    if curve.closed:
        t = curve.t_min + np.mod(t - curve.t_min, period)
    order = np.lexsort((t, cov))
    cov, t = cov[order], t[order]
    # merge duplicates found by more than one route
    if t.size:
        dup = np.zeros(t.size, dtype=bool)
        eps = 1e-9 * max(period, 1.0)
        dup[1:] = (cov[1:] == cov[:-1]) & (np.abs(t[1:] - t[:-1]) <= eps)
        if curve.closed:
            # first and last root of a covector may coincide across the seam
            last = np.r_[cov[1:] != cov[:-1], True]
            first = np.r_[True, cov[1:] != cov[:-1]]
            fi, li = np.nonzero(first)[0], np.nonzero(last)[0]
            seam = (li > fi) & (period - (t[li] - t[fi]) <= eps)
            dup[li[seam]] = True
        cov, t = cov[~dup], t[~dup]

    xi_r = xh[cov]
    tan = curve.tangent(t)
    gdot = np.einsum("ij,ij->i", tan, xi_r)
    sigma = gdot / np.linalg.norm(tan, axis=1)
    curv = np.einsum("ij,ij->i", curve.accel(t), xi_r)
    kind = np.full(t.size, int(Kind.TRANSVERSAL), dtype=np.int8)
    small = np.abs(sigma) <= tau_t
    kind[small & (np.abs(curv) > tau_c)] = int(Kind.TANGENTIAL)
    kind[small & (np.abs(curv) <= tau_c)] = int(Kind.DEGENERATE)

    out = IntersectionSet(B, cov, t, kind, sigma, gdot, curv, degenerate)
    if with_extrema:
        out.ext_cov = np.concatenate(ecov).astype(np.int64) if ecov else np.zeros(0, dtype=np.int64)
        out.ext_t = np.concatenate(et) if et else np.zeros(0)
        out.ext_h = np.concatenate(eh) if eh else np.zeros(0)
    return out


def plane_curve_intersections(cov: Covector, curve: Curve, **kwargs) -> list[PlaneIntersection]:
    """Intersections of the plane x + xi^perp with the curve.

    A plane containing an arc of the curve yields a single Degenerate entry with
    ``t = nan``.
    """
    res = intersect(curve, cov.x, cov.xi, **kwargs)
    if res.degenerate[0]:
        return [PlaneIntersection(float("nan"), Kind.DEGENERATE, float("nan"), float("nan"))]
    return res.for_covector(0)


def sigma_condition(t, xi, curve: Curve):
    """Unit tangent dotted with xi_hat; zero exactly on the fold set."""
    xi = np.asarray(xi, dtype=np.float64)
    tan = curve.tangent(t)
    return np.sum(tan * xi, axis=-1) / (np.linalg.norm(tan, axis=-1) * np.linalg.norm(xi, axis=-1))


def lambda_points(t, curve: Curve, tau_range, theta, n=9, xi=None, tol=1e-8):
    """Sample flowout pairs x = gamma(t) + tau theta, y = gamma(t) + tau~ theta.

    Returns (x, y, scale) with scale = tau / tau~, the factor multiplying xi in
    the covector attached to y. Zero values of tau are skipped.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    theta = theta / np.linalg.norm(theta)
    if xi is not None:
        xi = np.asarray(xi, dtype=np.float64)
        xh = xi / np.linalg.norm(xi)
        if abs(theta @ xh) > tol:
            raise ValueError("theta must be perpendicular to xi")
        if abs(float(sigma_condition(t, xi, curve))) > tol:
            raise ValueError("gamma'(t) . xi must vanish on the flowout")
    taus = np.linspace(tau_range[0], tau_range[1], n)
    taus = taus[taus != 0]
    g = curve.point(float(t))
    tau, tau_t = np.meshgrid(taus, taus, indexing="ij")
    tau, tau_t = tau.ravel(), tau_t.ravel()
    return g + tau[:, None] * theta, g + tau_t[:, None] * theta, tau / tau_t
