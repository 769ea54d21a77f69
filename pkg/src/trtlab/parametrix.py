"""Approximate inversion with the pseudoinverse symbol, phantoms and artifact analysis.

The parametrix is applied as a frozen-symbol pseudodifferential operator: the
grid is cut into overlapping cubic patches with sin^2 windows that sum to one,
and each windowed patch is filtered in the Fourier domain with the matrix
multiplier |k| b0(x_c, k/|k|), x_c the patch center. Outputs are overlap-added.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import Curve, intersect
from .symbol import (orth_scale, principal_symbol_batch, truncated_inverse)
from .symtensor import SymTensorField, dim_sym, multiplicities, power_components
from .transform import AcquisitionGeometry, Mode, normal

# --------------------------------------------------------------------------- phantoms


@dataclass
class Ball:
    center: np.ndarray
    radius: float

    def contains_ball(self, c, r, tol=1e-12):
        return np.linalg.norm(np.asarray(c) - self.center) + r <= self.radius + tol


def _amplitude(spec, m):
    if isinstance(spec, dict):
        if "power" in spec:
            return float(spec.get("scale", 1.0)) * power_components(np.asarray(spec["power"], float), m)
        if "coeffs" in spec:
            spec = spec["coeffs"]
    a = np.asarray(spec, dtype=np.float64).reshape(-1)
    if a.size != dim_sym(m):
        raise ValueError(f"amplitude needs {dim_sym(m)} components for order {m}, got {a.size}")
    return a


def _ellipsoid_fraction(pos, center, radii, h, ss):
    """Volume fraction of each voxel inside the ellipsoid (supersampled near the surface)."""
    q = (pos - center) / radii
    rho = np.sqrt(np.einsum("...k,...k->...", q, q))
    frac = (rho <= 1.0).astype(np.float64)
    # voxels whose center is within ~a voxel diagonal of the surface get supersampled
    band = np.abs(rho - 1.0) * np.min(radii) < 0.9 * float(np.linalg.norm(h))
    idx = np.nonzero(band)
    if idx[0].size and ss > 1:
        off = (np.arange(ss) + 0.5) / ss - 0.5
        o = np.stack(np.meshgrid(off, off, off, indexing="ij"), -1).reshape(-1, 3) * h
        pts = pos[idx][:, None, :] + o[None, :, :]
        qq = (pts - center) / radii
        frac[idx] = np.mean(np.einsum("pok,pok->po", qq, qq) <= 1.0, axis=1)
    return frac


def make_phantom(spec, grid: SymTensorField, ball: Optional[Ball] = None, supersample=4) -> SymTensorField:
    """Rasterize a list of primitives onto the grid of ``grid``.

    ``spec`` is a list (or a dict with key ``primitives``) of entries::

        {"kind": "ball", "center": [..], "radius": r, "amplitude": A}
        {"kind": "ellipsoid", "center": [..], "radii": [a, b, c], "amplitude": A}
        {"kind": "gaussian", "center": [..], "sigma": s, "amplitude": A}

    where ``A`` is a list of stored components or ``{"power": v}`` for v^m.
    Indicator primitives use volume fractions; Gaussians are cut off smoothly
    between 3 and 4 sigma.
    """
    if isinstance(spec, dict):
        spec = spec.get("primitives", [])
    m = grid.order
    out = grid.like()
    pos = grid.positions()
    h = grid.spacing
    for prim in spec or []:
        kind = prim.get("kind", "ball")
        c = np.asarray(prim["center"], dtype=np.float64)
        amp = _amplitude(prim.get("amplitude", {"power": [1, 0, 0]}), m)
        if kind in ("ball", "ellipsoid"):
            radii = (np.full(3, float(prim["radius"])) if kind == "ball"
                     else np.asarray(prim["radii"], dtype=np.float64))
            extent = float(radii.max())
            prof = _ellipsoid_fraction(pos, c, radii, h, supersample)
        elif kind == "gaussian":
            s = float(prim["sigma"])
            extent = 4 * s
            r = np.linalg.norm(pos - c, axis=-1)
            from .symbol import flat_top_window
            prof = np.exp(-0.5 * (r / s) ** 2) * flat_top_window(r, 3 * s, 4 * s)
        else:
            raise ValueError(f"unknown phantom primitive {kind!r}")
        if ball is not None and not ball.contains_ball(c, extent):
            raise ValueError(f"{kind} primitive at {c.tolist()} (extent {extent}) escapes the ball B")
        lo = grid.origin - 0.5 * h
        hi = grid.origin + (np.array(grid.shape) - 0.5) * h
        if np.any(c - extent < lo) or np.any(c + extent > hi):
            raise ValueError(f"{kind} primitive at {c.tolist()} is not inside the grid")
        out.data += prof[..., None] * amp
    return out


def edge_map(f: SymTensorField) -> np.ndarray:
    """Multiplicity-weighted norm of the central-difference gradient per voxel."""
    w = multiplicities(f.order)
    acc = np.zeros(f.shape)
    for k in range(3):
        d = np.gradient(f.data, f.spacing[k], axis=k)
        acc += np.einsum("...j,j->...", d * d, w)
    return np.sqrt(acc)


# --------------------------------------------------------------------------- symbol tables

def direction_grid(n_theta, n_phi):
    th = (np.arange(n_theta) + 0.5) * math.pi / n_theta
    ph = np.arange(n_phi) * 2 * math.pi / n_phi
    T, P = np.meshgrid(th, ph, indexing="ij")
    d = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1)
    return th, ph, d


def cond_taper(cond, cap, ratio=10.0):
    """1 for cond <= cap / ratio, 0 for cond >= cap, raised cosine in log(cond) between."""
    lc = np.log(np.where(np.isfinite(cond), np.maximum(cond, 1.0), np.inf))
    lo, hi = math.log(cap / ratio), math.log(cap)
    s = np.clip((hi - lc) / (hi - lo), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * s)


@dataclass
class SymbolTable:
    """Tapered symbols b0 on patch centers times a (theta, phi) direction grid.

    ``b`` and ``proj`` have shape (C, n_theta, n_phi, N, N) in orthonormal
    coordinates; ``proj`` = taper * B0 A0 is the ideal response of the
    parametrix composed with the normal operator.
    """
    centers: np.ndarray
    n_theta: int
    n_phi: int
    b: np.ndarray
    proj: np.ndarray
    weight: np.ndarray          # (C, n_theta, n_phi) scalar taper
    m: int
    homogeneous: bool = True

    @classmethod
    def constant(cls, centers, matrix, n_theta=4, n_phi=8, homogeneous=False):
        matrix = np.asarray(matrix, dtype=np.float64)
        C = len(centers)
        shape = (C, n_theta, n_phi) + matrix.shape
        b = np.broadcast_to(matrix, shape).copy()
        N = matrix.shape[0]
        m = int(round((math.sqrt(8 * N + 1) - 3) / 2))
        return cls(np.asarray(centers, float), n_theta, n_phi, b, b.copy(), np.ones(shape[:3]), m, homogeneous)

    def index_of(self, center, tol=1e-9):
        d = np.linalg.norm(self.centers - center, axis=1)
        i = int(np.argmin(d)) if d.size else -1
        return i if i >= 0 and d[i] < tol else -1


def build_symbol_table(curve: Curve, centers, m, n_theta=32, n_phi=64, gauge="fixed", cond_cap=1e3,
                       margin=(0.05, 0.15), t_weight=None, samples_per_unit=64) -> SymbolTable:
    """b0 = taper * B0 on a direction grid for every patch center.

    The taper is the fold cutoff weight (continuous across folds and curve
    ends) times a ramp in log(condition) so that b0 vanishes continuously
    where A0 loses rank.
    Uses b0(x, -xi) = b0(x, xi): only half of the sphere is evaluated.
    """
    if n_theta % 2 or n_phi % 2:
        raise ValueError("direction grid sizes must be even")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    N = dim_sym(m)
    _, _, d = direction_grid(n_theta, n_phi)
    half = d[: n_theta // 2].reshape(-1, 3)
    C = centers.shape[0]
    b = np.zeros((C, n_theta, n_phi, N, N))
    proj = np.zeros_like(b)
    wgt = np.zeros((C, n_theta, n_phi))
    for ci in range(C):
        sb = principal_symbol_batch(centers[ci], half, curve, m, gauge=gauge, samples_per_unit=samples_per_unit,
                                    t_weight=t_weight, margin_range=margin)
        ev = np.linalg.eigvalsh(sb.A)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.where(ev[:, 0] > 0, ev[:, -1] / ev[:, 0], np.inf)
        w = sb.weight * cond_taper(cond, cond_cap)
        Binv = truncated_inverse(sb.A, cond_cap)
        bh = (w[:, None, None] * Binv).reshape(n_theta // 2, n_phi, N, N)
        ph = (w[:, None, None] * np.einsum("bij,bjk->bik", Binv, sb.A)).reshape(n_theta // 2, n_phi, N, N)
        wh = w.reshape(n_theta // 2, n_phi)
        b[ci, : n_theta // 2], proj[ci, : n_theta // 2], wgt[ci, : n_theta // 2] = bh, ph, wh
        # antipodes: theta -> pi - theta, phi -> phi + pi
        sh = n_phi // 2
        b[ci, n_theta // 2:] = np.roll(bh[::-1], sh, axis=1)
        proj[ci, n_theta // 2:] = np.roll(ph[::-1], sh, axis=1)
        wgt[ci, n_theta // 2:] = np.roll(wh[::-1], sh, axis=1)
    return SymbolTable(centers, n_theta, n_phi, b, proj, wgt, m)


def _direction_lookup(khat, n_theta, n_phi):
    """Bilinear (theta, phi) cells and weights for unit vectors (F, 3)."""
    th = np.arccos(np.clip(khat[:, 2], -1, 1))
    ph = np.mod(np.arctan2(khat[:, 1], khat[:, 0]), 2 * math.pi)
    a = np.clip(th / (math.pi / n_theta) - 0.5, 0, n_theta - 1)
    a0 = np.minimum(a.astype(np.int64), n_theta - 2)
    fa = a - a0
    bf = ph / (2 * math.pi / n_phi)
    b0 = bf.astype(np.int64)
    fb = bf - b0
    b0 %= n_phi
    b1 = (b0 + 1) % n_phi
    idx = np.stack([a0 * n_phi + b0, a0 * n_phi + b1, (a0 + 1) * n_phi + b0, (a0 + 1) * n_phi + b1], 1)
    w = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], 1)
    return idx, w


# --------------------------------------------------------------------------- patching

@dataclass
class Patching:
    size: int = 16
    stride: int = 8
    pad_factor: int = 2

    def __post_init__(self):
        if self.size != 2 * self.stride:
            raise ValueError("patches must overlap by half (size = 2 * stride)")


def _window1d(P):
    return np.sin(np.pi * (np.arange(P) + 0.5) / P) ** 2


def _output_window1d(Q, edge):
    """1 in the middle of the FFT box, raised-cosine to 0 over ``edge`` cells at both ends."""
    w = np.ones(Q)
    if edge > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(edge) + 0.5) / edge)
        w[:edge] = ramp
        w[Q - edge:] = ramp[::-1]
    return w


def apodize(g: SymTensorField, width: int) -> SymTensorField:
    """Smoothly taper a field to zero over the outermost ``width`` voxels of each axis."""
    if width <= 0:
        return g
    ws = []
    for n in g.shape:
        w = np.ones(n)
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(width) + 0.5) / width)
        w[:width] = ramp
        w[n - width:] = np.minimum(w[n - width:], ramp[::-1])
        ws.append(w)
    win = ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]
    return g.like(g.data * win[..., None])


def patch_layout(shape, spacing, origin, patching: Patching):
    """Padded shape and the list of (start index, center) of all patches."""
    s, P = patching.stride, patching.size
    n = np.asarray(shape)
    padded = ((n + 2 * s + s - 1) // s) * s
    starts = [np.arange(0, p - P + 1, s) for p in padded]
    out = []
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                st = np.array([i, j, k])
                center = origin + (st - s + (P - 1) / 2.0) * spacing
                out.append((st, center))
    return tuple(int(p) for p in padded), out


def patch_centers(shape, spacing, origin, patching: Patching):
    return np.array([c for _, c in patch_layout(np.asarray(shape), np.asarray(spacing), np.asarray(origin),
                                                patching)[1]])


@dataclass
class ParametrixStats:
    patches: int = 0
    skipped_invisible: int = 0


def _freq_grid(shape, spacing, table, degree=1):
    """Flattened half-spectrum frequencies with their table lookup and radial factor.

    For homogeneous tables the radial factor is |k|**degree with the zero
    frequency dropped.
    """
    k = [2 * np.pi * np.fft.fftfreq(shape[a], spacing[a]) for a in range(2)] + \
        [2 * np.pi * np.fft.rfftfreq(shape[2], spacing[2])]
    K = np.stack(np.meshgrid(*k, indexing="ij"), -1).reshape(-1, 3)
    kn = np.linalg.norm(K, axis=1)
    dc = kn == 0
    khat = K / np.where(dc, 1.0, kn)[:, None]
    idx, wl = _direction_lookup(khat, table.n_theta, table.n_phi)
    radial = np.where(dc, 0.0, kn ** degree) if table.homogeneous else np.ones_like(kn)
    return idx, wl, radial, dc


def _apply_multiplier(G, tab, idx, wl, radial, dc, homogeneous, chunk=65536):
    """H(k) = radial(k) * b(k/|k|) G(k) for flattened spectra G (F, N)."""
    H = np.empty_like(G)
    for c0 in range(0, G.shape[0], chunk):
        sl = slice(c0, c0 + chunk)
        Bk = np.einsum("fc,fcij->fij", wl[sl], tab[idx[sl]])
        if not homogeneous:
            Bk[dc[sl]] = tab.mean(axis=0)
        H[sl] = radial[sl, None] * np.einsum("fij,fj->fi", Bk, G[sl])
    return H


def apply_parametrix(g: SymTensorField, table: SymbolTable, patching: Patching = None, use_proj=False,
                     calibration=1.0, stats: Optional[ParametrixStats] = None) -> SymTensorField:
    """Frozen-symbol application of the tabulated multiplier to ``g``.

    ``g`` holds orthonormal coordinates. The multiplier is split into a
    reference part b_ref(k/|k|) (the mean of the table over patch centers),
    applied exactly with one zero-padded FFT of the whole grid, plus the local
    variation b(x_c, .) - b_ref applied patch by patch. The reference pass gets
    the slowly decaying tails of the order-one multiplier right; patches only
    carry the spatial variation. Patch outputs are tapered to zero near the
    edges of their FFT boxes before being overlap-added. Patches whose center
    is not tabulated use the reference symbol (counted in ``stats``).

    With ``table.homogeneous`` the multiplier is |k| b(k/|k|) and the zero
    frequency is dropped; otherwise it is b(k/|k|) with b(0) the mean over
    directions.
    """
    patching = patching or Patching()
    stats = stats if stats is not None else ParametrixStats()
    N = g.data.shape[3]
    src = (table.proj if use_proj else table.b).reshape(len(table.centers), -1, N, N)
    ref = src.mean(axis=0) if len(src) else np.zeros((table.n_theta * table.n_phi, N, N))

    # reference pass on the whole grid, zero padded to twice its size
    big = tuple(2 * n for n in g.shape)
    deg = 0 if use_proj else 1
    idx, wl, radial, dc = _freq_grid(big, g.spacing, table, deg)
    G = np.fft.rfftn(g.data, s=big, axes=(0, 1, 2))
    fshape = G.shape
    H = _apply_multiplier(G.reshape(-1, N), ref, idx, wl, radial, dc, table.homogeneous)
    out = np.fft.irfftn(H.reshape(fshape), s=big, axes=(0, 1, 2))[:g.shape[0], :g.shape[1], :g.shape[2]]
    del G, H

    s, P, Q = patching.stride, patching.size, patching.size * patching.pad_factor
    padded, layout = patch_layout(np.asarray(g.shape), g.spacing, g.origin, patching)
    off = (Q - P) // 2
    gp = np.zeros(tuple(padded) + (N,))
    gp[s:s + g.shape[0], s:s + g.shape[1], s:s + g.shape[2]] = g.data
    acc = np.zeros((padded[0] + 2 * off, padded[1] + 2 * off, padded[2] + 2 * off, N))
    w1 = _window1d(P)
    win = w1[:, None, None] * w1[None, :, None] * w1[None, None, :]
    wo = _output_window1d(Q, off // 2)
    wout = (wo[:, None, None] * wo[None, :, None] * wo[None, None, :])[..., None]
    idx, wl, radial, dc = _freq_grid((Q, Q, Q), g.spacing, table, deg)
    qshape = (Q, Q, Q // 2 + 1)
    for st, center in layout:
        ci = table.index_of(center)
        stats.patches += 1
        if ci < 0:
            stats.skipped_invisible += 1
            continue
        if not np.any(src[ci]):
            stats.skipped_invisible += 1
        delta = src[ci] - ref
        if not np.any(delta):
            continue
        block = gp[st[0]:st[0] + P, st[1]:st[1] + P, st[2]:st[2] + P] * win[..., None]
        if not np.any(block):
            continue
        buf = np.zeros((Q, Q, Q, N))
        buf[off:off + P, off:off + P, off:off + P] = block
        Gp = np.fft.rfftn(buf, axes=(0, 1, 2)).reshape(-1, N)
        Hp = _apply_multiplier(Gp, delta, idx, wl, radial, dc, table.homogeneous)
        outb = np.fft.irfftn(Hp.reshape(qshape + (N,)), s=(Q, Q, Q), axes=(0, 1, 2))
        acc[st[0]:st[0] + Q, st[1]:st[1] + Q, st[2]:st[2] + Q] += outb * wout
    c0 = off + s
    out += acc[c0:c0 + g.shape[0], c0:c0 + g.shape[1], c0:c0 + g.shape[2]]
    return g.like(np.ascontiguousarray(calibration * out))


def to_orth(f: SymTensorField, dual=False):
    """Orthonormal coordinates: sqrt(mult) f for primal fields, f / sqrt(mult) for dual ones."""
    d = orth_scale(f.order)
    return f.like(f.data / d if dual else f.data * d)


def from_orth(f: SymTensorField):
    return f.like(f.data / orth_scale(f.order))


# --------------------------------------------------------------------------- reconstruction

@dataclass
class ReconConfig:
    patching: Patching = field(default_factory=Patching)
    n_theta: int = 32
    n_phi: int = 64
    cond_cap: float = 1e3
    margin: tuple = (0.05, 0.15)
    ball: Optional[Ball] = None
    center_margin: float = 0.0   # extra radius beyond B for which symbols are tabulated
    calibration: Optional[float] = None   # None: fit on a bump phantom
    bump_sigma: float = 0.06
    samples_per_unit: int = 64
    apodize: int = 6             # voxels of boundary taper applied to the normal output


@dataclass
class ReconReport:
    calibration: float
    skipped_voxels: int
    patches: int
    skipped_patches: int
    timings: dict = field(default_factory=dict)


def _table_for(geom: AcquisitionGeometry, grid: SymTensorField, cfg: ReconConfig) -> SymbolTable:
    centers = patch_centers(grid.shape, grid.spacing, grid.origin, cfg.patching)
    if cfg.ball is not None:
        keep = np.linalg.norm(centers - cfg.ball.center, axis=1) <= cfg.ball.radius + cfg.center_margin
        centers = centers[keep]
    return build_symbol_table(geom.curve, centers, grid.order, cfg.n_theta, cfg.n_phi, gauge="fixed",
                              cond_cap=cfg.cond_cap, margin=cfg.margin, t_weight=geom.t_weight,
                              samples_per_unit=cfg.samples_per_unit)


def parametrix_of_normal(g_dual: SymTensorField, table: SymbolTable, cfg: ReconConfig, calibration=1.0,
                         stats=None) -> SymTensorField:
    """Apply b0 to a Geometric normal-operator output given in dual coordinates."""
    rec = apply_parametrix(to_orth(apodize(g_dual, cfg.apodize), dual=True), table, cfg.patching, calibration=calibration, stats=stats)
    return from_orth(rec)


def calibrate(geom: AcquisitionGeometry, grid: SymTensorField, table: SymbolTable, cfg: ReconConfig) -> float:
    """Global scalar c fitted on a smooth bump: c R ~ taper-projected bump.

    The fit uses voxels within three standard deviations of the bump center so
    that smoothing-level far-field terms and grid-boundary effects do not bias
    the constant.
    """
    m = grid.order
    center = cfg.ball.center if cfg.ball is not None else grid.origin + 0.5 * (np.array(grid.shape) - 1) * grid.spacing
    amp = np.zeros(dim_sym(m))
    amp[:] = 1.0 / orth_scale(m)
    bump = make_phantom([{"kind": "gaussian", "center": center, "sigma": cfg.bump_sigma, "amplitude": amp}], grid)
    R = parametrix_of_normal(normal(bump, geom, Mode.GEOMETRIC), table, cfg)
    ideal = from_orth(apply_parametrix(to_orth(bump), table, cfg.patching, use_proj=True))
    near = np.linalg.norm(grid.positions() - center, axis=-1) <= 3 * cfg.bump_sigma
    Ro, Io = to_orth(R).data[near], to_orth(ideal).data[near]
    return float(np.vdot(Ro, Io) / np.vdot(Ro, Ro))


def reconstruct(f: SymTensorField, geom: AcquisitionGeometry, cfg: ReconConfig = None, table=None):
    """Normal operator (Geometric mode) followed by the calibrated parametrix."""
    cfg = cfg or ReconConfig()
    tm = {}
    t0 = time.perf_counter()
    if table is None:
        table = _table_for(geom, f, cfg)
    tm["symbol_table"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    c = cfg.calibration if cfg.calibration is not None else calibrate(geom, f, table, cfg)
    tm["calibration"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    g, skipped = normal(f, geom, Mode.GEOMETRIC, return_skipped=True)
    tm["normal"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    stats = ParametrixStats()
    rec = parametrix_of_normal(g, table, cfg, calibration=c, stats=stats)
    tm["parametrix"] = time.perf_counter() - t0
    return rec, ReconReport(c, skipped, stats.patches, stats.skipped_invisible, tm), table


# --------------------------------------------------------------------------- artifacts

@dataclass
class ArtifactPrediction:
    points: np.ndarray          # (M, 3) predicted artifact locations y
    scale: np.ndarray           # tau / tau~ per point
    source: np.ndarray          # index of the generating surface sample
    t: np.ndarray
    theta: np.ndarray           # (M, 3)
    tau: np.ndarray
    tau_tilde: np.ndarray

    def __len__(self):
        return self.points.shape[0]


def sphere_samples(center, radius, n):
    """Fibonacci points on a sphere with outward normals."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    nrm = np.stack([r * np.cos(phi), r * np.sin(phi), z], -1)
    return np.asarray(center, float) + radius * nrm, nrm


def predict_artifacts(points, normals, curve: Curve, box, step, tol, samples_per_unit=256) -> ArtifactPrediction:
    """Flowout points y = gamma(t) + tau~ theta for surface covectors on the fold.

    A covector (x, xi) is used when h(t) = (gamma(t) - x).xi_hat has an
    extremum t (so gamma'(t).xi = 0) with |h(t)| <= tol; then theta is the unit
    projection of x - gamma(t) onto xi^perp and y sweeps the part of the line
    inside ``box`` = (lo, hi) with spacing ``step``.
    """
    points = np.atleast_2d(np.asarray(points, float))
    normals = np.atleast_2d(np.asarray(normals, float))
    lo, hi = (np.asarray(b, float) for b in box)
    res = intersect(curve, points, normals, samples_per_unit=samples_per_unit, with_extrema=True)
    sel = np.abs(res.ext_h) <= tol
    src, ts = res.ext_cov[sel], res.ext_t[sel]
    out = {k: [] for k in ("points", "scale", "source", "t", "theta", "tau", "tau_tilde")}
    xh = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    for b, t in zip(src, ts):
        g = curve.point(t)
        d = points[b] - g
        d = d - (d @ xh[b]) * xh[b]
        tau = np.linalg.norm(d)
        if tau == 0:
            continue
        th = d / tau
        with np.errstate(divide="ignore"):
            a = (lo - g) / th
            c = (hi - g) / th
        s0 = np.max(np.minimum(a, c))
        s1 = np.min(np.maximum(a, c))
        if not s0 < s1:
            continue
        tt = np.arange(s0, s1, step)
        tt = tt[tt != 0]
        out["points"].append(g + tt[:, None] * th)
        out["scale"].append(tau / tt)
        out["source"].append(np.full(tt.size, b))
        out["t"].append(np.full(tt.size, t))
        out["theta"].append(np.broadcast_to(th, (tt.size, 3)))
        out["tau"].append(np.full(tt.size, tau))
        out["tau_tilde"].append(tt)
    if not out["points"]:
        return ArtifactPrediction(np.empty((0, 3)), np.empty(0), np.empty(0, int), np.empty(0), np.empty((0, 3)),
                                  np.empty(0), np.empty(0))
    return ArtifactPrediction(*(np.concatenate(out[k]) for k in
                                ("points", "scale", "source", "t", "theta", "tau", "tau_tilde")))


def rasterize_points(points, grid: SymTensorField, dilate=0):
    """Boolean voxel mask of the voxels containing ``points``, optionally dilated."""
    mask = np.zeros(grid.shape, dtype=bool)
    if len(points):
        idx = np.rint((np.asarray(points) - grid.origin) / grid.spacing).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(grid.shape)), axis=1)
        mask[tuple(idx[ok].T)] = True
    if dilate:
        mask = ndimage.binary_dilation(mask, iterations=dilate)
    return mask


def ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


@dataclass
class ArtifactMetrics:
    edge_ncc: float
    confinement: float
    confinement_all: float
    band_voxels: int
    visible_band_voxels: int
    residual_voxels: int
    predicted_voxels: int
    allowed_fraction: float = float("nan")   # share of counted voxels that are allowed


def ball_artifact_metrics(phantom: SymTensorField, rec: SymTensorField, center, radius, table: SymbolTable,
                          curve: Curve, m, cfg: ReconConfig, pred: ArtifactPrediction, band=1.5, dilate=2,
                          threshold=0.05, t_weight=None, highpass=None, region=None) -> ArtifactMetrics:
    """Edge recovery and artifact confinement for a ball phantom.

    The band is the set of voxels within ``band`` voxels of the sphere; a band
    voxel is visible when the tapered symbol weight at (x, normal) equals one.
    Residual edge energy is counted outside the dilated visible true edges, on
    voxels whose residual edge value exceeds ``threshold`` times the maximal true
    edge value; the confinement is the fraction of it inside the dilated
    prediction plus the dilated taper shadow.

    ``highpass`` (in voxels) subtracts a Gaussian-smoothed copy of the residual
    before taking its edge map, which removes smoothing-level error terms while
    keeping jumps. ``region`` (a Ball) restricts the residual count to that
    ball.
    """
    h = float(phantom.spacing.max())
    pos = phantom.positions()
    rel = pos - np.asarray(center)
    r = np.linalg.norm(rel, axis=-1)
    in_band = np.abs(r - radius) <= band * h
    bidx = np.nonzero(in_band)
    nrm = rel[bidx] / r[bidx][:, None]
    sb = principal_symbol_batch(pos[bidx], nrm, curve, m, gauge="fixed", samples_per_unit=cfg.samples_per_unit,
                                t_weight=t_weight, margin_range=cfg.margin)
    ev = np.linalg.eigvalsh(sb.A)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(ev[:, 0] > 0, ev[:, -1] / ev[:, 0], np.inf)
    w = sb.weight * cond_taper(cond, cfg.cond_cap)
    visible = np.zeros(phantom.shape, dtype=bool)
    shadow = np.zeros(phantom.shape, dtype=bool)
    vis = w >= 1.0 - 1e-12
    visible[tuple(a[vis] for a in bidx)] = True
    shadow[tuple(a[~vis] for a in bidx)] = True
    Et = edge_map(phantom)
    Er = edge_map(rec)
    sel = visible
    score = ncc(Er[sel], Et[sel]) if sel.sum() > 1 else 0.0
    res = rec.data - phantom.data
    if highpass:
        res = res - ndimage.gaussian_filter(res, sigma=(highpass, highpass, highpass, 0), mode="nearest")
    Eres = edge_map(rec.like(res))
    mask = ndimage.binary_dilation(visible, iterations=dilate)
    allowed = rasterize_points(pred.points, phantom, dilate) | ndimage.binary_dilation(shadow, iterations=dilate)
    outside = ~mask
    if region is not None:
        outside &= np.linalg.norm(pos - region.center, axis=-1) <= region.radius
    e2 = Eres ** 2
    strong = outside & (Eres > threshold * Et.max())
    tot = float(e2[strong].sum())
    conf = float(e2[strong & allowed].sum() / tot) if tot > 0 else 1.0
    tot_all = float(e2[outside].sum())
    conf_all = float(e2[outside & allowed].sum() / tot_all) if tot_all > 0 else 1.0
    frac = float((outside & allowed).sum() / max(outside.sum(), 1))
    return ArtifactMetrics(score, conf, conf_all, int(in_band.sum()), int(vis.sum()), int(strong.sum()),
                           int(rasterize_points(pred.points, phantom).sum()), frac)
