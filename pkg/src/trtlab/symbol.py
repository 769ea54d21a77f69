"""Principal symbol of the normal operator, its factorization and pseudoinverse.

At a covector (x, xi) whose plane x + xi^perp meets the curve transversally at
t_1..t_k, the principal symbol is the Gram matrix

    A0(x, xi) = sum_k w_k sum_i c_ik c_ik^T,   w_k = 2 pi / (|xi| |gamma'(t_k).xi_hat| |gamma(t_k) - x|),

where c_ik holds the components of omega1(t_k)^(m-i) (.) omega2(t_k)^i in
orthonormal coordinates (stored components scaled by sqrt(multiplicity)).
Matrices here act on orthonormal coordinates f~ = sqrt(mult) f.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import TAU_TANGENT, Covector, Curve, Kind, frames_from_angles, intersect
from .kernels import rotation_matrices
from .symtensor import dim_sym, multiplicities, weighted_patterns
from .visibility import TAU_LI, XI0_FACTOR, VisClass, classify_covector

RANK_TOL = 1e-8
COND_CAP = 1e6
SYMBOL_SAMPLES_PER_UNIT = 512


class SymbolSingular(ValueError):
    """Raised when the symbol is requested on or too near the fold set."""


@dataclass
class SymbolMatrix:
    entries: np.ndarray
    eigenvalues: np.ndarray
    condition: float
    at: Optional[Covector] = None
    k: int = 0
    invisible: bool = False
    rank: int = 0

    @classmethod
    def from_matrix(cls, A, at=None, k=0, invisible=False, rank_tol=RANK_TOL):
        A = 0.5 * (A + A.T)
        ev = np.linalg.eigvalsh(A)[::-1]
        top = ev[0] if ev.size else 0.0
        if top <= 0:
            return cls(A, ev, math.inf, at, k, invisible, 0)
        rank = int(np.sum(ev > rank_tol * top))
        cond = top / ev[-1] if ev[-1] > rank_tol * top else math.inf
        return cls(A, ev, float(cond), at, k, invisible, rank)


@dataclass
class FactorMatrix:
    P: np.ndarray           # (N, (m+1) k)
    t: np.ndarray           # curve parameter per column
    p: np.ndarray           # power of omega1 per column


def orth_scale(m):
    """sqrt(multiplicity) per stored component."""
    return np.sqrt(multiplicities(m))


def build_U(p: int, omega1, omega2, weights, m: int) -> np.ndarray:
    """Columns sqrt(w_k) * [omega1_k^(p) (.) omega2_k^(m-p)] in orthonormal coordinates.

    ``omega1`` is (k, 3); ``omega2`` is (3,) or (k, 3).
    """
    if not 0 <= p <= m:
        raise ValueError("p must lie in 0..m")
    omega1 = np.atleast_2d(np.asarray(omega1, dtype=np.float64))
    omega2 = np.broadcast_to(np.asarray(omega2, dtype=np.float64), omega1.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), omega1.shape[:1])
    # unweighted components of u^(p) (.) v^(q) are W_q(u, v) / mult; scaled by sqrt(mult)
    W = weighted_patterns(omega1, omega2, m)[:, m - p, :]        # (k, N)
    cols = W / orth_scale(m) * np.sqrt(w)[:, None]
    return cols.T


def _frames_at(x, xh, pts, gauge):
    d = x - pts
    r = np.linalg.norm(d, axis=-1)
    w = d / r[..., None]
    if gauge == "adapted":
        v = np.broadcast_to(xh, w.shape)
        u = np.cross(v, w)
    elif gauge == "fixed":
        th1 = np.arccos(np.clip(w[..., 0], -1, 1))
        th2 = np.arctan2(w[..., 2], w[..., 1])
        _, u, v = frames_from_angles(th1, th2)
    else:
        raise ValueError(f"unknown gauge {gauge!r}")
    return w, u, v, r


def principal_symbol(x, xi, curve: Curve, m: int, gauge="adapted", samples_per_unit=SYMBOL_SAMPLES_PER_UNIT,
                     tau_t=TAU_TANGENT, return_factor=False, t_weight=None):
    """A0(x, xi) with its factor P (A0 = P P^T).

    ``gauge='adapted'`` uses omega2 = xi_hat and omega1 = xi_hat x omega at each
    intersection. ``gauge='fixed'`` uses the spherical-chart frames of the
    direction omega instead, which is what a backprojection in chart frames
    sees; both have the same range. ``t_weight`` (callable) multiplies each
    intersection weight, matching an apodized acquisition.
    """
    cov = Covector(x, xi)
    xh = cov.xi_hat
    res = intersect(curve, cov.x, cov.xi, samples_per_unit=samples_per_unit, tau_t=tau_t)
    if res.degenerate[0]:
        raise SymbolSingular("plane contains an arc of the curve")
    if np.any(res.kind != Kind.TRANSVERSAL):
        raise SymbolSingular("plane is tangent to the curve; the symbol is singular on the fold set")
    N = dim_sym(m)
    if res.t.size == 0:
        S = SymbolMatrix.from_matrix(np.zeros((N, N)), cov, 0, invisible=True)
        F = FactorMatrix(np.zeros((N, 0)), np.empty(0), np.empty(0, dtype=int))
        return (S, F) if return_factor else S
    pts = curve.point(res.t)
    _, u, v, r = _frames_at(cov.x, xh, pts, gauge)
    wk = 2 * math.pi / (np.linalg.norm(cov.xi) * np.abs(res.gdot) * r)
    if t_weight is not None:
        wk = wk * t_weight(res.t)
    blocks, tcol, pcol = [], [], []
    for p in range(m, -1, -1):
        blocks.append(build_U(p, u, v, wk, m))
        tcol.append(res.t)
        pcol.append(np.full(res.t.size, p))
    P = np.concatenate(blocks, axis=1)
    S = SymbolMatrix.from_matrix(P @ P.T, cov, int(res.t.size))
    if return_factor:
        return S, FactorMatrix(P, np.concatenate(tcol), np.concatenate(pcol))
    return S


@dataclass
class SymbolBatch:
    A: np.ndarray           # (B, N, N)
    k: np.ndarray
    margin: np.ndarray      # min_k |unit gamma' . xi_hat| (0 when no roots)
    singular: np.ndarray    # tangential / degenerate planes
    kt_order: Optional[np.ndarray] = None
    weight: Optional[np.ndarray] = None   # fold cutoff weight, when a margin range was given


def principal_symbol_batch(x, xi, curve: Curve, m: int, gauge="adapted", samples_per_unit=64,
                           tau_t=TAU_TANGENT, with_kt=False, t_weight=None, margin_range=None) -> SymbolBatch:
    """Vectorized A0 for many covectors. Singular entries are left as zero.

    With ``margin_range = (lo, hi)`` the batch also carries the fold cutoff
    weight of :func:`fold_weight`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    x, xi = np.broadcast_arrays(x, xi)
    B = x.shape[0]
    N = dim_sym(m)
    res = intersect(curve, x, xi, samples_per_unit=samples_per_unit, tau_t=tau_t,
                    with_extrema=margin_range is not None)
    nrm = np.linalg.norm(xi, axis=1)
    xh = xi / nrm[:, None]
    singular = res.degenerate.copy()
    np.logical_or.at(singular, res.cov[res.kind != Kind.TRANSVERSAL], True)
    margin = np.full(B, np.inf)
    np.minimum.at(margin, res.cov, np.abs(res.sigma))
    margin[~np.isfinite(margin)] = 0.0
    k = np.bincount(res.cov, minlength=B)
    A = np.zeros((B, N, N))
    if res.t.size:
        pts = curve.point(res.t)
        _, u, v, r = _frames_at(x[res.cov], xh[res.cov], pts, gauge)
        wk = 2 * math.pi / (nrm[res.cov] * np.abs(res.gdot) * r)
        if t_weight is not None:
            wk = wk * t_weight(res.t)
        C = weighted_patterns(u, v, m) / orth_scale(m)            # (R, m+1, N)
        Ak = np.einsum("r,rin,rio->rno", wk, C, C)
        np.add.at(A, res.cov, Ak)
    A[singular] = 0.0
    kt = None
    if with_kt:
        from .visibility import _kt_from_roots
        kt = np.full(B, -1)
        bounds = np.searchsorted(res.cov, np.arange(B + 1))
        for b in range(B):
            if bounds[b + 1] > bounds[b] and not res.degenerate[b]:
                _, kt[b], _ = _kt_from_roots(x[b], xh[b], curve, res.t[bounds[b]:bounds[b + 1]], TAU_LI)
    weight = None
    if margin_range is not None:
        weight = fold_weight(res, curve, xh, *margin_range, t_weight=t_weight)
        weight[singular] = 0.0
    return SymbolBatch(A, k, margin, singular, kt, weight)


def truncated_inverse(A, cond_cap=COND_CAP):
    """Batched spectral pseudoinverse keeping eigenvalues above lambda_max / cond_cap."""
    A = np.asarray(A, dtype=np.float64)
    ev, Q = np.linalg.eigh(0.5 * (A + np.swapaxes(A, -1, -2)))
    top = ev[..., -1:]
    keep = (ev > top / cond_cap) & (top > 0)
    inv = np.where(keep, 1.0 / np.where(keep, ev, 1.0), 0.0)
    return np.einsum("...ij,...j,...kj->...ik", Q, inv, Q)


def pseudoinverse_symbol(A: SymbolMatrix, cond_cap=COND_CAP) -> SymbolMatrix:
    """B0 = O D^- O^T, truncating eigenvalues below lambda_max / cond_cap."""
    Bm = truncated_inverse(A.entries, cond_cap)
    out = SymbolMatrix.from_matrix(Bm, A.at, A.k, invisible=A.invisible)
    out.invisible = A.invisible or not np.any(A.entries)
    return out


def taper(margin, lo=TAU_TANGENT, hi=XI0_FACTOR * TAU_TANGENT):
    """Raised-cosine ramp in the fold margin: 0 for margin <= lo, 1 for margin >= hi."""
    s = np.clip((np.asarray(margin, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * s)


def fold_weight(res, curve: Curve, xh, lo, hi, t_weight=None):
    """Cutoff weight in [0, 1] per covector of an intersection set, continuous across folds.

    The weight is the minimum of per-point factors. Each root contributes
    taper(|unit gamma'(t_k) . xi_hat|), so without the other terms this is
    taper(min_k margin). Each interior
    extremum t_e of h(t) = (gamma(t) - x) . xi_hat contributes taper of the
    margin sqrt(2 kappa |h(t_e)|) / |gamma'(t_e)|, which is the margin the pair of
    roots born at that fold would have, with kappa = |gamma''(t_e) . xi_hat|
    bounded below by |gamma'(t_e)|^2 / extent. The bound keeps the factor at 1
    when two extrema of h merge far from h = 0 (there kappa -> 0 while no root
    is near). The second term makes
    the weight vanish continuously as a plane approaches tangency from the side
    without the extra roots; the minimum root margin alone jumps there. With
    ``t_weight`` (the end apodization of an open curve) each factor is blended
    toward 1 where the curve fades out, so roots entering through the curve
    ends do not cause jumps either. A pair of roots is born with the factor of
    the extremum it emerges from, so taking the minimum (not the product) keeps
    the weight continuous at births. ``res`` must carry extrema.
    """
    B = res.n
    w = np.ones(B)
    tr = taper(np.abs(res.sigma), lo, hi)
    if t_weight is not None:
        tr = 1.0 - t_weight(res.t) * (1.0 - tr)
    np.minimum.at(w, res.cov, tr)
    if res.ext_t is not None and res.ext_t.size:
        te = res.ext_t
        kappa = np.abs(np.einsum("ij,ij->i", curve.accel(te), xh[res.ext_cov]))
        speed = np.linalg.norm(curve.tangent(te), axis=1)
        kappa = np.maximum(kappa, speed ** 2 / max(curve.extent(), 1e-12))
        me = np.sqrt(2.0 * kappa * np.abs(res.ext_h)) / speed
        te_w = taper(me, lo, hi)
        if t_weight is not None:
            te_w = 1.0 - t_weight(te) * (1.0 - te_w)
        np.minimum.at(w, res.ext_cov, te_w)
    w[res.counts() == 0] = 0.0
    return w


def cutoff_symbol(x, xi, curve: Curve, B0: SymbolMatrix, m: int, lo=TAU_TANGENT,
                  hi=XI0_FACTOR * TAU_TANGENT, visibility=None, t_weight=None) -> SymbolMatrix:
    """Taper B0 to zero outside the transversal visible set (see :func:`fold_weight`)."""
    vis = visibility if visibility is not None else classify_covector(x, xi, curve, m)
    if vis.cls is not VisClass.XI_DELTA:
        return SymbolMatrix.from_matrix(np.zeros_like(B0.entries), B0.at, B0.k, invisible=True)
    cov = Covector(x, xi)
    res = intersect(curve, cov.x, cov.xi, with_extrema=True)
    s = float(fold_weight(res, curve, cov.xi_hat[None, :], lo, hi, t_weight)[0])
    return SymbolMatrix.from_matrix(s * B0.entries, B0.at, B0.k)


# --------------------------------------------------------------------------- rank checks

@dataclass
class RankReport:
    m: int
    k: int
    trials: int
    resamples: int
    rank_U: np.ndarray      # (trials, m+1), column p
    rank_P: np.ndarray      # (trials,)
    failures: int = 0

    @property
    def expected_P(self):
        return dim_sym(self.m)

    def rows(self):
        out = []
        for j in range(self.trials):
            ok = (all(self.rank_U[j, p] == min(p + 1, self.k) for p in range(self.m + 1))
                  and self.rank_P[j] == min(self.expected_P, self.k * (self.m + 1)))
            out.append((j, *self.rank_U[j].tolist(), int(self.rank_P[j]), "pass" if ok else "fail"))
        return out


def numerical_rank(M, tol=RANK_TOL):
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0


def rank_check(m: int, trial_count: int = 100, rng_seed=0, k=None, tau_li=TAU_LI) -> RankReport:
    """Ranks of the blocks U_p and of P for random adapted-frame configurations.

    Each trial draws a random plane normal and k in-plane directions (k = m+1 by
    default); configurations with two nearly parallel directions are redrawn.
    """
    rng = np.random.default_rng(rng_seed)
    k = m + 1 if k is None else int(k)
    rU = np.zeros((trial_count, m + 1), dtype=int)
    rP = np.zeros(trial_count, dtype=int)
    resamples = 0
    for j in range(trial_count):
        while True:
            xh = rng.standard_normal(3)
            xh /= np.linalg.norm(xh)
            e1 = np.cross(xh, rng.standard_normal(3))
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(xh, e1)
            phi = rng.uniform(0, np.pi, k)
            d = np.abs(np.sin(phi[:, None] - phi[None, :]))
            d[np.diag_indices(k)] = 1.0
            if d.min() > tau_li:
                break
            resamples += 1
        w = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        om1 = np.cross(xh, w)
        Us = [build_U(p, om1, xh, np.ones(k), m) for p in range(m + 1)]
        rU[j] = [numerical_rank(U) for U in Us]
        rP[j] = numerical_rank(np.concatenate(Us[::-1], axis=1))
    rep = RankReport(m, k, trial_count, resamples, rU, rP)
    rep.failures = sum(1 for r in rep.rows() if r[-1] == "fail")
    return rep


# --------------------------------------------------------------------------- frame rotation

def rotate_to_gauge(g, omega, u, v, xi_hat):
    """Re-express transform components in the frame adapted to ``xi_hat``.

    ``g`` (..., m+1) are components measured with frame (u, v) around direction
    ``omega``. The adapted frame has second vector along the projection of
    ``xi_hat`` onto omega^perp and first vector (second) x omega. The result is
    the set of components the same field would give in that frame.
    """
    g = np.asarray(g, dtype=np.float64)
    m = g.shape[-1] - 1
    xh = np.asarray(xi_hat, dtype=np.float64)
    xh = xh / np.linalg.norm(xh)
    e = xh - (omega @ xh)[..., None] * omega if np.ndim(omega) > 1 else xh - (omega @ xh) * omega
    e = e / np.linalg.norm(e, axis=-1, keepdims=True)
    f = np.cross(e, omega)
    c = np.sum(f * u, axis=-1)
    s = np.sum(f * v, axis=-1)
    R = rotation_matrices(m, c, s)
    return np.einsum("...ij,...j->...i", R, g)


# --------------------------------------------------------------------------- oscillatory probe

def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


def flat_top_window(r, r_flat, r_out):
    """Radial window equal to 1 for r <= r_flat and 0 for r >= r_out."""
    return 1.0 - smooth_step((np.asarray(r) - r_flat) / (r_out - r_flat))


@dataclass
class ProbeResult:
    x0: np.ndarray
    xi_hat: np.ndarray
    m: int
    lambdas: np.ndarray
    measured: np.ndarray        # (L, N, N) lambda * M(lambda), orthonormal coordinates
    quadrature: np.ndarray      # (L, N, N) lambda * sine-partner response (should vanish)
    A0: np.ndarray
    c: float = float("nan")
    deviations: np.ndarray = field(default_factory=lambda: np.empty(0))

    def fit(self, c=None):
        top = self.measured[-1]
        if c is None:
            c = float(np.vdot(top, self.A0) / np.vdot(self.A0, self.A0))
        self.c = c
        scale = np.abs(self.A0).max()
        self.deviations = np.array([np.abs(M - c * self.A0).max() / scale for M in self.measured])
        return self


def oscillatory_probe(x0, xi_hat, lambdas, m, geom, n=128, half_width=1.0, window=(0.35, 0.85),
                      gauge=True) -> ProbeResult:
    """Measure the symbol of the Geometric normal operator with plane-wave probes.

    For each lambda the inputs are window * cos(lambda (x - x0).xi_hat) e_J and
    the sine partner; the response at x0 (rotated into the xi-adapted gauge when
    ``gauge`` is set) is converted to orthonormal coordinates and multiplied by
    lambda, which removes the degree -1 homogeneity.
    """
    from .symtensor import SymTensorField
    from .transform import point_response

    x0 = np.asarray(x0, dtype=np.float64)
    xh = np.asarray(xi_hat, dtype=np.float64)
    xh = xh / np.linalg.norm(xh)
    grid = SymTensorField.centered(n, half_width, 0)
    h = float(grid.spacing.max())
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(lambdas * h >= np.pi):
        raise ValueError(f"lambda above the grid Nyquist limit pi/h = {np.pi / h:.4g}")
    pos = grid.positions() - x0
    win = flat_top_window(np.linalg.norm(pos, axis=-1), *window)
    phase = pos @ xh
    D = 1.0 / orth_scale(m)
    meas, quad = [], []
    for lam in lambdas:
        Mc = point_response(win * np.cos(lam * phase), grid.spacing, grid.origin, geom, x0, m,
                            gauge_xi=xh if gauge else None)
        Ms = point_response(win * np.sin(lam * phase), grid.spacing, grid.origin, geom, x0, m,
                            gauge_xi=xh if gauge else None)
        meas.append(lam * D[:, None] * Mc * D[None, :])
        quad.append(lam * D[:, None] * Ms * D[None, :])
    A0 = principal_symbol(x0, xh, geom.curve, m, gauge="adapted" if gauge else "fixed",
                          t_weight=geom.t_weight).entries
    return ProbeResult(x0, xh, m, lambdas, np.array(meas), np.array(quad), A0)
