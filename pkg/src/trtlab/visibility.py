"""Kirillov-Tuy checks and visibility classification of covectors.

A covector (x, xi) is *visible* when the plane x + xi^perp meets the curve in
at least m + 1 points whose directions from x are pairwise linearly
independent. Visible covectors split into those where every intersection is
transversal (class ``XI_DELTA``) and those with tangential but curved contacts
(``XI_LAMBDA``).
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (TAU_CURVATURE, TAU_TANGENT, Covector, Curve, Kind, PlaneIntersection,
                       intersect)

TAU_LI = 1e-4           # threshold on |sin(angle)| between two directions
XI0_FACTOR = 10.0       # Xi_0 margin in units of the tangency threshold
ATLAS_SAMPLES_PER_UNIT = 256


class VisClass(str, enum.Enum):
    XI_DELTA = "XiDelta"
    XI_LAMBDA = "XiLambda"
    INVISIBLE = "Invisible"
    DEGENERATE = "Degenerate"


_CLASSES = list(VisClass)


@dataclass
class KTReport:
    plane: Covector
    points: np.ndarray
    directions: np.ndarray
    order_satisfied: int
    pairwise_min_angle: float
    degenerate: bool = False

    @property
    def usable(self):
        return self.order_satisfied + 1

    def holds(self, m):
        return (not self.degenerate) and self.order_satisfied >= m


@dataclass
class VisibilityReport:
    covector: Covector
    cls: VisClass
    intersections: list
    kt_order: int
    margin: float           # min_k |unit gamma'(t_k) . xi_hat|, 0 if no transversal point
    in_xi0: bool


def _plane_basis(xh):
    a = np.eye(3)[np.argmin(np.abs(xh))]
    e1 = np.cross(xh, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(xh, e1)


def max_independent(angles, tau_li=TAU_LI):
    """Largest number of lines (angles mod pi) with pairwise |sin(diff)| > tau_li.

    Exact: greedy sweeps around the circle from every starting line. Because the
    admissible sets only shrink as ``tau_li`` grows, the count is monotone.
    """
    a = np.sort(np.mod(np.asarray(angles, dtype=np.float64), np.pi))
    n = a.size
    if n <= 1:
        return n
    gap = math.asin(min(max(tau_li, 0.0), 1.0))
    best = 1
    for s in range(n):
        chosen = [a[s]]
        for j in range(1, n):
            cand = a[(s + j) % n] + (np.pi if s + j >= n else 0.0)
            if cand - chosen[-1] > gap:
                chosen.append(cand)
        # close the circle: first and last must also be separated
        while len(chosen) > 1 and chosen[0] + np.pi - chosen[-1] <= gap:
            chosen.pop()
        best = max(best, len(chosen))
    return best


def _min_pair_angle(angles):
    a = np.mod(np.asarray(angles, dtype=np.float64), np.pi)
    if a.size < 2:
        return math.pi / 2
    d = np.abs(a[:, None] - a[None, :])
    d = np.minimum(d, np.pi - d)
    d[np.diag_indices(a.size)] = np.inf
    return float(d.min())


def _kt_from_roots(x, xh, curve, ts, tau_li):
    pts = curve.point(np.asarray(ts, dtype=np.float64)).reshape(-1, 3)
    d = x - pts
    r = np.linalg.norm(d, axis=1)
    keep = r > 1e-12
    dirs = d[keep] / r[keep, None]
    e1, e2 = _plane_basis(xh)
    ang = np.arctan2(dirs @ e2, dirs @ e1)
    order = max_independent(ang, tau_li) - 1
    return dirs, order, _min_pair_angle(ang)


def kt_check(x, xi, curve: Curve, m: int, tau_li=TAU_LI, **kwargs) -> KTReport:
    """Kirillov-Tuy check of order m at the single covector (x, xi).

    ``order_satisfied`` is the number of pairwise independent intersection
    directions minus one; the condition of order m holds iff it is >= m.
    """
    cov = Covector(x, xi)
    res = intersect(curve, cov.x, cov.xi, **kwargs)
    if res.degenerate[0]:
        return KTReport(cov, np.empty(0), np.empty((0, 3)), -1, float("nan"), degenerate=True)
    ts = res.t[res.cov == 0]
    dirs, order, ang = _kt_from_roots(cov.x, cov.xi_hat, curve, ts, tau_li)
    return KTReport(cov, ts, dirs, order, ang)


def _classify_one(kinds, sigma, order, m, degenerate, tau_t, xi0_factor):
    if degenerate or np.any(kinds == Kind.DEGENERATE):
        return VisClass.DEGENERATE, 0.0, False
    if kinds.size == 0 or order < m:
        return VisClass.INVISIBLE, 0.0, False
    margin = float(np.min(np.abs(sigma)))
    if np.all(kinds == Kind.TRANSVERSAL):
        return VisClass.XI_DELTA, margin, margin > xi0_factor * tau_t
    return VisClass.XI_LAMBDA, margin, False


def classify_covector(x, xi, curve: Curve, m: int, tau_li=TAU_LI, tau_t=TAU_TANGENT,
                      tau_c=TAU_CURVATURE, xi0_factor=XI0_FACTOR, **kwargs) -> VisibilityReport:
    cov = Covector(x, xi)
    res = intersect(curve, cov.x, cov.xi, tau_t=tau_t, tau_c=tau_c, **kwargs)
    if res.degenerate[0]:
        deg = [PlaneIntersection(float("nan"), Kind.DEGENERATE, float("nan"), float("nan"))]
        return VisibilityReport(cov, VisClass.DEGENERATE, deg, -1, 0.0, False)
    sel = res.cov == 0
    _, order, _ = _kt_from_roots(cov.x, cov.xi_hat, curve, res.t[sel], tau_li)
    cls, margin, xi0 = _classify_one(res.kind[sel], res.sigma[sel], order, m, False, tau_t, xi0_factor)
    return VisibilityReport(cov, cls, res.for_covector(0), order, margin, xi0)


@dataclass
class BatchClassification:
    cls: np.ndarray         # object array of VisClass
    kt_order: np.ndarray
    margin: np.ndarray
    in_xi0: np.ndarray
    count: np.ndarray       # intersections per covector


def classify_batch(x, xi, curve: Curve, m: int, tau_li=TAU_LI, tau_t=TAU_TANGENT,
                   tau_c=TAU_CURVATURE, xi0_factor=XI0_FACTOR,
                   samples_per_unit=ATLAS_SAMPLES_PER_UNIT) -> BatchClassification:
    """Classify many covectors with one batched root search."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    x, xi = np.broadcast_arrays(x, xi)
    res = intersect(curve, x, xi, samples_per_unit=samples_per_unit, tau_t=tau_t, tau_c=tau_c)
    n = x.shape[0]
    xh = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    bounds = np.searchsorted(res.cov, np.arange(n + 1))
    cls = np.empty(n, dtype=object)
    order = np.full(n, -1, dtype=np.int64)
    margin = np.zeros(n)
    xi0 = np.zeros(n, dtype=bool)
    for b in range(n):
        lo, hi = bounds[b], bounds[b + 1]
        if not res.degenerate[b] and hi > lo:
            _, order[b], _ = _kt_from_roots(x[b], xh[b], curve, res.t[lo:hi], tau_li)
        cls[b], margin[b], xi0[b] = _classify_one(res.kind[lo:hi], res.sigma[lo:hi], order[b], m,
                                                  bool(res.degenerate[b]), tau_t, xi0_factor)
    return BatchClassification(cls, order, margin, xi0, np.diff(bounds))


def sample_covectors(rng, center, radius, n):
    """Uniform points in the ball and uniform unit directions."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    xi = rng.standard_normal((n, 3))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    return center + r[:, None] * d, xi


@dataclass
class AtlasSummary:
    m: int
    n_samples: int = 0
    counts: dict = field(default_factory=lambda: {c: 0 for c in _CLASSES})
    kt_satisfied: int = 0
    xi0: int = 0
    max_intersections: int = 0
    examples: dict = field(default_factory=lambda: {c: [] for c in _CLASSES})
    max_examples: int = 5

    def merge(self, other: "AtlasSummary"):
        self.n_samples += other.n_samples
        for c in _CLASSES:
            self.counts[c] += other.counts[c]
            room = self.max_examples - len(self.examples[c])
            self.examples[c].extend(other.examples[c][:max(room, 0)])
        self.kt_satisfied += other.kt_satisfied
        self.xi0 += other.xi0
        self.max_intersections = max(self.max_intersections, other.max_intersections)
        return self

    def fractions(self):
        n = max(self.n_samples, 1)
        return {c: self.counts[c] / n for c in _CLASSES}

    @property
    def kt_fraction(self):
        """Fraction of non-degenerate samples satisfying the order-m condition."""
        nd = self.n_samples - self.counts[VisClass.DEGENERATE]
        return self.kt_satisfied / nd if nd else 0.0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "count", "fraction", "examples"])
        fr = self.fractions()
        for c in _CLASSES:
            ex = ";".join(" ".join(f"{v:.6g}" for v in np.concatenate([x, xi]))
                          for x, xi in self.examples[c])
            w.writerow([c.value, self.counts[c], f"{fr[c]:.6f}", ex])
        w.writerow(["kt_satisfied", self.kt_satisfied, f"{self.kt_fraction:.6f}", ""])
        w.writerow(["xi0", self.xi0, f"{self.xi0 / max(self.n_samples, 1):.6f}", ""])
        w.writerow(["max_intersections", self.max_intersections, "", ""])
        return buf.getvalue()


def _atlas_chunk(rng, center, radius, curve, m, n, max_examples, **kwargs):
    x, xi = sample_covectors(rng, center, radius, n)
    bc = classify_batch(x, xi, curve, m, **kwargs)
    s = AtlasSummary(m, n_samples=n, max_examples=max_examples)
    for c in _CLASSES:
        idx = np.array([i for i, k in enumerate(bc.cls) if k is c], dtype=np.int64)
        s.counts[c] = int(idx.size)
        s.examples[c] = [(x[i].copy(), xi[i].copy()) for i in idx[:max_examples]]
    nondeg = np.array([k is not VisClass.DEGENERATE for k in bc.cls], dtype=bool)
    s.kt_satisfied = int(np.sum(nondeg & (bc.kt_order >= m)))
    s.xi0 = int(bc.in_xi0.sum())
    s.max_intersections = int(bc.count.max()) if n else 0
    return s


def visibility_atlas(center, radius, curve: Curve, m: int, n_samples: int, seed=0, chunk=2000,
                     max_examples=5, **kwargs) -> AtlasSummary:
    """Monte-Carlo classification of covectors over the ball B(center, radius).

    Each chunk draws from its own child seed so the result does not depend on
    how chunks are scheduled; partial summaries are merged in chunk order.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    nchunks = (n_samples + chunk - 1) // chunk
    seeds = np.random.SeedSequence(seed).spawn(nchunks)
    total = AtlasSummary(m, max_examples=max_examples)
    for c, ss in enumerate(seeds):
        n = min(chunk, n_samples - c * chunk)
        total.merge(_atlas_chunk(np.random.default_rng(ss), center, radius, curve, m, n,
                                 max_examples, **kwargs))
    return total
