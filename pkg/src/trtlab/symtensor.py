"""Symmetric tensor algebra over R^3.

A symmetric m-tensor is stored by its unique components, one per multi-index
(a, b, c) with a + b + c = m, where a, b, c count how often coordinates 1, 2, 3
occur among the m slots. Components are stored *unweighted*: the component at
(a, b, c) is f_{1..1 2..2 3..3}. Multinomial multiplicities m!/(a! b! c!) enter
only through :func:`weighted_inner`, so that

    weighted_inner(sym_power(u, m), sym_power(v, m)) == dot(u, v) ** m.

Ordering is lexicographic with descending exponent of coordinate 1, then of
coordinate 2. For m = 2 that is (2,0,0), (1,1,0), (1,0,1), (0,2,0), (0,1,1),
(0,0,2).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial

import numpy as np


def dim_sym(m: int) -> int:
    """Number of unique components of a symmetric m-tensor in R^3."""
    if m < 0:
        raise ValueError("tensor order must be non-negative")
    return (m + 1) * (m + 2) // 2


@lru_cache(maxsize=None)
def _multi_indices(m):
    out = []
    for a in range(m, -1, -1):
        for b in range(m - a, -1, -1):
            out.append((a, b, m - a - b))
    arr = np.array(out, dtype=np.int64).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


def multi_indices(m: int) -> np.ndarray:
    """(N, 3) array of exponent triples in storage order (read-only)."""
    if m < 0:
        raise ValueError("tensor order must be non-negative")
    return _multi_indices(m)


def multiplicity(a: int, b: int, c: int) -> int:
    return factorial(a + b + c) // (factorial(a) * factorial(b) * factorial(c))


@lru_cache(maxsize=None)
def _multiplicities(m):
    arr = np.array([multiplicity(*map(int, idx)) for idx in multi_indices(m)], dtype=np.float64)
    arr.setflags(write=False)
    return arr


def multiplicities(m: int) -> np.ndarray:
    return _multiplicities(m)


def rank_of(a: int, b: int, c: int) -> int:
    """Position of multi-index (a, b, c) in storage order."""
    m = a + b + c
    if min(a, b, c) < 0:
        raise ValueError("exponents must be non-negative")
    # rows with first exponent > a come first: sum_{a'=a+1}^{m} (m - a' + 1)
    before = (m - a) * (m - a + 1) // 2
    return before + (m - a - b)


def unrank(r: int, m: int) -> tuple[int, int, int]:
    if not 0 <= r < dim_sym(m):
        raise IndexError(f"rank {r} out of range for order {m}")
    return tuple(int(v) for v in multi_indices(m)[r])


def index_tuple_to_rank(idx) -> int:
    """Rank of the multi-index counting a full index tuple (entries in 0..2)."""
    counts = [0, 0, 0]
    for j in idx:
        counts[j] += 1
    return rank_of(*counts)


@dataclass(frozen=True)
class SymTensor:
    order: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if c.size != dim_sym(self.order):
            raise ValueError(
                f"order {self.order} needs {dim_sym(self.order)} components, got {c.size}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, m):
        return cls(m, np.zeros(dim_sym(m)))

    @classmethod
    def basis(cls, m, r):
        c = np.zeros(dim_sym(m))
        c[r] = 1.0
        return cls(m, c)

    def __getitem__(self, idx):
        """Component at a multi-index (a, b, c)."""
        return self.coeffs[rank_of(*idx)]

    def __add__(self, other):
        _check_same_order(self, other)
        return SymTensor(self.order, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same_order(self, other)
        return SymTensor(self.order, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return SymTensor(self.order, self.coeffs * float(s))

    __rmul__ = __mul__

    def full(self) -> np.ndarray:
        """Dense 3^m array with all index permutations filled in."""
        m = self.order
        out = np.empty((3,) * m) if m else np.empty(())
        for idx in itertools.product(range(3), repeat=m):
            out[idx] = self.coeffs[index_tuple_to_rank(idx)]
        return out

    @classmethod
    def from_full(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        m = arr.ndim
        coeffs = np.empty(dim_sym(m))
        for r, (a, b, c) in enumerate(multi_indices(m)):
            coeffs[r] = arr[(0,) * a + (1,) * b + (2,) * c]
        return cls(m, coeffs)


def _check_same_order(s, t):
    if s.order != t.order:
        raise ValueError(f"order mismatch: {s.order} vs {t.order}")


def power_components(v, p: int) -> np.ndarray:
    """Unweighted components of v^{(.)p} for one vector or a stack of shape (..., 3)."""
    v = np.asarray(v, dtype=np.float64)
    idx = multi_indices(p)
    pw = v[..., None, :] ** idx  # (..., N, 3)
    return pw.prod(axis=-1)


def sym_power(v, p: int) -> SymTensor:
    if p < 0:
        raise ValueError("power must be non-negative")
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return SymTensor(p, power_components(v, p))


@lru_cache(maxsize=None)
def _product_table(p, q):
    """Rows (rank_s, rank_t, rank_out, coef) for the symmetrized product."""
    mp, mq, mpq = multiplicities(p), multiplicities(q), multiplicities(p + q)
    rows = []
    for i, beta in enumerate(multi_indices(p)):
        for j, gamma in enumerate(multi_indices(q)):
            k = rank_of(*(beta + gamma))
            rows.append((i, j, k, mp[i] * mq[j] / mpq[k]))
    ii = np.array([r[0] for r in rows], dtype=np.int64)
    jj = np.array([r[1] for r in rows], dtype=np.int64)
    kk = np.array([r[2] for r in rows], dtype=np.int64)
    cc = np.array([r[3] for r in rows])
    return ii, jj, kk, cc


def sym_product(s: SymTensor, t: SymTensor) -> SymTensor:
    """Symmetrized tensor product; e1 (.) e2 has component 1/2 at (1,1,0)."""
    ii, jj, kk, cc = _product_table(s.order, t.order)
    out = np.zeros(dim_sym(s.order + t.order))
    np.add.at(out, kk, cc * s.coeffs[ii] * t.coeffs[jj])
    return SymTensor(s.order + t.order, out)


def weighted_inner(s: SymTensor, t: SymTensor) -> float:
    _check_same_order(s, t)
    return float(np.dot(multiplicities(s.order) * s.coeffs, t.coeffs))


def contract_full(t: SymTensor, vs) -> float:
    """t_{j1..jm} v1^{j1} ... vm^{jm}, summed over all index tuples."""
    vs = [np.asarray(v, dtype=np.float64).reshape(3) for v in vs]
    if len(vs) != t.order:
        raise ValueError(f"need {t.order} vectors, got {len(vs)}")
    acc = SymTensor(0, [1.0])
    for v in vs:
        acc = sym_product(acc, SymTensor(1, v))
    return weighted_inner(t, acc)


@lru_cache(maxsize=None)
def pattern_table(m):
    """Index table for the weighted frame patterns used by the transforms.

    For i = 0..m the weighted pattern of (u, v) is

        W_i[alpha] = sum_{beta + gamma = alpha} mult(beta) mult(gamma) u^beta v^gamma,

    with |beta| = m - i and |gamma| = i. It satisfies
    sum_alpha f[alpha] W_i[alpha] = f(u, .., u, v, .., v) for stored components f.
    Returned arrays are flat with ``start[i]:start[i+1]`` selecting pattern i.
    """
    alpha, beta, gamma, coef, start = [], [], [], [], [0]
    for i in range(m + 1):
        p, q = m - i, i
        mp, mq = multiplicities(p), multiplicities(q)
        for bi, b in enumerate(multi_indices(p)):
            for gi, g in enumerate(multi_indices(q)):
                alpha.append(rank_of(*(b + g)))
                beta.append(b)
                gamma.append(g)
                coef.append(mp[bi] * mq[gi])
        start.append(len(alpha))
    return (np.array(alpha, dtype=np.int64),
            np.array(beta, dtype=np.int64).reshape(-1, 3),
            np.array(gamma, dtype=np.int64).reshape(-1, 3),
            np.array(coef, dtype=np.float64),
            np.array(start, dtype=np.int64))


def weighted_patterns(u, v, m: int) -> np.ndarray:
    """Weighted patterns W_i of frames (u, v); shape (..., m+1, N)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    alpha, beta, gamma, coef, start = pattern_table(m)
    mono = coef * np.prod(u[..., None, :] ** beta, axis=-1) * np.prod(v[..., None, :] ** gamma, axis=-1)
    out = np.empty(u.shape[:-1] + (m + 1, dim_sym(m)))
    scatter = _pattern_scatter(m)
    for i in range(m + 1):
        out[..., i, :] = mono[..., start[i]:start[i + 1]] @ scatter[i]
    return out


@lru_cache(maxsize=None)
def _pattern_scatter(m):
    alpha, _, _, _, start = pattern_table(m)
    mats = []
    for i in range(m + 1):
        s = np.zeros((start[i + 1] - start[i], dim_sym(m)))
        s[np.arange(s.shape[0]), alpha[start[i]:start[i + 1]]] = 1.0
        mats.append(s)
    return mats


@dataclass
class SymTensorField:
    """Symmetric tensor field sampled at voxel centers.

    ``origin`` is the center of voxel (0, 0, 0); voxel (i, j, k) sits at
    ``origin + (i, j, k) * spacing``. ``data`` has shape (nx, ny, nz, N).
    """
    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    order: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.data.ndim != 4 or self.data.shape[3] != dim_sym(self.order):
            raise ValueError(
                f"data must have shape (nx, ny, nz, {dim_sym(self.order)}), got {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field values must be finite")

    @classmethod
    def zeros(cls, shape, spacing, origin, order):
        return cls(np.zeros(tuple(shape) + (dim_sym(order),)), spacing, origin, order)

    @classmethod
    def centered(cls, n, half_width, order):
        """Zero field on a cube [-half_width, half_width]^3 split into n^3 voxels."""
        h = 2.0 * half_width / n
        o = -half_width + 0.5 * h
        return cls.zeros((n, n, n), (h, h, h), (o, o, o), order)

    @property
    def shape(self):
        return self.data.shape[:3]

    def like(self, data=None):
        return SymTensorField(np.zeros_like(self.data) if data is None else data,
                              self.spacing.copy(), self.origin.copy(), self.order)

    def axes(self):
        return [self.origin[k] + self.spacing[k] * np.arange(self.shape[k]) for k in range(3)]

    def positions(self):
        """Voxel center coordinates, shape (nx, ny, nz, 3)."""
        gx, gy, gz = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def diameter(self):
        return float(np.linalg.norm(self.spacing * np.array(self.shape)))

    def inner(self, other):
        """Plain sum over voxels and stored components (the discrete adjoint pairing)."""
        return float(np.vdot(self.data, other.data))
