"""Brute-force reference computations shared by the unit and acceptance tests.

Nothing here reuses the package's assembly code: roots come from a fine scan
plus scipy's brentq, tensors are handled as dense 3^m arrays over ordered
index tuples, and multiplicities are recomputed by counting tuples.
"""
import itertools
import math

import numpy as np
from scipy.optimize import brentq


def plane_roots(curve, x, xi, n=200_001):
    """Parameters t with (gamma(t) - x) . xi_hat = 0, by scan and brentq."""
    xh = np.asarray(xi, float) / np.linalg.norm(xi)
    x = np.asarray(x, float)
    ts = np.linspace(curve.t_min, curve.t_max, n)
    h = (curve.point(ts) - x) @ xh
    roots = []
    for i in np.nonzero(h[:-1] * h[1:] < 0)[0]:
        roots.append(brentq(lambda t: float((curve.point(t) - x) @ xh), ts[i], ts[i + 1], xtol=1e-15))
    return np.array(roots)


def tuples_by_component(m):
    """Map from exponent triple (a, b, c) to the list of ordered index tuples it collects."""
    groups = {}
    for tup in itertools.product(range(3), repeat=m):
        key = (tup.count(0), tup.count(1), tup.count(2))
        groups.setdefault(key, []).append(tup)
    return groups


def lex_components(m):
    """Exponent triples in descending-x1-then-x2 order."""
    return [(a, b, m - a - b) for a in range(m, -1, -1) for b in range(m - a, -1, -1)]


def dense_pattern(vectors):
    """Ordered outer product v_1 x ... x v_m as a dict tuple -> value."""
    m = len(vectors)
    return {tup: float(np.prod([vectors[j][tup[j]] for j in range(m)])) for tup in itertools.product(range(3), repeat=m)}


def symbol_entrywise(curve, x, xi, m):
    """A0 in orthonormal coordinates by summing the entry formula over all index tuples.

    Entry (J, L) of the quadratic form is sum_k w_k sum_i T_ik[a] T_ik[b] over
    ordered tuples a in J, b in L, with T_ik = omega1^(m-i) omega2^i (ordered
    outer product) and w_k = 2 pi / (|xi| |gamma'(t_k).xi_hat| |gamma(t_k) - x|).
    Converting to orthonormal coordinates divides by sqrt(mult_J mult_L).
    """
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    xh = xi / np.linalg.norm(xi)
    comps = lex_components(m)
    groups = tuples_by_component(m)
    N = len(comps)
    A = np.zeros((N, N))
    for t in plane_roots(curve, x, xi):
        g = curve.point(t)
        d = x - g
        r = np.linalg.norm(d)
        om = d / r
        om1 = np.cross(xh, om)
        w = 2 * math.pi / (np.linalg.norm(xi) * abs(curve.tangent(t) @ xh) * r)
        for i in range(m + 1):
            T = dense_pattern([om1] * (m - i) + [xh] * i)
            # sum over tuples within each component class
            s = np.array([sum(T[a] for a in groups[c]) for c in comps])
            mult = np.array([len(groups[c]) for c in comps], float)
            # f(T) = sum_J f_J * sum_{a in J} T[a] = sum_J f~_J s_J / sqrt(mult_J)
            v = s / np.sqrt(mult)
            A += w * np.outer(v, v)
    return A
