import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trtlab import _accel
from trtlab.geometry import Circle, Helix, frame_from_angles
from trtlab.parametrix import make_phantom
from trtlab.symtensor import SymTensorField, contract_full, SymTensor
from trtlab.transform import (AcquisitionGeometry, Mode, Sinogram, backproject, chord_length, forward,
                              normal, point_response, trt_line)

CURVE = Helix(1.8, 0.4, 1.0, axis="z")


def small_geom(n=16, n_t=6, n1=5, n2=8):
    grid = SymTensorField.centered(n, 1.0, 0)
    return AcquisitionGeometry(CURVE, n_t, n1, n2, ds=0.5 * float(grid.spacing[0]))


def random_field(rng, n, m):
    f = SymTensorField.centered(n, 1.0, m)
    return f.like(rng.standard_normal(f.data.shape))


def test_trt_line_brute_force(rng):
    """Line integral equals a fine midpoint sum of the trilinear interpolant contracted with the frame."""
    from scipy.interpolate import RegularGridInterpolator

    for m in (0, 1, 2):
        f = random_field(rng, 12, m)
        p0 = np.array([0.1, -0.2, 0.05])
        th1, th2 = 1.1, 0.7
        ds = 1e-3
        got = trt_line(f, p0 - 3 * frame_from_angles(th1, th2).omega, th1, th2, ds)
        fr = frame_from_angles(th1, th2)
        s = np.arange(-6.0, 6.0, ds) + 0.5 * ds
        pts = p0 - 3 * fr.omega + s[:, None] * fr.omega
        # the interpolant is zero-extended one voxel past the outer centers
        axes = [np.concatenate([[a[0] - h], a, [a[-1] + h]]) for a, h in zip(f.axes(), f.spacing)]
        padded = np.pad(f.data, ((1, 1), (1, 1), (1, 1), (0, 0)))
        interp = RegularGridInterpolator(axes, padded, bounds_error=False, fill_value=0.0)
        vals = interp(pts)
        for i in range(m + 1):
            vs = [fr.omega1] * (m - i) + [fr.omega2] * i
            integrand = [contract_full(SymTensor(m, v), vs) for v in vals] if m else vals[:, 0]
            expect = ds * np.sum(integrand)
            assert got[i] == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_trt_line_chord_length():
    f = make_phantom([{"kind": "ball", "center": [0, 0, 0], "radius": 1.0, "amplitude": [1.0]}],
                     SymTensorField.centered(96, 1.2, 0))
    ds = 0.5 * float(f.spacing[0])
    for th1, th2 in [(math.pi / 2, 0.0), (0.9, 2.1), (1.3, 4.0)]:
        w = frame_from_angles(th1, th2).omega
        val = trt_line(f, -5 * w, th1, th2, ds)[0]
        assert abs(val - 2.0) < 2 * ds


def test_trt_line_missing_support():
    f = SymTensorField.centered(8, 1.0, 2)
    f.data[:] = 1.0
    np.testing.assert_array_equal(trt_line(f, [0, 0, 5.0], 0.5, 0.3, 0.01), np.zeros(3))


def test_forward_chords_match_analytic():
    grid = SymTensorField.centered(64, 1.1, 0)
    center, radius = np.array([0.1, -0.05, 0.0]), 0.6
    f = make_phantom([{"kind": "ball", "center": center, "radius": radius, "amplitude": [1.0]}], grid)
    geom = AcquisitionGeometry(Circle(3.0), 8, 24, 32, ds=0.5 * float(grid.spacing[0]))
    g = forward(f, geom).values[0]
    pts = geom.curve.point(geom.t_samples())
    w, _, _ = geom.directions()
    ref = np.array([[[chord_length(pts[k], w[a, b], center, radius) for b in range(geom.n2)]
                     for a in range(geom.n1)] for k in range(geom.n_t)])
    hit = ref > 0.2
    err = np.abs(g - ref)[hit]
    assert err.max() < 2 * float(grid.spacing[0])
    assert err.mean() < geom.ds


def test_forward_zero_and_outside():
    geom = small_geom()
    f = SymTensorField.centered(16, 1.0, 1)
    assert not np.any(forward(f, geom).values)
    # a box far along e1: reaching it needs directions near the pole, which the chart excludes
    far = SymTensorField.zeros((8, 8, 8), (0.1, 0.1, 0.1), (50.0, -0.35, -0.35), 1)
    far.data[:] = 1.0
    narrow = AcquisitionGeometry(CURVE, 6, 5, 8, theta_min=1.2, ds=0.05)
    assert not np.any(forward(far, narrow).values)


@pytest.mark.parametrize("m", [0, 1, 2])
def test_adjoint_exact(rng, m):
    geom = small_geom()
    for _ in range(3):
        f = random_field(rng, 16, m)
        g = Sinogram(rng.standard_normal((m + 1, geom.n_t, geom.n1, geom.n2)), geom)
        lhs = forward(f, geom).inner(g)
        rhs = float(np.vdot(f.data, backproject(g, geom, f).data))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


@pytest.mark.parametrize("m", [1, 2])
def test_normal_self_adjoint(rng, m):
    geom = small_geom()
    f, g = random_field(rng, 16, m), random_field(rng, 16, m)
    a = float(np.vdot(normal(f, geom).data, g.data))
    b = float(np.vdot(f.data, normal(g, geom).data))
    assert abs(a - b) <= 1e-10 * abs(a)
    np.testing.assert_allclose(normal(f, geom).data, backproject(forward(f, geom), geom, f).data, rtol=1e-12,
                               atol=1e-12)


@settings(max_examples=10)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    geom = small_geom(n_t=3, n1=4, n2=6)
    f, g = random_field(rng, 16, 1), random_field(rng, 16, 1)
    lin = forward(f.like(a * f.data + b * g.data), geom).values
    ref = a * forward(f, geom).values + b * forward(g, geom).values
    assert np.abs(lin - ref).max() <= 1e-12 * (1 + np.abs(ref).max())
    for mode in Mode:
        nl = normal(f.like(a * f.data + b * g.data), geom, mode).data
        nr = a * normal(f, geom, mode).data + b * normal(g, geom, mode).data
        assert np.abs(nl - nr).max() <= 1e-11 * (1 + np.abs(nr).max())


def test_zero_maps_to_zero():
    geom = small_geom()
    f = SymTensorField.centered(16, 1.0, 2)
    assert not np.any(normal(f, geom, Mode.GEOMETRIC).data)
    z = Sinogram(np.zeros((3, geom.n_t, geom.n1, geom.n2)), geom)
    for mode in Mode:
        out = backproject(z, geom, f, mode)
        assert out.data.shape == f.data.shape and not np.any(out.data)


def test_geometry_validation():
    with pytest.raises(ValueError):
        AcquisitionGeometry(CURVE, 0, 4, 4)
    with pytest.raises(ValueError):
        AcquisitionGeometry(CURVE, 4, 4, 4, theta_min=0.0)
    geom = AcquisitionGeometry(CURVE, 4, 4, 4, ds=0.5)
    with pytest.raises(ValueError):
        forward(SymTensorField.centered(16, 1.0, 0), geom)
    with pytest.raises(ValueError):
        Sinogram(np.zeros((1, 3, 4, 4)), geom)
    with pytest.raises(ValueError):
        backproject(Sinogram(np.zeros((1, 4, 4, 4)), geom), geom, SymTensorField.centered(4, 1.0, 0), "bogus")


def test_geometric_skips_directions_outside_chart():
    # a circle in the x = 0 plane sees directions near +-e1 which fall outside theta_min
    geom = AcquisitionGeometry(Circle(2.0, axis="x"), 4, 4, 8, theta_min=1.2, ds=0.05)
    f = SymTensorField.centered(8, 1.0, 0)
    g = Sinogram(np.ones((1, 4, 4, 8)), geom)
    _, skipped = backproject(g, geom, f, Mode.GEOMETRIC, return_skipped=True)
    assert skipped > 0


def test_geometric_converges_to_symbol_on_refinement():
    """Point response of a smooth bump stabilizes as the angular sampling is refined."""
    grid = SymTensorField.centered(32, 1.0, 0)
    prof = np.exp(-np.sum(grid.positions() ** 2, -1) / (2 * 0.2 ** 2))
    vals = []
    for n1 in (64, 128, 256, 512):
        geom = AcquisitionGeometry(CURVE, 256, n1, 2 * n1, ds=0.5 * float(grid.spacing[0]))
        vals.append(point_response(prof, grid.spacing, grid.origin, geom, [0.02, 0.01, 0.0], 0)[0, 0])
    d = np.abs(np.diff(vals))
    assert d[-1] < d[0]
    assert d[-1] < 1e-2 * abs(vals[-1])


@pytest.mark.parametrize("m", [0, 2])
def test_numba_matches_numpy(rng, m):
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    geom = small_geom(n_t=3)
    f = random_field(rng, 16, m)
    out = {}
    prev = _accel.get_backend()
    try:
        for be in ("numba", "numpy"):
            _accel.set_backend(be)
            out[be] = (forward(f, geom).values, normal(f, geom).data, normal(f, geom, Mode.GEOMETRIC).data)
    finally:
        _accel.set_backend(prev)
    for a, b in zip(out["numba"], out["numpy"]):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11 * np.abs(b).max())
