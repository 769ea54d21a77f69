"""Acceptance criteria 1-9, one test (and one summary line) per criterion.

Criteria 6 and 7 are long runs (minutes); they are marked ``slow`` but run by
default. Tolerances are the ones stated in the criteria.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from trtlab.config import ExperimentConfig
from trtlab.geometry import Helix
from trtlab.parametrix import (ball_artifact_metrics, make_phantom, predict_artifacts,
                               reconstruct, sphere_samples)
from trtlab.symbol import oscillatory_probe, principal_symbol, pseudoinverse_symbol, rank_check
from trtlab.symtensor import SymTensorField, dim_sym
from trtlab.transform import AcquisitionGeometry, Sinogram, backproject, chord_length, forward
from trtlab.visibility import classify_batch, sample_covectors

from oracles import plane_roots, symbol_entrywise

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
HELIX_ATLAS = Helix(2.0, 0.5, 2.0, axis="z")
PROBE_CURVE = Helix(3.0, 0.25, 2.0, axis="x")
PROBE_COVECTORS = [([0.05, -0.03, 0.02], [0.2, 1.0, 0.3]),
                   ([-0.08, 0.06, 0.04], [-0.1, 0.5, -1.0]),
                   ([0.02, 0.09, -0.07], [0.35, -0.7, 0.6])]
PROBE_LAMBDAS = [6.0, 12.0, 24.0]


def record(request, crit, detail):
    request.node.user_properties.append(("criterion", crit))
    request.node.user_properties.append(("detail", detail))


def xi0_covectors(n, m, seed=0):
    """n covectors in Xi_0 (XiDelta with margin) over the unit ball, helix about z."""
    rng = np.random.default_rng(seed)
    x, xi = sample_covectors(rng, np.zeros(3), 1.0, 20 * n)
    bc = classify_batch(x, xi, HELIX_ATLAS, m)
    keep = np.nonzero(bc.in_xi0)[0]
    assert keep.size >= n
    return x[keep[:n]], xi[keep[:n]]


# --------------------------------------------------------------------------- 1

def test_criterion_1_rank_checks(request):
    t0 = time.perf_counter()
    fails = {}
    for m in (1, 2, 3, 4):
        rep = rank_check(m, 100, rng_seed=m)
        ok_U = np.all(rep.rank_U == np.arange(1, m + 2)[None, :])
        ok_P = np.all(rep.rank_P == dim_sym(m))
        fails[m] = rep.failures + int(not ok_U) + int(not ok_P)
    dt = time.perf_counter() - t0
    record(request, 1, f"failures per m {fails}, {dt:.1f} s")
    assert sum(fails.values()) == 0 and dt < 60


# --------------------------------------------------------------------------- 2

def test_criterion_2_factorization_vs_entrywise(request):
    t0 = time.perf_counter()
    worst = 0.0
    for m in (0, 1, 2, 3):
        x, xi = xi0_covectors(50, m, seed=10 + m)
        for xx, v in zip(x, xi):
            S, F = principal_symbol(xx, v, HELIX_ATLAS, m, return_factor=True)
            ref = symbol_entrywise(HELIX_ATLAS, xx, v, m)
            worst = max(worst, np.abs(F.P @ F.P.T - ref).max() / np.abs(ref).max())
            worst = max(worst, np.abs(S.entries - ref).max() / np.abs(ref).max())
    dt = time.perf_counter() - t0
    record(request, 2, f"max relative deviation {worst:.2e} over 4 x 50 covectors, {dt:.1f} s")
    assert worst < 1e-10 and dt < 60


# --------------------------------------------------------------------------- 3

def test_criterion_3_homogeneity_positivity(request):
    worst_h, worst_neg, min_rank = 0.0, 0.0, 99
    for m in (0, 1, 2, 3):
        x, xi = xi0_covectors(50, m, seed=20 + m)
        for xx, v in zip(x, xi):
            S = principal_symbol(xx, v, HELIX_ATLAS, m)
            A = S.entries
            for s in (0.5, 2.0, 10.0):
                As = principal_symbol(xx, s * v, HELIX_ATLAS, m).entries
                worst_h = max(worst_h, np.abs(s * As - A).max() / np.abs(A).max())
            worst_neg = max(worst_neg, -S.eigenvalues[-1] / S.eigenvalues[0])
            min_rank = min(min_rank, S.rank - dim_sym(m))
    record(request, 3, f"homogeneity {worst_h:.2e}, most negative eigenvalue {-worst_neg:.2e} lambda_max, "
                       f"rank deficit {-min_rank}")
    assert worst_h < 1e-8 and worst_neg <= 1e-10 and min_rank == 0


# --------------------------------------------------------------------------- 4

def test_criterion_4_pseudoinverse(request):
    worst, used, worst_cond = 0.0, 0, 0.0
    for m in (0, 1, 2, 3):
        x, xi = xi0_covectors(50, m, seed=20 + m)
        for xx, v in zip(x, xi):
            A = principal_symbol(xx, v, HELIX_ATLAS, m)
            if not A.condition < 1e6:
                continue
            B = pseudoinverse_symbol(A, 1e6)
            err = np.linalg.norm(B.entries @ A.entries - np.eye(dim_sym(m)), 2)
            worst, used, worst_cond = max(worst, err), used + 1, max(worst_cond, A.condition)
    record(request, 4, f"max ||B0 A0 - Id|| = {worst:.2e} over {used} covectors (max condition {worst_cond:.2e})")
    assert used >= 150 and worst < 1e-10


# --------------------------------------------------------------------------- 5

def test_criterion_5_adjoint(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    grid0 = SymTensorField.centered(16, 1.0, 0)
    geom = AcquisitionGeometry(Helix(1.8, 0.4, 1.0, axis="z"), 8, 6, 10, ds=0.5 * float(grid0.spacing[0]))
    worst = 0.0
    for m in (0, 1, 2):
        for _ in range(20):
            f = SymTensorField.centered(16, 1.0, m)
            f = f.like(rng.standard_normal(f.data.shape))
            g = Sinogram(rng.standard_normal((m + 1, geom.n_t, geom.n1, geom.n2)), geom)
            lhs = forward(f, geom).inner(g)
            rhs = float(np.vdot(f.data, backproject(g, geom, f).data))
            worst = max(worst, abs(lhs - rhs) / abs(lhs))
    dt = time.perf_counter() - t0
    record(request, 5, f"max relative adjoint error {worst:.2e} over 3 x 20 pairs, {dt:.1f} s")
    assert worst < 1e-10 and dt < 60


# --------------------------------------------------------------------------- 6 (and the m = 0 part of 8)

_probe_cache = {}


def probe_results():
    """Probes at three Xi_0 covectors for m = 0, 1, 2 with a single global constant c."""
    if "res" in _probe_cache:
        return _probe_cache["res"]
    t0 = time.perf_counter()
    geom = AcquisitionGeometry(PROBE_CURVE, 4096, 2048, 4096, theta_min=0.05, ds=1 / 128)
    res = {}
    for m in (0, 1, 2):
        for i, (x0, xi) in enumerate(PROBE_COVECTORS):
            res[m, i] = oscillatory_probe(x0, xi, PROBE_LAMBDAS, m, geom, n=128, half_width=1.0, window=(0.05, 0.9))
    # one constant for everything: least squares over the top-lambda measurements
    num = sum(float(np.vdot(r.measured[-1], r.A0)) for r in res.values())
    den = sum(float(np.vdot(r.A0, r.A0)) for r in res.values())
    c = num / den
    for r in res.values():
        r.fit(c)
    _probe_cache["res"] = (res, c, time.perf_counter() - t0)
    return _probe_cache["res"]


def test_probe_covectors_in_xi0():
    x = np.array([p[0] for p in PROBE_COVECTORS], float)
    xi = np.array([p[1] for p in PROBE_COVECTORS], float)
    bc = classify_batch(x, xi, PROBE_CURVE, 2)
    assert all(bc.in_xi0)


def check_probe(res, c, ms):
    lines, ok = [], True
    for (m, i), r in res.items():
        if m not in ms:
            continue
        dev = r.deviations
        good = dev[-1] < 0.10 and np.all(np.diff(dev) < 0)
        ok &= bool(good)
        lines.append(f"m{m}/cov{i}: " + "/".join(f"{d:.3f}" for d in dev))
    return ok, f"c = {c:.4f}; deviations at lambda {PROBE_LAMBDAS}: " + "; ".join(lines)


@pytest.mark.slow
def test_criterion_6_symbol_oracle(request):
    res, c, dt = probe_results()
    ok, detail = check_probe(res, c, (0, 1, 2))
    record(request, 6, detail + f"; {dt:.0f} s")
    assert ok and dt < 1800


# --------------------------------------------------------------------------- 7

def run_ball(m):
    cfg = ExperimentConfig.load(CONFIGS / f"ball_m{m}.json")
    t0 = time.perf_counter()
    grid = cfg.make_grid()
    geom = cfg.make_geometry(grid)
    rcfg = cfg.make_recon_config()
    prim = cfg.phantom[0]
    ph = make_phantom(cfg.phantom, grid, cfg.make_ball())
    rec, rep, table = reconstruct(ph, geom, rcfg)
    h = float(grid.spacing.max())
    pts, nrm = sphere_samples(prim["center"], prim["radius"], cfg.analysis.surface_samples)
    hi = grid.origin + (np.array(grid.shape) - 1) * grid.spacing
    pred = predict_artifacts(pts, nrm, geom.curve, (grid.origin, hi), h / 2, h)
    met = ball_artifact_metrics(ph, rec, prim["center"], prim["radius"], table, geom.curve, m, rcfg, pred,
                                band=cfg.analysis.band, dilate=cfg.analysis.dilate,
                                threshold=cfg.analysis.threshold, t_weight=geom.t_weight,
                                highpass=cfg.analysis.highpass, region=cfg.make_ball())
    return met, rep, time.perf_counter() - t0


@pytest.mark.slow
@pytest.mark.parametrize("m", [1, 2])
def test_criterion_7_ball_phantom(request, m):
    met, rep, dt = run_ball(m)
    vis_frac = met.visible_band_voxels / met.band_voxels
    record(request, f"7 (m={m})",
           f"edge NCC {met.edge_ncc:.3f} (>= 0.8), confinement {met.confinement:.3f} (>= 0.9), "
           f"visible band {met.visible_band_voxels}/{met.band_voxels} = {vis_frac:.2f} (>= 0.5), "
           f"allowed volume share {met.allowed_fraction:.2f}, calibration {rep.calibration:.3f}, {dt:.0f} s")
    # the visible-band guard keeps the metrics from passing on a near-empty Xi_0
    assert met.edge_ncc >= 0.8 and met.confinement >= 0.9 and vis_frac >= 0.5 and dt < 1800


# --------------------------------------------------------------------------- 8

def chord_errors(n):
    grid = SymTensorField.centered(n, 1.1, 0)
    center, radius = np.array([0.1, -0.05, 0.0]), 0.6
    f = make_phantom([{"kind": "ball", "center": center, "radius": radius, "amplitude": [1.0]}], grid)
    geom = AcquisitionGeometry(PROBE_CURVE, 12, 24, 32, ds=0.5 * float(grid.spacing[0]))
    g = forward(f, geom).values[0]
    pts = geom.curve.point(geom.t_samples())
    w, _, _ = geom.directions()
    ref = np.array([[[chord_length(pts[k], w[a, b], center, radius) for b in range(geom.n2)]
                     for a in range(geom.n1)] for k in range(geom.n_t)])
    hit = ref > 0.1
    return float(np.abs(g - ref)[hit].mean()), float(np.abs(g - ref)[hit].max()), geom.ds


@pytest.mark.slow
def test_criterion_8_scalar_case(request):
    # chord-length sinograms: mean error below ds and first order in ds; the
    # maximum (near-grazing rays through partial boundary voxels) within two voxels
    e_mean0, e_max0, ds0 = chord_errors(32)
    e_mean1, e_max1, ds1 = chord_errors(64)
    chords_ok = (e_mean0 < ds0 and e_mean1 < ds1 and e_mean0 / e_mean1 >= 1.8
                 and e_max0 < 4 * ds0 and e_max1 < 4 * ds1)
    # scalar symbol formula
    worst = 0.0
    x, xi = xi0_covectors(20, 0, seed=8)
    for xx, v in zip(x, xi):
        xh = v / np.linalg.norm(v)
        ref = sum(2 * math.pi / (np.linalg.norm(v) * abs(HELIX_ATLAS.tangent(t) @ xh)
                                 * np.linalg.norm(HELIX_ATLAS.point(t) - xx)) for t in plane_roots(HELIX_ATLAS, xx, v))
        worst = max(worst, abs(principal_symbol(xx, v, HELIX_ATLAS, 0).entries[0, 0] - ref) / ref)
    res, c, _ = probe_results()
    probe_ok, detail = check_probe(res, c, (0,))
    record(request, 8, f"chord error mean/max {e_mean0:.4f}/{e_max0:.4f} (ds {ds0:.4f}) -> "
                       f"{e_mean1:.4f}/{e_max1:.4f} (ds {ds1:.4f}); scalar symbol {worst:.1e}; {detail}")
    assert chords_ok and worst < 1e-10 and probe_ok


# --------------------------------------------------------------------------- 9

def test_criterion_9_determinism(request):
    cfg = ExperimentConfig.load(CONFIGS / "smoke.json")
    outs = []
    for _ in range(2):
        grid = cfg.make_grid()
        ph = make_phantom(cfg.phantom, grid, cfg.make_ball())
        rec, rep, _ = reconstruct(ph, cfg.make_geometry(grid), cfg.make_recon_config())
        outs.append((rec.data.tobytes(), rep.calibration))
    same = outs[0] == outs[1]
    record(request, 9, f"two reconstruct runs bit-identical: {same}")
    assert same
