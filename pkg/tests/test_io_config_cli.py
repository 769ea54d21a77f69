import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trtlab.cli import main
from trtlab.config import ConfigError, ExperimentConfig
from trtlab.geometry import Helix
from trtlab.io import (FormatError, read_field, read_pgm, read_sinogram, slice_of, to_uint16, write_field,
                       write_pgm, write_profile_csv, write_sinogram)
from trtlab.symtensor import SymTensorField
from trtlab.transform import AcquisitionGeometry, Sinogram

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = CONFIGS / "smoke.json"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------- file formats

def test_field_roundtrip_and_layout(tmp_path, rng):
    f = SymTensorField(rng.standard_normal((3, 4, 5, 6)), np.array([0.1, 0.2, 0.3]), np.array([-1.0, 0.5, 2.0]), 2)
    p = write_field(tmp_path / "f.trtf", f, {"note": "x"})
    g = read_field(p)
    np.testing.assert_array_equal(g.data, f.data)
    np.testing.assert_array_equal(g.spacing, f.spacing)
    np.testing.assert_array_equal(g.origin, f.origin)
    buf = p.read_bytes()
    head = struct.unpack_from("<4sHH3I3d3d16sQII", buf)
    assert head[0] == b"TRTF" and head[1] == 1 and head[2] == 2 and head[3:6] == (3, 4, 5)
    assert head[12].rstrip(b"\0") == b"lex-desc-x1-x2" and head[13] == f.data.size
    # payload is float64 little endian, voxel-major then component
    off = struct.calcsize("<4sHH3I3d3d16sQII") + head[15]
    np.testing.assert_array_equal(np.frombuffer(buf[off:], "<f8"), f.data.ravel())


def test_reader_self_check(tmp_path, rng):
    f = SymTensorField(rng.standard_normal((2, 2, 2, 3)), np.ones(3), np.zeros(3), 1)
    p = write_field(tmp_path / "f.trtf", f)
    buf = bytearray(p.read_bytes())
    buf[-1] ^= 0xFF
    (tmp_path / "bad.trtf").write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="checksum"):
        read_field(tmp_path / "bad.trtf")
    (tmp_path / "short.trtf").write_bytes(bytes(buf[:20]))
    with pytest.raises(FormatError):
        read_field(tmp_path / "short.trtf")
    (tmp_path / "trunc.trtf").write_bytes(bytes(buf[:-8]))
    with pytest.raises(FormatError, match="payload"):
        read_field(tmp_path / "trunc.trtf")
    with pytest.raises(FormatError, match="magic"):
        read_sinogram(p)


def test_sinogram_roundtrip(tmp_path, rng):
    geom = AcquisitionGeometry(Helix(3.0, 0.25, 2.0, axis="x"), 3, 4, 6, ds=0.02, end_taper=0.1)
    s = Sinogram(rng.standard_normal((2, 3, 4, 6)), geom)
    p = write_sinogram(tmp_path / "s.trts", s)
    r = read_sinogram(p)
    np.testing.assert_array_equal(r.values, s.values)
    assert r.geom.to_dict() == geom.to_dict()
    assert r.geom.curve.to_dict() == geom.curve.to_dict()


def test_images(tmp_path, rng):
    f = SymTensorField(rng.standard_normal((4, 5, 6, 1)), np.ones(3), np.zeros(3), 0)
    assert slice_of(f, "axial").shape == (4, 5)
    assert slice_of(f, "coronal").shape == (4, 6)
    assert slice_of(f, "sagittal", 0).shape == (5, 6)
    img = slice_of(f, "axial")
    p = write_pgm(tmp_path / "a.pgm", img, window=(-1.0, 1.0))
    q, side = read_pgm(p)
    np.testing.assert_array_equal(q, to_uint16(img, (-1.0, 1.0))[0])
    assert side["window"] == [-1.0, 1.0] and side["maxval"] == 65535
    csv = write_profile_csv(tmp_path / "p.csv", f, 0, (0, 2, 3))
    lines = csv.read_text().splitlines()
    assert lines[0] == "coordinate,value" and len(lines) == 5
    assert float(lines[2].split(",")[1]) == f.data[1, 2, 3, 0]


# --------------------------------------------------------------------------- config

def test_config_roundtrip():
    for path in CONFIGS.glob("*.json"):
        cfg = ExperimentConfig.load(path)
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg and again.digest() == cfg.digest()


@given(st.integers(0, 6), st.integers(1, 64), st.floats(1.01, 1e8), st.integers(1, 32))
def test_config_roundtrip_property(m, n, cap, stride):
    cfg = ExperimentConfig(m=m)
    cfg.grid.n = n
    cfg.symbol.cond_cap = cap
    cfg.symbol.patch_stride, cfg.symbol.patch_size = stride, 2 * stride
    cfg.validate()
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize("text,line,what", [
    ('{\n  "m": 9\n}', 2, "order"),
    ('{\n  "m": 1,\n  "grid": {"n": 8},\n}', 4, None),
    ('{\n  "m": 1,\n  "bogus": 3\n}', 3, "unknown key"),
    ('{\n  "m": 1,\n  "grid": {\n    "n": "big"\n  }\n}', 4, "integer"),
    ('{\n  "symbol": {"patch_size": 10, "patch_stride": 4}\n}', 2, "patch"),
    ('{\n  "curve": {"kind": "spiral"}\n}', 2, "curve"),
])
def test_config_errors_have_lines(text, line, what):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_json(text)
    assert exc.value.line == line
    if what:
        assert what in str(exc.value)


# --------------------------------------------------------------------------- cli

def run(args, capsys=None):
    code = main([str(a) for a in args])
    return code


def test_cli_rank_check(tmp_path):
    assert run(["rank-check", SMOKE, "--out", tmp_path, "--set", "m=2", "--set", "analysis.rank_trials=100"]) == 0
    rows = (tmp_path / "rank_check.csv").read_text().splitlines()
    assert len(rows) == 101
    assert all(r.split(",")[-2] == "6" and r.endswith("pass") for r in rows[1:])
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["outputs"]["rank_check.csv"] == sha(tmp_path / "rank_check.csv")


def test_cli_simulate_zero_phantom_is_stable(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert run(["simulate", SMOKE, "--out", d, "--set", "phantom=[]"]) == 0
        s = read_sinogram(d / "sinogram.trts")
        assert not np.any(s.values)
        outs.append(sha(d / "sinogram.trts"))
    assert outs[0] == outs[1]


def test_cli_pipeline(tmp_path):
    assert run(["reconstruct", SMOKE, "--out", tmp_path]) == 0
    rec = tmp_path / "reconstruction.trtf"
    assert read_field(rec).order == 1
    assert run(["analyze", SMOKE, "--out", tmp_path / "an", "--input", rec]) == 0
    metrics = (tmp_path / "an" / "metrics.csv").read_text()
    assert "edge_ncc" in metrics and "confinement" in metrics
    assert run(["plot", SMOKE, "--out", tmp_path / "pl", "--input", rec, "--window", "-0.5", "1.5"]) == 0
    assert list((tmp_path / "pl").glob("*.pgm"))
    assert run(["kt-check", SMOKE, "--out", tmp_path / "kt"]) == 0
    assert (tmp_path / "kt" / "atlas.csv").read_text().startswith("class,count,fraction,examples")
    assert run(["symbol", SMOKE, "--out", tmp_path / "sy"]) == 0
    assert (tmp_path / "sy" / "symbol.csv").exists()


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "m": 1,\n  "grid": {"n": 0}\n}')
    assert run(["rank-check", bad, "--out", tmp_path]) == 2
    assert run(["rank-check", tmp_path / "missing.json", "--out", tmp_path]) == 3
    assert run(["analyze", SMOKE, "--out", tmp_path, "--input", tmp_path / "none.trtf"]) == 3
    # tangent plane of a circle: the symbol is singular on the requested covector
    circ = tmp_path / "circle.json"
    circ.write_text(json.dumps({"curve": {"kind": "circle", "radius": 1.0}, "m": 1}))
    assert run(["symbol", circ, "--out", tmp_path, "--x", 1, 0.5, 0, "--xi", 1, 0, 0]) == 4
    monkeypatch.setenv("TRTLAB_OUTPUT_DIR", str(tmp_path / "env"))
    assert run(["rank-check", SMOKE]) == 0
    assert (tmp_path / "env" / "rank_check.csv").exists()
