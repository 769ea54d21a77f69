"""Binary field and sinogram files, image slices and CSV helpers.

Field files (``.trtf``) and sinogram files (``.trts``) share one layout: a
fixed little-endian header, a UTF-8 JSON metadata block and a float64
little-endian payload. The header records the payload length and its CRC32,
so every reader call doubles as a self-check. The full byte layout is
documented in docs/FORMATS.md.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .symtensor import SymTensorField, dim_sym
from .transform import AcquisitionGeometry, Sinogram

FIELD_MAGIC = b"TRTF"
SINO_MAGIC = b"TRTS"
FORMAT_VERSION = 1
ORDER_TAG = b"lex-desc-x1-x2"     # unique components, descending exponent of x1 then x2
# magic, version, m, dims[3], spacing[3], origin[3], order tag, n_values, crc32, meta length
_HEADER = struct.Struct("<4sHH3I3d3d16sQII")


class FormatError(ValueError):
    """Raised when a file does not match the documented layout."""


def _pack(magic, m, dims, spacing, origin, data, meta):
    payload = np.ascontiguousarray(data, dtype="<f8").tobytes()
    blob = json.dumps(meta, sort_keys=True).encode()
    head = _HEADER.pack(magic, FORMAT_VERSION, m, *dims, *spacing, *origin, ORDER_TAG.ljust(16, b"\0"),
                        data.size, zlib.crc32(payload), len(blob))
    return head + blob + payload


def _unpack(buf, magic):
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the header")
    (mg, ver, m, d0, d1, d2, s0, s1, s2, o0, o1, o2, tag, nval, crc, nmeta) = _HEADER.unpack_from(buf)
    if mg != magic:
        raise FormatError(f"bad magic {mg!r}, expected {magic!r}")
    if ver != FORMAT_VERSION:
        raise FormatError(f"unsupported version {ver}")
    if tag.rstrip(b"\0") != ORDER_TAG:
        raise FormatError(f"unknown component order tag {tag!r}")
    start = _HEADER.size + nmeta
    payload = buf[start:]
    if len(payload) != 8 * nval:
        raise FormatError(f"payload has {len(payload)} bytes, header announces {8 * nval}")
    if zlib.crc32(payload) != crc:
        raise FormatError("payload checksum mismatch")
    meta = json.loads(buf[_HEADER.size:start].decode()) if nmeta else {}
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return m, (d0, d1, d2), (s0, s1, s2), (o0, o1, o2), data, meta


def _write_bytes(path, buf):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf)
    os.replace(tmp, path)
    return path


def write_field(path, f: SymTensorField, meta=None):
    buf = _pack(FIELD_MAGIC, f.order, f.shape, f.spacing, f.origin, f.data, meta or {})
    return _write_bytes(path, buf)


def read_field(path) -> SymTensorField:
    m, dims, spacing, origin, data, _ = _unpack(Path(path).read_bytes(), FIELD_MAGIC)
    data = data.reshape(dims + (dim_sym(m),))
    return SymTensorField(data, np.array(spacing), np.array(origin), m)


def read_field_meta(path) -> dict:
    return _unpack(Path(path).read_bytes(), FIELD_MAGIC)[5]


def write_sinogram(path, s: Sinogram, meta=None):
    g = s.geom
    meta = dict(meta or {})
    meta["geometry"] = g.to_dict()
    meta["curve"] = g.curve.to_dict()
    # dims carry (n_t, n1, n2); spacing carries (dt, dth1, dth2); origin carries (t0, th1_0, th2_0)
    buf = _pack(SINO_MAGIC, s.order, (g.n_t, g.n1, g.n2), (g.dt, g.dth1, g.dth2),
                (float(g.t_samples()[0]), g.th1_0, 0.0), s.values, meta)
    return _write_bytes(path, buf)


def read_sinogram(path, curve=None) -> Sinogram:
    """Read a sinogram; the curve is rebuilt from the metadata unless given."""
    from .geometry import curve_from_spec

    m, dims, _, _, data, meta = _unpack(Path(path).read_bytes(), SINO_MAGIC)
    curve = curve if curve is not None else curve_from_spec(meta["curve"])
    gd = dict(meta["geometry"])
    gd["t_range"] = tuple(gd["t_range"]) if gd.get("t_range") is not None else None
    geom = AcquisitionGeometry(curve, **gd)
    if (geom.n_t, geom.n1, geom.n2) != tuple(dims):
        raise FormatError("sinogram header dims disagree with its geometry metadata")
    return Sinogram(data.reshape((m + 1,) + tuple(dims)), geom)


# --------------------------------------------------------------------------- images

def slice_of(f: SymTensorField, axis: str, index=None, component=0):
    """2-D slice of one component; ``axis`` is "axial" (z), "coronal" (y) or "sagittal" (x)."""
    ax = {"sagittal": 0, "coronal": 1, "axial": 2}[axis]
    if index is None:
        index = f.shape[ax] // 2
    return np.take(f.data[..., component], index, axis=ax)


def to_uint16(img, window=None):
    img = np.asarray(img, dtype=np.float64)
    lo, hi = window if window is not None else (float(img.min()), float(img.max()))
    if hi <= lo:
        hi = lo + 1.0
    q = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return np.round(q * 65535).astype(np.uint16), (float(lo), float(hi))


def write_pgm(path, img, window=None, meta=None):
    """16-bit binary PGM (big-endian samples) plus a ``.json`` sidecar with the window."""
    q, window = to_uint16(img, window)
    h, w = q.shape
    path = _write_bytes(path, f"P5\n{w} {h}\n65535\n".encode() + q.astype(">u2").tobytes())
    side = dict(meta or {})
    side.update({"window": list(window), "width": w, "height": h, "maxval": 65535})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def read_pgm(path):
    """Return (uint16 image, sidecar dict or None)."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dt = ">u2" if maxval > 255 else "u1"
    img = np.frombuffer(buf[pos:], dtype=dt, count=w * h).reshape(h, w).astype(np.uint16)
    side = Path(str(path) + ".json")
    return img, (json.loads(side.read_text()) if side.exists() else None)


def write_png(path, img, window=None):
    """Optional 16-bit PNG; needs Pillow (the ``png`` extra)."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("PNG output needs Pillow; install the 'png' extra") from exc
    q, window = to_uint16(img, window)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)
    return path, window


def write_profile_csv(path, f: SymTensorField, axis: int, at, component=0):
    """Line profile of one component along grid ``axis`` through voxel index ``at``."""
    idx = list(at)
    idx[axis] = slice(None)
    vals = f.data[tuple(idx) + (component,)]
    coords = f.axes()[axis]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("coordinate,value\n")
        for c, v in zip(coords, vals):
            fh.write(f"{c:.10g},{v:.17g}\n")
    return path
