"""Experiment configuration: JSON text <-> validated dataclasses.

Validation errors name the offending key path and, when the config came from
text, the line it sits on. The schema is tabulated in docs/FORMATS.md.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

MAX_ORDER = 6


class ConfigError(ValueError):
    def __init__(self, msg, path=(), line=None):
        self.path = tuple(path)
        self.line = line
        where = ".".join(str(p) for p in self.path) or "<root>"
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{where}: {msg}")


@dataclass
class GridSpec:
    n: int = 64
    half_width: float = 1.1


@dataclass
class BallSpec:
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 1.0


@dataclass
class AcquisitionSpec:
    n_t: int = 256
    n1: int = 512
    n2: int = 1024
    theta_min: float = 0.05
    ds: Optional[float] = None      # default: half the voxel spacing
    end_taper: float = 0.1


@dataclass
class SymbolSpec:
    cond_cap: float = 300.0
    margin: list = field(default_factory=lambda: [0.05, 0.15])
    patch_size: int = 16
    patch_stride: int = 8
    n_theta: int = 32
    n_phi: int = 64
    center_margin: float = 0.0
    calibration: Optional[float] = None
    bump_sigma: float = 0.06


@dataclass
class AnalysisSpec:
    atlas_samples: int = 10000
    rank_trials: int = 100
    symbol_samples: int = 50
    band: float = 1.5
    dilate: int = 2
    threshold: float = 0.05
    highpass: float = 1.0
    surface_samples: int = 20000


@dataclass
class SeedSpec:
    atlas: int = 1
    rank: int = 0
    symbol: int = 0


@dataclass
class ExperimentConfig:
    curve: dict = field(default_factory=lambda: {"kind": "helix", "radius": 3.0, "pitch": 0.25,
                                                 "turns": 2.0, "axis": "x"})
    m: int = 1
    grid: GridSpec = field(default_factory=GridSpec)
    ball: BallSpec = field(default_factory=BallSpec)
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    symbol: SymbolSpec = field(default_factory=SymbolSpec)
    phantom: list = field(default_factory=list)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    seeds: SeedSpec = field(default_factory=SeedSpec)
    output_dir: Optional[str] = None

    # ------------------------------------------------------------------ io
    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d, text=None):
        cfg = _build(cls, d, (), text)
        cfg.validate(text)
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, line=exc.lineno) from None
        return cls.from_dict(d, text)

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json())

    # ------------------------------------------------------------------ checks
    def validate(self, text=None):
        def fail(msg, *path):
            raise ConfigError(msg, path, _line_of(text, path))

        if not 0 <= self.m <= MAX_ORDER:
            fail(f"tensor order must lie in [0, {MAX_ORDER}]", "m")
        for name in ("n",):
            if getattr(self.grid, name) <= 0:
                fail("must be positive", "grid", name)
        if self.grid.half_width <= 0:
            fail("must be positive", "grid", "half_width")
        if self.ball.radius <= 0:
            fail("must be positive", "ball", "radius")
        if len(self.ball.center) != 3:
            fail("needs three coordinates", "ball", "center")
        a = self.acquisition
        for name in ("n_t", "n1", "n2"):
            if getattr(a, name) <= 0:
                fail("must be positive", "acquisition", name)
        if not 0 <= a.theta_min < 1.5:
            fail("must lie in [0, 1.5)", "acquisition", "theta_min")
        if a.ds is not None and a.ds <= 0:
            fail("must be positive", "acquisition", "ds")
        if not 0 <= a.end_taper <= 0.5:
            fail("must lie in [0, 0.5]", "acquisition", "end_taper")
        s = self.symbol
        if s.cond_cap <= 1:
            fail("must exceed 1", "symbol", "cond_cap")
        if len(s.margin) != 2 or not 0 <= s.margin[0] < s.margin[1]:
            fail("needs 0 <= lo < hi", "symbol", "margin")
        for name in ("patch_size", "patch_stride", "n_theta", "n_phi"):
            if getattr(s, name) <= 0:
                fail("must be positive", "symbol", name)
        if 2 * s.patch_stride != s.patch_size:
            fail("patches overlap by half: patch_size must equal 2 * patch_stride", "symbol", "patch_stride")
        an = self.analysis
        for name in ("atlas_samples", "rank_trials", "symbol_samples", "surface_samples"):
            if getattr(an, name) <= 0:
                fail("must be positive", "analysis", name)
        if "kind" not in self.curve:
            fail("missing 'kind'", "curve")
        try:
            self.make_curve()
        except (TypeError, ValueError, OSError) as exc:
            fail(str(exc), "curve")
        for i, p in enumerate(self.phantom):
            if not isinstance(p, dict) or "kind" not in p:
                fail("each primitive needs a 'kind'", "phantom", i)
        return self

    # ------------------------------------------------------------------ builders
    def make_curve(self):
        from .geometry import curve_from_spec
        return curve_from_spec(self.curve)

    def make_grid(self):
        from .symtensor import SymTensorField
        return SymTensorField.centered(self.grid.n, self.grid.half_width, self.m)

    def make_ball(self):
        import numpy as np
        from .parametrix import Ball
        return Ball(np.asarray(self.ball.center, dtype=np.float64), float(self.ball.radius))

    def make_geometry(self, grid=None):
        from .transform import AcquisitionGeometry
        grid = grid if grid is not None else self.make_grid()
        a = self.acquisition
        ds = a.ds if a.ds is not None else 0.5 * float(grid.spacing.min())
        return AcquisitionGeometry(self.make_curve(), a.n_t, a.n1, a.n2, theta_min=a.theta_min, ds=ds,
                                   end_taper=a.end_taper)

    def make_recon_config(self):
        from .parametrix import Patching, ReconConfig
        s = self.symbol
        return ReconConfig(patching=Patching(size=s.patch_size, stride=s.patch_stride), n_theta=s.n_theta,
                           n_phi=s.n_phi, cond_cap=s.cond_cap, margin=tuple(s.margin), ball=self.make_ball(),
                           center_margin=s.center_margin, calibration=s.calibration, bump_sigma=s.bump_sigma)


def _build(cls, d, path, text):
    if not isinstance(d, dict):
        raise ConfigError("expected an object", path, _line_of(text, path))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in d.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}", path + (key,), _line_of(text, path + (key,)))
        ftype = fields[key].type
        sub = _SECTIONS.get(ftype)
        if sub is not None:
            kwargs[key] = _build(sub, val, path + (key,), text)
        else:
            kwargs[key] = _coerce(ftype, val, path + (key,), text)
    return cls(**kwargs)


def _coerce(ftype, val, path, text):
    def bad(what):
        return ConfigError(f"expected {what}, got {type(val).__name__}", path, _line_of(text, path))

    base = ftype.replace("Optional[", "").rstrip("]")
    if val is None:
        if ftype.startswith("Optional"):
            return None
        raise bad(base)
    if base == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            raise bad("an integer")
        return val
    if base == "float":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise bad("a number")
        return float(val)
    if base == "str":
        if not isinstance(val, str):
            raise bad("a string")
        return val
    if base == "list":
        if not isinstance(val, list):
            raise bad("a list")
        return val
    if base == "dict":
        if not isinstance(val, dict):
            raise bad("an object")
        return val
    return val


_SECTIONS = {"GridSpec": GridSpec, "BallSpec": BallSpec, "AcquisitionSpec": AcquisitionSpec,
             "SymbolSpec": SymbolSpec, "AnalysisSpec": AnalysisSpec, "SeedSpec": SeedSpec}


def _line_of(text, path):
    """Best-effort line number of a key path in JSON text (keys searched in nesting order)."""
    if text is None:
        return None
    pos = 0
    found = False
    for key in path:
        if isinstance(key, int):
            continue
        i = text.find(f'"{key}"', pos)
        if i < 0:
            break
        pos, found = i, True
    if not found:
        return None
    return text.count("\n", 0, pos) + 1
