"""Command-line interface: ``trtlab <subcommand> CONFIG [options]``.

Every run writes ``manifest.json`` into the output directory with the config
digest, the seeds, library versions and a SHA-256 of each output file.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
The default output directory comes from ``--out``, then the config's
``output_dir``, then the ``TRTLAB_OUTPUT_DIR`` environment variable, then
``./trtlab-out``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "TRTLAB_OUTPUT_DIR"

log = logging.getLogger("trtlab")


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers

def _apply_overrides(d, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object {p!r}", tuple(parts))
        node[parts[-1]] = val
    return d


def load_config(path, overrides=None) -> ExperimentConfig:
    text = Path(path).read_text()
    if not overrides:
        return ExperimentConfig.from_json(text)
    base = ExperimentConfig.from_json(text)
    return ExperimentConfig.from_dict(_apply_overrides(base.to_dict(), overrides))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    out = {"trtlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        out["numba"] = None
    from ._accel import get_backend
    out["backend"] = get_backend()
    return out


def write_manifest(out, cfg, command, outputs, extra=None):
    man = {"command": command, "config_sha256": cfg.digest(), "config": cfg.to_dict(),
           "seeds": dataclass_dict(cfg.seeds), "versions": _versions(),
           "outputs": {str(Path(p).relative_to(out)): _sha256(p) for p in outputs}}
    if extra:
        man.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def dataclass_dict(obj):
    import dataclasses
    return dataclasses.asdict(obj)


def _out_dir(args, cfg):
    out = args.out or cfg.output_dir or os.environ.get(OUTPUT_ENV) or "trtlab-out"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _phantom(cfg, grid):
    from .parametrix import make_phantom
    return make_phantom(cfg.phantom, grid, cfg.make_ball())


def _first_ball(cfg):
    for p in cfg.phantom:
        if p.get("kind") == "ball":
            return np.asarray(p["center"], float), float(p["radius"])
    raise ConfigError("analysis needs a 'ball' primitive in the phantom", ("phantom",))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# --------------------------------------------------------------------------- subcommands

def cmd_simulate(cfg, args, out):
    from .io import write_field, write_sinogram
    from .transform import forward
    grid = cfg.make_grid()
    f = _phantom(cfg, grid)
    geom = cfg.make_geometry(grid)
    s = forward(f, geom)
    return [write_field(out / "phantom.trtf", f), write_sinogram(out / "sinogram.trts", s)], {}


def cmd_kt_check(cfg, args, out):
    from .visibility import visibility_atlas
    b = cfg.ball
    atlas = visibility_atlas(b.center, b.radius, cfg.make_curve(), cfg.m, cfg.analysis.atlas_samples,
                             seed=cfg.seeds.atlas)
    path = out / "atlas.csv"
    path.write_text(atlas.to_csv())
    return [path], {"fractions": {k.value: v for k, v in atlas.fractions().items()}}


def cmd_rank_check(cfg, args, out):
    from .symbol import rank_check
    rep = rank_check(cfg.m, cfg.analysis.rank_trials, rng_seed=cfg.seeds.rank)
    header = ["trial"] + [f"rank_U{p}" for p in range(cfg.m + 1)] + ["rank_P", "status"]
    path = _write_csv(out / "rank_check.csv", header, rep.rows())
    print(f"m={cfg.m} trials={rep.trials} expected rank(P)={rep.expected_P} failures={rep.failures}")
    return [path], {"failures": rep.failures}


def cmd_symbol(cfg, args, out):
    from .symbol import SymbolSingular, principal_symbol, pseudoinverse_symbol
    from .visibility import sample_covectors
    curve = cfg.make_curve()
    if args.x is not None or args.xi is not None:
        if args.x is None or args.xi is None:
            raise ConfigError("--x and --xi must be given together")
        covs = [(np.array(args.x, float), np.array(args.xi, float))]
    else:
        rng = np.random.default_rng(cfg.seeds.symbol)
        x, xi = sample_covectors(rng, cfg.ball.center, cfg.ball.radius, cfg.analysis.symbol_samples)
        covs = list(zip(x, xi))
    N = (cfg.m + 1) * (cfg.m + 2) // 2
    rows, entries, skipped = [], [], 0
    for x, xi in covs:
        try:
            A = principal_symbol(x, xi, curve, cfg.m)
        except SymbolSingular as exc:
            if len(covs) == 1:
                raise NumericalFailure(str(exc)) from exc
            skipped += 1
            continue
        B = pseudoinverse_symbol(A, cfg.symbol.cond_cap)
        rows.append([*x, *xi, A.k, A.condition, *A.eigenvalues])
        entries.append(np.concatenate([A.entries.ravel(), B.entries.ravel()]))
    header = ["x1", "x2", "x3", "xi1", "xi2", "xi3", "k", "condition"] + [f"ev{i}" for i in range(N)]
    p1 = _write_csv(out / "symbol.csv", header, rows)
    p2 = out / "symbol_matrices.npy"
    np.save(p2, np.array(entries).reshape(len(entries), 2, N, N) if entries else np.zeros((0, 2, N, N)))
    return [p1, p2], {"skipped_singular": skipped}


def _recon(cfg):
    from .parametrix import reconstruct
    grid = cfg.make_grid()
    f = _phantom(cfg, grid)
    geom = cfg.make_geometry(grid)
    rec, rep, table = reconstruct(f, geom, cfg.make_recon_config())
    return f, geom, rec, rep, table


def cmd_reconstruct(cfg, args, out):
    from .io import write_field
    f, geom, rec, rep, _ = _recon(cfg)
    paths = [write_field(out / "phantom.trtf", f), write_field(out / "reconstruction.trtf", rec,
                                                               {"calibration": rep.calibration})]
    rj = out / "report.json"
    rj.write_text(json.dumps(dataclass_dict(rep), indent=2, sort_keys=True) + "\n")
    return paths + [rj], {"calibration": rep.calibration}


def cmd_analyze(cfg, args, out):
    from .io import read_field
    from .parametrix import (_table_for, ball_artifact_metrics, predict_artifacts, sphere_samples)
    center, radius = _first_ball(cfg)
    grid = cfg.make_grid()
    geom = cfg.make_geometry(grid)
    rcfg = cfg.make_recon_config()
    if args.input:
        rec = read_field(args.input)
        f = _phantom(cfg, grid)
        table = _table_for(geom, grid, rcfg)
    else:
        f, geom, rec, _, table = _recon(cfg)
    h = float(grid.spacing.min())
    lo, hi = grid.origin, grid.origin + (np.array(grid.shape) - 1) * grid.spacing
    pts, nrm = sphere_samples(center, radius, cfg.analysis.surface_samples)
    pred = predict_artifacts(pts, nrm, cfg.make_curve(), (lo, hi), 0.5 * h, h)
    an = cfg.analysis
    met = ball_artifact_metrics(f, rec, center, radius, table, cfg.make_curve(), cfg.m, rcfg, pred,
                                band=an.band, dilate=an.dilate, threshold=an.threshold,
                                t_weight=geom.t_weight, highpass=an.highpass, region=rcfg.ball)
    d = dataclass_dict(met)
    path = _write_csv(out / "metrics.csv", ["metric", "value"], sorted(d.items()))
    print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items()))
    return [path], {"metrics": d}


def cmd_plot(cfg, args, out):
    from .io import read_field, slice_of, write_pgm, write_png, write_profile_csv
    if not args.input:
        raise ConfigError("plot needs --input FIELD.trtf")
    f = read_field(args.input)
    stem = Path(args.input).stem
    window = tuple(args.window) if args.window else (float(f.data.min()), float(f.data.max()))
    paths = []
    for comp in range(f.data.shape[-1]):
        for axis in ("axial", "coronal", "sagittal"):
            img = slice_of(f, axis, component=comp)
            meta = {"axis": axis, "component": comp, "source": str(args.input)}
            p = write_pgm(out / f"{stem}_{axis}_c{comp}.pgm", img, window, meta)
            paths += [p, Path(str(p) + ".json")]
            if args.png:
                paths.append(write_png(out / f"{stem}_{axis}_c{comp}.png", img, window)[0])
        mid = tuple(n // 2 for n in f.shape)
        paths.append(write_profile_csv(out / f"{stem}_profile_x_c{comp}.csv", f, 0, mid, comp))
    return paths, {"window": list(window)}


COMMANDS = {"simulate": cmd_simulate, "kt-check": cmd_kt_check, "rank-check": cmd_rank_check,
            "symbol": cmd_symbol, "reconstruct": cmd_reconstruct, "analyze": cmd_analyze, "plot": cmd_plot}

HELP = {"simulate": "forward sinogram of the configured phantom",
        "kt-check": "Monte-Carlo visibility atlas (CSV)",
        "rank-check": "rank tables for the U_p blocks and P (CSV)",
        "symbol": "A0 and B0 at sampled or given covectors (CSV + .npy)",
        "reconstruct": "normal operator followed by the parametrix",
        "analyze": "edge-recovery and artifact-confinement metrics for a ball phantom",
        "plot": "PGM/PNG slices and CSV profiles of a field file"}


def build_parser():
    p = argparse.ArgumentParser(prog="trtlab", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"trtlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in HELP.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("config", help="experiment config (JSON)")
        s.add_argument("--out", help=f"output directory (default: config output_dir, ${OUTPUT_ENV}, ./trtlab-out)")
        s.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set acquisition.n_t=64 (value parsed as JSON)")
        s.add_argument("--threads", type=int, default=None, help="cap the number of numba worker threads")
        s.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "symbol":
            s.add_argument("--x", type=float, nargs=3, help="single covector base point")
            s.add_argument("--xi", type=float, nargs=3, help="single covector direction")
        if name in ("analyze", "plot"):
            s.add_argument("--input", help="field file to analyze or plot")
        if name == "plot":
            s.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"), help="grayscale window")
            s.add_argument("--png", action="store_true", help="also write 16-bit PNG (needs Pillow)")
    return p


def main(argv=None):
    from .io import FormatError
    from .symbol import SymbolSingular
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads:
        from ._accel import set_threads
        set_threads(args.threads)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        out = _out_dir(args, cfg)
        t0 = time.perf_counter()
        log.info("running %s into %s", args.command, out)
        outputs, extra = COMMANDS[args.command](cfg, args, out)
        extra = dict(extra, elapsed_seconds=round(time.perf_counter() - t0, 3))
        write_manifest(out, cfg, args.command, outputs, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, SymbolSingular, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # phantom escaping B and similar input problems are configuration errors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
