"""Compare the numba kernels against the numpy fallback.

Runs the forward transform and the two normal-operator modes on the same
input with each backend, checks that the outputs agree, and prints the best
wall time of a few repeats. The first numba call is timed separately because
it includes compilation.

    python benchmarks/bench_kernels.py --n 32 --m 1 --repeat 3
"""
import argparse
import time

import numpy as np

from trtlab import _accel
from trtlab.geometry import Helix
from trtlab.symtensor import SymTensorField
from trtlab.transform import AcquisitionGeometry, Mode, forward, normal


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=32, help="grid points per axis")
    ap.add_argument("--m", type=int, default=1, help="tensor order")
    ap.add_argument("--n-t", type=int, default=8)
    ap.add_argument("--n1", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    f = SymTensorField.centered(args.n, 1.0, args.m)
    f = f.like(rng.standard_normal(f.data.shape))
    geom = AcquisitionGeometry(Helix(3.0, 0.25, 2.0, axis="x"), args.n_t, args.n1, 2 * args.n1,
                               ds=0.5 * float(f.spacing[0]))
    kernels = {
        "forward": lambda: forward(f, geom).values,
        "normal (exact)": lambda: normal(f, geom, Mode.EXACT).data,
        "normal (geometric)": lambda: normal(f, geom, Mode.GEOMETRIC).data,
    }
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    prev = _accel.get_backend()
    print(f"grid {args.n}^3, m = {args.m}, {args.n_t} x {args.n1} x {2 * args.n1} rays")
    print(f"{'kernel':22s} {'numpy [s]':>10s} {'numba [s]':>10s} {'first numba [s]':>16s} {'speedup':>8s}")
    try:
        for name, fn in kernels.items():
            res = {}
            first = float("nan")
            for be in backends:
                _accel.set_backend(be)
                if be == "numba":
                    t0 = time.perf_counter()
                    fn()
                    first = time.perf_counter() - t0
                res[be] = best_of(fn, args.repeat)
            t_np = res["numpy"][0]
            t_nb = res["numba"][0] if "numba" in res else float("nan")
            if "numba" in res:
                a, b = res["numba"][1], res["numpy"][1]
                err = np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)
                if err > 1e-10:
                    raise SystemExit(f"{name}: backends disagree (relative error {err:.2e})")
            print(f"{name:22s} {t_np:10.3f} {t_nb:10.3f} {first:16.3f} {t_np / t_nb:8.1f}")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
