"""Backend selection for the hot kernels.

Set ``TRTLAB_NO_NUMBA=1`` to force the pure-numpy path. The choice can also be
changed at runtime with :func:`set_backend`, which the tests and the benchmark
use to run both paths in one process.
"""
import os

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _env_disabled():
    return os.environ.get("TRTLAB_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


_backend = "numpy" if (_env_disabled() or not HAVE_NUMBA) else "numba"


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def use_numba():
    return _backend == "numba"


def set_threads(n):
    """Cap the number of numba worker threads (no-op on the numpy path)."""
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
