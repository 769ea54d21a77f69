"""Restricted transverse ray transform of symmetric tensor fields in R^3.

Submodules: ``symtensor`` (tensor algebra and fields), ``geometry`` (source
curves, frames, plane intersections), ``visibility`` (Kirillov-Tuy checks and
atlases), ``transform`` (forward and backprojection), ``symbol`` (principal
symbol and its pseudoinverse), ``parametrix`` (frozen-symbol inversion and
artifact prediction), and ``io``/``config``/``cli`` for experiments.
"""
__version__ = "0.1.0"

from ._accel import get_backend, set_backend  # noqa: E402,F401

__all__ = ["__version__", "get_backend", "set_backend"]
