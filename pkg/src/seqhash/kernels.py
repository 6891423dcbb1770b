"""Hamming kernels, compiled when available.

The Cython extension ``seqhash._hamming`` is used if it was built;
otherwise the numpy fallback is loaded. Set ``SEQHASH_PURE_PYTHON=1`` to
force the fallback.
"""
import importlib
import os

from . import _hamming_py


def load_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _hamming_py
    if name == "cython":
        return importlib.import_module("seqhash._hamming")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("SEQHASH_PURE_PYTHON", "") not in ("", "0"):
        return "python", _hamming_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _hamming_py


BACKEND, _impl = _select()
hamming_scan = _impl.hamming_scan
hamming_matrix = _impl.hamming_matrix
