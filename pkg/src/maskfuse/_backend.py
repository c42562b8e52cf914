"""Kernel backend selection.

The compiled ``_ext`` module is used when it was built; otherwise the numpy
twin in ``_pure`` takes over.  Setting ``MASKFUSE_PURE_PYTHON=1`` forces the
fallback, which is how the benchmark and the equivalence tests exercise it.
"""
import os

from . import _pure

kernels = _pure
BACKEND = "python"

if os.environ.get("MASKFUSE_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ext
    except ImportError:
        pass
    else:
        kernels = _ext
        BACKEND = "cython"
