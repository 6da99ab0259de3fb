"""Selects between numba-compiled kernels and the pure-numpy fallback.

Set ``MIVINFER_BACKEND=numpy`` (or ``MIVINFER_DISABLE_NUMBA=1``) before import
to force the fallback. If numba cannot be imported the fallback is used too.
"""

from __future__ import annotations

import os

_requested = os.environ.get("MIVINFER_BACKEND", "numba").strip().lower()
if os.environ.get("MIVINFER_DISABLE_NUMBA", "").strip() not in ("", "0"):
    _requested = "numpy"

try:
    import numba  # noqa: F401
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False
    njit = None

USE_NUMBA = NUMBA_AVAILABLE and _requested != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


def jit(fn):
    """``njit(cache=True, nogil=True)`` when numba is importable, else identity."""
    if not NUMBA_AVAILABLE:
        return fn
    return njit(cache=True, nogil=True)(fn)
