"""Compute-lane selection for the hot kernels.

Every performance-critical inner loop (splat compositing, hash-grid
lookup, BVH queries, mesh rasterization, depth fusion) exists twice: a
numba ``@njit`` version and a vectorized pure-numpy version with
identical semantics. ``HEADSPAN_BACKEND=numpy`` forces the numpy lane;
``HEADSPAN_BACKEND=numba`` forces the jitted lane (import error if numba
is unavailable). Default is numba when importable, numpy otherwise.

``HEADSPAN_NUM_THREADS`` caps numba's thread pool. All shipped kernels
are single-threaded for bit-reproducibility, so this only matters if a
caller jits their own parallel code on top.
"""

import os

_ENV_VAR = "HEADSPAN_BACKEND"
_THREADS_VAR = "HEADSPAN_NUM_THREADS"

_backend = None


def _detect() -> str:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"{_ENV_VAR} must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    threads = os.environ.get(_THREADS_VAR)
    if threads:
        import numba

        numba.set_num_threads(max(1, int(threads)))
    return "numba"


def active_backend() -> str:
    """Return the selected lane, 'numba' or 'numpy' (resolved once)."""
    global _backend
    if _backend is None:
        _backend = _detect()
    return _backend
