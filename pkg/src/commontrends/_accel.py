"""Backend selection for the hot numeric kernels.

Kernels are written once in numba-compatible numpy. They are compiled with
``numba.njit`` unless ``COMMONTRENDS_BACKEND=numpy`` is set in the environment
(or numba is not importable), in which case the plain Python functions run.
The flag is read once at import time.
"""
import logging
import os

BACKEND_ENV = "COMMONTRENDS_BACKEND"

_requested = os.environ.get(BACKEND_ENV, "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = _requested == "numba" and numba is not None
BACKEND = "numba" if USE_NUMBA else "numpy"

if numba is not None:
    logging.getLogger("numba").setLevel(logging.WARNING)


def kernel(func):
    """Compile ``func`` with numba when the numba backend is active."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func
