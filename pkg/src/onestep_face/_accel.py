"""Numba toggle.

Set ``ONESTEP_FACE_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag
is read once at import time; ``kernels`` picks its implementations from it.
"""
import os

DISABLED = os.environ.get("ONESTEP_FACE_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not DISABLED


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, else the plain function."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
