"""Backend selection for the hot numeric kernels.

Set ``LACTLAB_NUMBA=0`` in the environment before import to force the
pure-numpy path (useful for debugging and for the kernel benchmark).
"""
import os

_flag = os.environ.get("LACTLAB_NUMBA", "1").strip().lower()

try:
    import numba  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if HAVE_NUMBA:
        from numba import njit as _njit
        return _njit(*args, **kwargs)

    def deco(fn):
        return fn
    if args and callable(args[0]):
        return args[0]
    return deco


def backend():
    return "numba" if USE_NUMBA else "numpy"
