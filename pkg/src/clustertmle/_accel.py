"""Optional numba acceleration.

Set ``CLUSTERTMLE_DISABLE_NUMBA=1`` to force the pure-numpy path (also used
automatically when numba is not importable).
"""
import os

_DISABLED = os.environ.get("CLUSTERTMLE_DISABLE_NUMBA", "").strip().lower() in {
    "1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    from numba import njit as _njit
    USING_NUMBA = True
except ImportError:
    _njit = None
    USING_NUMBA = False


def jit(fn):
    """Compile ``fn`` with numba in nopython mode, or return it untouched."""
    if not USING_NUMBA:
        return fn
    return _njit(cache=True, nogil=True)(fn)
