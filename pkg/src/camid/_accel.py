"""Numba switch shared by the hot kernels.

Set ``CAMID_NUMBA=0`` to force the pure-numpy code paths (useful for
debugging and for the benchmark comparing both).
"""
import functools
import os

try:
    import numba as _nb
except ImportError:  # pragma: no cover
    _nb = None

NUMBA_ENABLED = _nb is not None and os.environ.get("CAMID_NUMBA", "1") not in ("0", "false", "no")

njit = functools.partial(_nb.njit, cache=True, nogil=True, fastmath=False) if _nb is not None else None


def use_numba() -> bool:
    return NUMBA_ENABLED
