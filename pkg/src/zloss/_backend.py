"""Kernel backend selection.

Hot loops are written once as plain Python over arrays. When numba is importable
and ``ZLOSS_NUMBA`` is not set to a false value (``0``, ``false``, ``no``, ``off``),
they are compiled with ``numba.njit``; otherwise the package dispatches to
vectorized numpy equivalents.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_requested() -> bool:
    flag = os.environ.get("ZLOSS_NUMBA", "1").strip().lower()
    return flag not in {"0", "false", "no", "off"}


USE_NUMBA = HAVE_NUMBA and numba_requested()


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
