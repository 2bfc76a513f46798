"""Backend switch for the numeric kernels.

Set ``PATCHDISTILL_BACKEND=numpy`` to force the pure-numpy path. Any other
value (or unset) uses numba when it imports cleanly.
"""

from __future__ import annotations

import os

BACKEND_ENV = "PATCHDISTILL_BACKEND"

try:
    import numba as _numba
except Exception:  # pragma: no cover
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get(BACKEND_ENV, "numba").lower() != "numpy"


def njit(func=None, **kwargs):
    """``numba.njit`` with cache on, or a passthrough when numba is absent."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)

    def wrap(f):
        if not NUMBA_AVAILABLE:
            return f
        return _numba.njit(**kwargs)(f)

    if func is not None:
        return wrap(func)
    return wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
