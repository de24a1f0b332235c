"""Kernel backend selection.

The hot numeric kernels ship in two equivalent implementations: numba-jitted
loops and pure numpy.  ``DECOUPLE_BACKEND`` picks one at import time:

    DECOUPLE_BACKEND=numba   force the jitted path (error if numba missing)
    DECOUPLE_BACKEND=numpy   force the pure-numpy fallback
    unset / "auto"           numba when importable, numpy otherwise
"""

from __future__ import annotations

import os

from ..errors import ConfigError

_VALID = ("auto", "numba", "numpy")


def _detect() -> str:
    requested = os.environ.get("DECOUPLE_BACKEND", "auto").strip().lower() or "auto"
    if requested not in _VALID:
        raise ConfigError(
            f"DECOUPLE_BACKEND={requested!r} not understood; expected one of {_VALID}"
        )
    if requested == "numpy":
        return "numpy"
    # the built-in threading layer avoids TBB/OMP version probing at import
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise ConfigError("DECOUPLE_BACKEND=numba but numba is not importable")
        return "numpy"
    return "numba"


BACKEND: str = _detect()


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND
