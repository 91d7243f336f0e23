"""Backend selection for the element kernels.

``CHNSADAPT_BACKEND`` picks the implementation used by :mod:`chnsadapt._kernels`:

* ``numba`` -- compiled loops (fails loudly if numba is missing),
* ``numpy`` -- vectorised einsum fallback,
* ``auto`` (default) -- numba when importable, numpy otherwise.
"""

import os

_requested = os.environ.get("CHNSADAPT_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"CHNSADAPT_BACKEND must be auto, numba or numpy, got {_requested!r}")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False
    _njit = None

if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("CHNSADAPT_BACKEND=numba but numba is not installed")

USE_NUMBA = HAVE_NUMBA and _requested != "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap
