"""Kernel backend selection.

The hot numeric loops (convolution forward/backward) exist twice: a numba
@njit version and a pure-numpy im2col version. Which one backs the public
API is decided once at import time from the MICROTOG_BACKEND environment
variable:

    MICROTOG_BACKEND=numba   force numba (ImportError if unavailable)
    MICROTOG_BACKEND=numpy   force the pure-numpy fallback
    MICROTOG_BACKEND=auto    numba when importable, numpy otherwise (default)

Both paths compute the same quantities; they may differ by float rounding
(different summation orders), never by more than normal float32 noise.
"""

import os

_CHOICE = os.environ.get("MICROTOG_BACKEND", "auto").strip().lower()

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"MICROTOG_BACKEND must be 'auto', 'numba' or 'numpy', got {_CHOICE!r}"
    )
if _CHOICE == "numba" and not HAVE_NUMBA:
    raise ImportError("MICROTOG_BACKEND=numba but numba is not importable")

USE_NUMBA = HAVE_NUMBA if _CHOICE == "auto" else _CHOICE == "numba"


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
