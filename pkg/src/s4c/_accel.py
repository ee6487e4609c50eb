"""Backend selection for the hot numeric kernels.

Kernels are compiled with numba when it is importable and the environment
variable ``S4C_NUMBA`` is not set to ``0``.  Otherwise every kernel falls
back to its pure-numpy implementation.  The choice is made once, at import.
"""

import os

_FLAG = os.environ.get("S4C_NUMBA", "1").strip().lower()

try:
    if _FLAG in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by S4C_NUMBA")
    from numba import njit  # noqa: F401

    USE_NUMBA = True
except ImportError:
    USE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
