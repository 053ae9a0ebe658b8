"""Optional numba acceleration.

Hot loops (scalar Kalman recursions inside the volatility block samplers,
the generic state-space sweeps) are written in jit-friendly style and pass
through ``maybe_jit``. Without numba everything still runs, just slower;
the test suite exercises the uncompiled code paths on small problems.

Set the environment variable ``FMRSV_DISABLE_NUMBA=1`` to force the pure
NumPy fallback.
"""

import os

HAS_NUMBA = False

if os.environ.get("FMRSV_DISABLE_NUMBA", "0") != "1":
    try:
        import numba

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


def maybe_jit(func):
    if HAS_NUMBA:
        return numba.njit(cache=True)(func)
    return func
