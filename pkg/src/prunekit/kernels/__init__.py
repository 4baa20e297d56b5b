"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active implementation is chosen once at import time (see
``prunekit._backend``). Both implementations stay importable so tests and
benchmarks can compare them directly.
"""
from prunekit._backend import USE_NUMBA
from prunekit.kernels import _np as numpy_impl

if USE_NUMBA:
    from prunekit.kernels import _nb as numba_impl

    active = numba_impl
else:
    numba_impl = None
    active = numpy_impl

BACKEND = "numba" if USE_NUMBA else "numpy"


def get(name, backend=None):
    """Look up kernel ``name`` on ``backend`` ("numba", "numpy" or None for active)."""
    if backend is None:
        impl = active
    elif backend == "numpy":
        impl = numpy_impl
    elif backend == "numba":
        if numba_impl is None:
            raise RuntimeError("numba backend requested but disabled or unavailable")
        impl = numba_impl
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return getattr(impl, name)
