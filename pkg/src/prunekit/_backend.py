"""Kernel backend selection.

``PRUNEKIT_NUMBA=0`` forces the pure-numpy kernels even when numba is
importable. ``PRUNEKIT_THREADS`` caps internal parallelism.
"""
import os

# TBB in this image is too old for numba; OpenMP is thread-safe for
# concurrent callers, which calibration relies on.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_flag(name, default):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_flag("PRUNEKIT_NUMBA", True)


def thread_cap(requested=None):
    """Number of worker threads to use, honouring PRUNEKIT_THREADS."""
    cap = os.environ.get("PRUNEKIT_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, int(n))
