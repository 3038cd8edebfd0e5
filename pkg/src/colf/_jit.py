"""Optional numba acceleration.

Set ``COLF_NUMBA=0`` in the environment before import to force the pure-numpy
kernels. Both paths are covered by the test-suite.
"""
import ctypes
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("COLF_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def optional_njit(*args, **kwargs):
    def decorator(func):
        if HAVE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func
    return decorator


def set_threads(n):
    """Cap worker threads for BLAS and numba. ``None`` leaves defaults alone."""
    if n is None:
        return
    n = max(1, int(n))
    if HAVE_NUMBA:
        if "NUMBA_THREADING_LAYER" not in os.environ:
            numba.config.THREADING_LAYER = "workqueue"  # skip the TBB probe and its version warning
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


def tune_allocator(retain_bytes=1 << 30):
    """Keep freed blocks in the glibc heap instead of returning them to the OS.

    The autodiff graph allocates and frees many arrays of a few MB per step;
    with the default mmap threshold each one costs fresh page faults. No-op
    where glibc ``mallopt`` is unavailable.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:  # pragma: no cover
        return False
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    ok = libc.mallopt(m_mmap_threshold, int(retain_bytes))
    ok &= libc.mallopt(m_trim_threshold, int(retain_bytes))
    ok &= libc.mallopt(m_top_pad, 64 << 20)
    return bool(ok)
