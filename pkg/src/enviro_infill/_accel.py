"""Numba switch.

Hot DSP kernels are written twice: an ``@njit`` loop version and a pure-numpy
version.  ``ENVIRO_INFILL_NUMBA=0`` routes every call to the numpy path; any
other value (or unset) uses the compiled loops when numba imports cleanly.
The loop versions are compiled whenever numba is present so the benchmark can
compare both paths in one process.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _env_enabled():
    flag = os.environ.get("ENVIRO_INFILL_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_enabled()


def njit(func):
    """Compile ``func`` in nopython mode when numba is importable."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def backend():
    return "numba" if USE_NUMBA else "numpy"
