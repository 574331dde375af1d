"""Kernel backend selection.

The hot convolution kernels exist twice: as numba ``@njit`` loops and as
pure numpy (im2col + matmul). ``SML_BACKEND=numpy`` forces the fallback;
otherwise numba is used when it can be imported.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _initial_backend():
    requested = os.environ.get("SML_BACKEND", "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested not in ("", "numba"):
        raise ValueError(f"SML_BACKEND must be one of {_VALID}, got {requested!r}")
    return "numba" if HAVE_NUMBA else "numpy"


_current = _initial_backend()


def get_backend():
    return _current


def set_backend(name):
    """Switch backends at runtime (benchmarks and tests use this)."""
    global _current
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _current = name


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
