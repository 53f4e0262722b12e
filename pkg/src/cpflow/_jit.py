"""Backend switch between numba-compiled kernels and the pure-numpy path.

Set ``CPFLOW_BACKEND=numpy`` to force the numpy implementations everywhere
(numba is then never imported). Any other value, or no value, selects numba
when it is installed.
"""
import os

try:
    if os.environ.get("CPFLOW_BACKEND", "").lower() == "numpy":
        raise ImportError
    import numba
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """numba.njit with nogil and on-disk caching, or identity without numba."""
    if HAVE_NUMBA:
        kwargs.setdefault("nogil", True)
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def resolve_backend(backend=None):
    """Return "numba" or "numpy" for an explicit choice, the env flag, or the default."""
    if backend is None:
        backend = os.environ.get("CPFLOW_BACKEND", "numba")
    backend = backend.lower()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}; expected 'numba' or 'numpy'")
    if backend == "numba" and not HAVE_NUMBA:
        return "numpy"
    return backend
