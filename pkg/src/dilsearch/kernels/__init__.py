"""Hot loops behind the tensor ops.

Two interchangeable implementations exist: numba ``@njit`` kernels and a
pure-numpy path. The numba path is used when numba imports and
``DILSEARCH_BACKEND`` is unset or ``numba``; ``DILSEARCH_BACKEND=numpy``
forces the fallback. Both paths accumulate in the same order, so their
results are bit-identical.
"""

import os

from . import numpy_kernels

_requested = os.environ.get("DILSEARCH_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"DILSEARCH_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numba":
    try:
        from . import numba_kernels as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = numpy_kernels
        BACKEND = "numpy"
else:
    _impl = numpy_kernels
    BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def get_impl(name):
    """Return the kernel module for ``name`` regardless of the env flag."""
    if name == "numpy":
        return numpy_kernels
    if name == "numba":
        from . import numba_kernels

        return numba_kernels
    raise ValueError(f"unknown backend {name!r}")


__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward", "get_impl"]
