"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``TONESCOPE_BACKEND=numpy`` forces the fallback.
"""

import os

from tonescope.engine import _npkernels

numpy_backend = _npkernels

try:
    from tonescope.engine import _ckernels as cython_backend
except ImportError:  # extension not built
    cython_backend = None

if cython_backend is not None and os.environ.get("TONESCOPE_BACKEND", "").lower() != "numpy":
    _impl = cython_backend
    BACKEND = "cython"
else:
    _impl = _npkernels
    BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
