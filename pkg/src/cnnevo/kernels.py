"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise (or when
``CNNEVO_PURE_PYTHON=1`` is set) the numpy implementations are used.  Both
backends expose the same five functions and produce identical results.
"""

import os

from . import _pykernels

_force_python = os.environ.get("CNNEVO_PURE_PYTHON", "").strip() not in ("", "0")

try:
    if _force_python:
        raise ImportError("pure-Python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
fx_matmul = _impl.fx_matmul

BACKENDS = {"python": _pykernels}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl
else:
    try:
        from . import _ckernels

        BACKENDS["cython"] = _ckernels
    except ImportError:
        pass
