"""Kernel backend selection.

The compiled extension is used when it imports; set ``SLOTMIX_PURE_PYTHON=1``
to force the reference implementation.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("SLOTMIX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

_impl = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

log_gaussian_fwd = _impl.log_gaussian_fwd
log_gaussian_bwd = _impl.log_gaussian_bwd
hungarian = _impl.hungarian
