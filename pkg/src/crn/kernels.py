"""Selects the compiled CRU kernels when available, else the numpy fallback.

Set ``CRN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python_impl

compiled_impl = None
if not os.environ.get("CRN_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_impl
    except ImportError:  # extension not built
        compiled_impl = None

impl = compiled_impl if compiled_impl is not None else python_impl
BACKEND = "cython" if compiled_impl is not None else "python"

cru_forward = impl.cru_forward
cru_backward = impl.cru_backward
