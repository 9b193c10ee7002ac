"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  ``LINLEAK_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py as fallback

compiled = None
if os.environ.get("LINLEAK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else fallback

BACKEND = _impl.BACKEND
coo_matmul_t = _impl.coo_matmul_t
coo_sddmm_t = _impl.coo_sddmm_t
prg_fill = _impl.prg_fill
prg_accumulate = _impl.prg_accumulate
prg_mask = _impl.prg_mask
