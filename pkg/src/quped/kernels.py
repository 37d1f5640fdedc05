"""Kernel backend selection.

The compiled extension is used when it imports; ``QUPED_PURE_PYTHON=1`` forces
the numpy fallback.  ``BACKEND`` names whichever was picked.
"""
import os

from . import _kernels_py

if os.environ.get("QUPED_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

assign = _impl.assign
prox_x = _impl.prox_x
group_sum = _impl.group_sum
signed_counts = _impl.signed_counts
soft_quantize = _impl.soft_quantize
soft_dx = _impl.soft_dx
soft_dc = _impl.soft_dc
soft_vjp_c = _impl.soft_vjp_c
