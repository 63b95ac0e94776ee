"""Kernel backend selection.

The compiled extension is used when it imports cleanly; set
``RGBTRACK_KERNELS=python`` to force the numpy fallback.
"""
import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("RGBTRACK_KERNELS", "").lower() == "python":
    from . import _pykernels as _impl
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _pykernels as _impl
        BACKEND = "python"
        log.debug("compiled kernels unavailable, using numpy fallback")

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
topk_sorted = _impl.topk_sorted
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3

__all__ = [
    "BACKEND", "softmax_fwd", "softmax_bwd", "layernorm_fwd", "layernorm_bwd",
    "gelu_fwd", "gelu_bwd", "topk_sorted", "im2col3x3", "col2im3x3",
]
