"""Backend selection for the hot kernels.

The compiled extension is preferred; set ``PILLARCORAL_PURE_PYTHON=1`` to force
the pure-Python implementation.
"""
import os

from . import _pykernels

python_backend = _pykernels

if os.environ.get("PILLARCORAL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    compiled_backend = None
else:
    try:
        from . import _ckernels as _impl
        compiled_backend = _impl
    except ImportError:  # extension not built
        _impl = _pykernels
        compiled_backend = None

BACKEND = "cython" if _impl is not _pykernels else "python"

bev_iou_matrix = _impl.bev_iou_matrix
nms_bev = _impl.nms_bev
intersection_area = _impl.intersection_area
segment_max = _impl.segment_max
