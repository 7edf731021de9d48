"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``GZSL_MOE_PURE=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
topk_select = _kernels_py.topk_select
knn_descriptors = _kernels_py.knn_descriptors
gelu = _kernels_py.gelu
gelu_backward = _kernels_py.gelu_backward
adam_step = _kernels_py.adam_step

if os.environ.get("GZSL_MOE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        topk_select = _ckernels.topk_select
        knn_descriptors = _ckernels.knn_descriptors
        gelu = _ckernels.gelu
        gelu_backward = _ckernels.gelu_backward
        adam_step = _ckernels.adam_step

__all__ = ["BACKEND", "topk_select", "knn_descriptors", "gelu", "gelu_backward", "adam_step"]
