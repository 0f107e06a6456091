"""Hot numeric kernels with a compiled core and a numpy fallback.

The Cython extension is selected at import when available; set
DANGLE_PURE_PYTHON=1 to force the numpy reference implementations.
``BACKEND`` records which one is active.
"""

import os

from . import _ref

if os.environ.get("DANGLE_PURE_PYTHON"):
    _impl = _ref
    BACKEND = "numpy"
else:
    try:
        from . import _fast as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _ref
        BACKEND = "numpy"

softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
adam_update = _impl.adam_update
scatter_add_rows = _impl.scatter_add_rows

__all__ = [
    "BACKEND",
    "softmax_forward",
    "softmax_backward",
    "layernorm_forward",
    "layernorm_backward",
    "adam_update",
    "scatter_add_rows",
]
