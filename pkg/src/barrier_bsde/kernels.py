"""Backend selection for the hot kernels.

The compiled extension is used when importable; set
``BARRIER_BSDE_PURE_PYTHON=1`` to force the NumPy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("BARRIER_BSDE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py

euler_gbm = _impl.euler_gbm
bridge_path_weights = _impl.bridge_path_weights
# fused one-hidden-layer net; the NumPy stand-in is the generic layer code in ``nn``
mlp1_forward = getattr(_impl, "mlp1_forward", None)
mlp1_backward = getattr(_impl, "mlp1_backward", None)

__all__ = ["BACKEND", "euler_gbm", "bridge_path_weights", "mlp1_forward", "mlp1_backward"]
