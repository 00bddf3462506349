"""Backend selection for the numeric inner loops.

The compiled ``cgn._kernels`` extension is used when it imports; otherwise the
pure-Python module ``cgn._kernels_py`` takes over. Set ``CGN_PURE_PYTHON=1``
to force the fallback.
"""
import os

from cgn import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CGN_PURE_PYTHON", "") != "1":
    try:
        from cgn import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

label4 = _impl.label4
histogram256 = _impl.histogram256
bilinear_resize = _impl.bilinear_resize
auc_midrank = _impl.auc_midrank
chamfer_min_sq = _impl.chamfer_min_sq

__all__ = [
    "BACKEND",
    "label4",
    "histogram256",
    "bilinear_resize",
    "auc_midrank",
    "chamfer_min_sq",
]
