"""Hot kernels with a compiled core and a pure-Python fallback.

The Cython extension ``_ckernels`` is used when it was built; otherwise the
NumPy implementation in ``_fallback`` is used. Setting the environment
variable ``GLEASONKIT_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("GLEASONKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

cox_accumulate = _impl.cox_accumulate
rects_intersect_polygon = _impl.rects_intersect_polygon

__all__ = ["BACKEND", "cox_accumulate", "rects_intersect_polygon"]
