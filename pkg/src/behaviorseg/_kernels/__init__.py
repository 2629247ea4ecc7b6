"""Hot loops for k-means, compiled when available.

The Cython extension ``_lloyd`` is preferred. Setting the environment variable
``BEHAVIORSEG_PURE_PYTHON=1`` before import forces the numpy fallback, which
is also used automatically when the extension was not built.
"""
import os

from . import _lloyd_py as python_backend

compiled_backend = None
if not os.environ.get("BEHAVIORSEG_PURE_PYTHON"):
    try:
        from . import _lloyd as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

assign_labels = _active.assign_labels
centroid_sums = _active.centroid_sums
update_min_sq_dist = _active.update_min_sq_dist
hartigan_pass = _active.hartigan_pass

__all__ = [
    "BACKEND",
    "assign_labels",
    "centroid_sums",
    "update_min_sq_dist",
    "hartigan_pass",
    "compiled_backend",
    "python_backend",
]
