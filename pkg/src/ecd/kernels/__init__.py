"""Backend selection for the sliding-window correlation kernel.

The compiled Cython kernel is preferred; a numpy implementation is the
fallback. Set ECD_FORCE_NUMPY=1 to skip the extension (used by the
benchmark and by tests that compare backends).
"""
import os

import numpy as np

from . import numpy_backend

_force_numpy = os.environ.get("ECD_FORCE_NUMPY", "") == "1"

try:
    if _force_numpy:
        raise ImportError
    from . import _corr  # compiled extension

    BACKEND = "cython"
except ImportError:
    _corr = None
    BACKEND = "numpy"


def correlate_valid_raw(reference: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Unchecked valid-mode correlation; shape checks live in ecd.ops."""
    if _corr is not None and reference.dtype == patch.dtype:
        if reference.dtype == np.float32:
            return _corr.correlate_valid_f32(
                np.ascontiguousarray(reference), np.ascontiguousarray(patch)
            )
        if reference.dtype == np.float64:
            return _corr.correlate_valid_f64(
                np.ascontiguousarray(reference), np.ascontiguousarray(patch)
            )
    return numpy_backend.correlate_valid(reference, patch)


def best_match_raw(refs: np.ndarray, patch: np.ndarray):
    """Argmax of correlate_valid over a (K, d, H, W) reference stack.

    Returns (k, top, left, similarity) with ties broken by lowest k then
    raster order of the offset.
    """
    if _corr is not None and refs.dtype == patch.dtype == np.float32:
        return _corr.best_match_f32(
            np.ascontiguousarray(refs), np.ascontiguousarray(patch)
        )
    return numpy_backend.best_match(refs, patch)
