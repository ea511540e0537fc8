"""Kernel dispatch: compiled extension when present, numpy otherwise.

Both backends implement the same two entry points with bit-identical
results; ``BACKEND`` records which one got picked at import time.
"""
from __future__ import annotations

import numpy as np

from vistok.errors import ShapeError

try:  # pragma: no cover - exercised only when the extension is built
    from vistok._kernels import _core as _impl

    BACKEND = "compiled"
except ImportError:  # pragma: no cover
    from vistok._kernels import _fallback as _impl

    BACKEND = "numpy"

from vistok._kernels import _fallback as reference


def nearest_code(queries: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Nearest codebook row per query, squared Euclidean, lowest index wins."""
    q = np.ascontiguousarray(queries, dtype=np.float64)
    cb = np.ascontiguousarray(codebook, dtype=np.float64)
    if q.ndim != 2 or cb.ndim != 2:
        raise ShapeError("nearest_code", f"need 2-d inputs, got {q.shape} and {cb.shape}")
    if q.shape[1] != cb.shape[1]:
        raise ShapeError("nearest_code", f"dim mismatch: {q.shape} vs {cb.shape}")
    if cb.shape[0] == 0:
        raise ShapeError("nearest_code", "empty codebook")
    if q.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return np.asarray(_impl.nearest_code(q, cb))


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """Fused in-place Adam step on flat float32 buffers."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError("adam_update", "parameter/gradient/state shapes differ")
    if step < 1:
        raise ValueError("adam_update: step counter must be >= 1")
    views = []
    for name, a in (("param", param), ("grad", grad), ("m", m), ("v", v)):
        if a.dtype != np.float32:
            raise ShapeError("adam_update", f"{name} must be float32, got {a.dtype}")
        if not a.flags.c_contiguous:
            raise ShapeError("adam_update", f"{name} must be contiguous")
        views.append(a.reshape(-1))
    _impl.adam_update(views[0], views[1], views[2], views[3],
                      float(lr), float(beta1), float(beta2), float(eps), int(step))
