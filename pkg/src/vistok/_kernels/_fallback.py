"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the compiled extension in ``_core.pyx``
must match them bit-for-bit. Distances in ``nearest_code`` accumulate in
float64 in index order over the last axis (numpy's pairwise summation is
sequential for axis lengths < 128, which the latent dimension always is),
so the compiled loop and this fallback agree exactly.
"""
from __future__ import annotations

import numpy as np

# Rows per chunk: keeps the (chunk, K, d) distance workspace around ~32 MB
# for K=8192, d=8 in float64.
_CHUNK = 64


def nearest_code(queries: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row (squared Euclidean) per query.

    queries: (N, d) float64, C-contiguous. codebook: (K, d) float64.
    Ties break to the lowest index. Returns (N,) int64.
    """
    n = queries.shape[0]
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, _CHUNK):
        block = queries[start : start + _CHUNK]
        diff = block[:, None, :] - codebook[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        out[start : start + _CHUNK] = np.argmin(d2, axis=1)
    return out


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    step: int,
) -> None:
    """One fused Adam step, in place, float32 throughout.

    Operation order is fixed (and mirrored by the compiled kernel):
      m   = b1*m + (1-b1)*g
      v   = b2*v + (1-b2)*(g*g)
      p  -= (lr * (m/bc1)) / (sqrt(v/bc2) + eps)
    with bias corrections bc1 = 1-b1^step, bc2 = 1-b2^step.
    """
    b1 = np.float32(beta1)
    omb1 = np.float32(1.0 - beta1)
    b2 = np.float32(beta2)
    omb2 = np.float32(1.0 - beta2)
    bc1 = np.float32(1.0 - beta1**step)
    bc2 = np.float32(1.0 - beta2**step)
    lr32 = np.float32(lr)
    eps32 = np.float32(eps)

    m *= b1
    m += omb1 * grad
    gg = grad * grad
    v *= b2
    v += omb2 * gg
    mhat = m / bc1
    vhat = v / bc2
    denom = np.sqrt(vhat)
    denom += eps32
    upd = (lr32 * mhat) / denom
    param -= upd
