"""Reconstruction metrics for [-1, 1] pixel data."""
from __future__ import annotations

import math

import numpy as np

from vistok.errors import ShapeError

PSNR_CAP = 99.0
PEAK_SQ = 4.0  # value range spans [-1, 1]


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("mse", f"{a.shape} vs {b.shape}")
    return float(np.mean(np.square(a - b)))


def psnr_from_mse(err: float) -> float:
    """10*log10(peak^2 / mse), capped so perfect reconstructions stay numeric."""
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK_SQ / err))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    return psnr_from_mse(mse(a, b))
