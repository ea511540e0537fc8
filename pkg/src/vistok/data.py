"""Synthetic clips for desk-scale runs. Everything lives in [-1, 1].

Three families: "moving-shapes" (a colored square bouncing over a static
gradient background; the class id fixes the motion direction, so a
conditional generator has something real to learn), "gradient-texture"
(still images: tilted plane plus a sinusoid), and "checkerboard" (still
images whose class is the cell-size/phase combination).
"""
from __future__ import annotations

import numpy as np

from vistok.rng import RngStream

KINDS = ("moving-shapes", "gradient-texture", "checkerboard")

# class id -> (dx, dy), right/down/left/up, in pixels per frame
DIRECTIONS = ((2, 0), (0, 2), (-2, 0), (0, -2))
N_CLASSES = 4


def _background(rng: RngStream, res: int) -> np.ndarray:
    b0, b1 = rng.uniform((2,), -0.9, -0.1)
    col = np.linspace(float(b0), float(b1), res, dtype=np.float32)
    return np.repeat(col[:, None, None], 3, axis=2) * np.ones((res, res, 1), np.float32)


def _bounce(pos: int, vel: int, limit: int):
    pos += vel
    if pos < 0:
        pos, vel = -pos, -vel
    elif pos > limit:
        pos, vel = 2 * limit - pos, -vel
    return pos, vel


def _moving_shapes(rng: RngStream, res: int, frames: int, label: int) -> np.ndarray:
    size = max(2, res // 4)
    limit = res - size
    bg = _background(rng.child("bg"), res)
    # static texture so consecutive frames differ only where the square is
    amp = float(rng.child("amp").uniform((1,), 0.05, 0.3)[0])
    noise = rng.child("noise").uniform((res, res, 3), -1.0, 1.0) * amp
    bg = np.clip(bg + noise, -1.0, 1.0)
    color = rng.uniform((3,), 0.3, 0.95)
    x = int(rng.child("x").integers(0, limit + 1, 1)[0])
    y = int(rng.child("y").integers(0, limit + 1, 1)[0])
    dx, dy = DIRECTIONS[label]
    out = np.empty((1 + frames, res, res, 3), np.float32)
    for f in range(1 + frames):
        canvas = bg.copy()
        canvas[y : y + size, x : x + size] = color
        out[f] = canvas
        x, dx = _bounce(x, dx, limit)
        y, dy = _bounce(y, dy, limit)
    return out


def _gradient_texture(rng: RngStream, res: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, res), np.linspace(-1, 1, res), indexing="ij")
    gx, gy = rng.uniform((2,), -0.4, 0.4)
    freq = rng.uniform((2,), 1.0, 4.0)
    phase = float(rng.uniform((1,), 0, 2 * np.pi)[0])
    amp = float(rng.uniform((1,), 0.1, 0.4)[0])
    base = gx * xx + gy * yy + amp * np.sin(freq[0] * np.pi * xx + freq[1] * np.pi * yy + phase)
    img = np.stack([base, base * 0.8, base * 0.6], axis=-1)
    return np.clip(img, -1.0, 1.0).astype(np.float32)[None]


def _checkerboard(rng: RngStream, res: int, label: int) -> np.ndarray:
    cell = res // 8 if label % 2 == 0 else res // 4
    phase = label // 2
    a, b = rng.uniform((2,), -0.9, 0.9)
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    board = ((yy // cell + xx // cell + phase) % 2).astype(np.float32)
    img = board * float(a) + (1.0 - board) * float(b)
    return np.repeat(img[:, :, None], 3, axis=2).astype(np.float32)[None]


def synth_dataset_labeled(kind: str, n: int, resolution: int, frames: int, seed: int):
    """Returns (clips, labels). Each clip is (1+frames, res, res, 3) float32."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if frames < 0:
        raise ValueError("frames must be >= 0")
    if kind in ("gradient-texture", "checkerboard") and frames != 0:
        raise ValueError(f"{kind} generates still images; got frames={frames}")
    root = RngStream(seed).child(("dataset", kind, resolution, frames))
    clips, labels = [], []
    for i in range(n):
        rng = root.child(("sample", i))
        label = i % N_CLASSES
        if kind == "moving-shapes":
            clip = _moving_shapes(rng, resolution, frames, label)
        elif kind == "gradient-texture":
            clip = _gradient_texture(rng, resolution)
            label = 0
        else:
            clip = _checkerboard(rng, resolution, label)
        assert clip.min() >= -1.0 and clip.max() <= 1.0
        clips.append(clip)
        labels.append(label)
    return clips, np.array(labels, dtype=np.int64)


def synth_dataset(kind: str, n: int, resolution: int, frames: int, seed: int):
    """Like synth_dataset_labeled, labels dropped."""
    clips, _ = synth_dataset_labeled(kind, n, resolution, frames, seed)
    return clips
