"""Latent heads: vector quantization and the gaussian reparameterized head.

The codebook keeps factorized low-dimensional codes: encoder tokens are
projected down (bias-free, so positive rescaling of the input cannot flip
the chosen code when normalization is on), matched against l2-normalized
entries, and the winner is lifted back up. Gradients take the
straight-through route around the non-differentiable selection.
"""
from __future__ import annotations

import numpy as np

from vistok import _kernels
from vistok import tensor as T
from vistok.errors import ShapeError
from vistok.model import TokenField
from vistok.nn import Linear, Module
from vistok.rng import RngStream
from vistok.tensor import Tensor

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class Codebook(Module):
    def __init__(self, size: int, dim: int, channels: int, rng: RngStream,
                 normalize: bool = True):
        if size < 1 or dim < 1:
            raise ValueError(f"codebook needs size >= 1 and dim >= 1, got {size}x{dim}")
        raw = rng.normal((size, dim)).astype(np.float64)
        raw /= np.sqrt((raw**2).sum(axis=1, keepdims=True))
        self.entries = Tensor(raw.astype(np.float32), requires_grad=True)
        self.proj_down = Linear(channels, dim, rng.child("down"), bias=False)
        self.proj_up = Linear(dim, channels, rng.child("up"), bias=False)
        self.normalize = normalize
        self.usage = np.zeros(size, dtype=np.int64)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def renormalize(self):
        """Project entries back to unit norm (call after each optimizer step)."""
        e = self.entries.data.astype(np.float64)
        norms = np.sqrt((e**2).sum(axis=1, keepdims=True))
        norms[norms == 0.0] = 1.0
        self.entries.data = (e / norms).astype(np.float32)

    def reset_usage(self):
        self.usage[:] = 0


def project_codes(field: TokenField, cb: Codebook) -> Tensor:
    """Encoder tokens down to code width, flattened to (N, dim)."""
    b, s, h, w, c = field.emb.shape
    if c != cb.proj_down.weight.shape[0]:
        raise ShapeError("quantize", f"field width {c} vs projection {cb.proj_down.weight.shape[0]}")
    flat = T.reshape(field.emb, (b * s * h * w, c))
    e_hat = cb.proj_down(flat)
    if cb.normalize:
        e_hat = T.l2_normalize(e_hat, axis=-1)
    return e_hat


def quantize(field: TokenField, cb: Codebook, lambda1: float = 1.0,
             lambda2: float = 1.0, frozen_indices=None):
    """Snap each token to its nearest code.

    Returns (decoder-width field, index grid, commitment loss). The loss is
    lambda1*||sg[e]-z_q||^2 + lambda2*||e-sg[z_q]||^2 summed over tokens;
    the returned field carries code values forward but routes gradient to
    the encoder path. ``frozen_indices`` bypasses the nearest-neighbour
    search so a finite-difference probe can hold the selection fixed.
    """
    b, s, h, w, _ = field.emb.shape
    e_hat = project_codes(field, cb)
    if frozen_indices is None:
        idx = _kernels.nearest_code(e_hat.data, cb.entries.data)
    else:
        idx = np.asarray(frozen_indices, dtype=np.int64).reshape(-1)
        if idx.shape[0] != e_hat.shape[0]:
            raise ShapeError("quantize", f"{idx.shape[0]} frozen indices for {e_hat.shape[0]} tokens")
    zq_vals = cb.entries.data[idx]

    codes = T.gather_rows(cb.entries, idx)
    pull = T.reduce_sum(T.square(T.add(codes, T.scale(Tensor(e_hat.data), -1.0))))
    push = T.reduce_sum(T.square(T.add(e_hat, Tensor(-zq_vals))))
    loss = T.add(T.scale(pull, lambda1), T.scale(push, lambda2))

    ste = T.st_copy(zq_vals, e_hat)
    lifted = cb.proj_up(ste)
    z_field = T.reshape(lifted, (b, s, h, w, lifted.shape[-1]))

    cb.usage += np.bincount(idx, minlength=cb.size)
    return z_field, idx.reshape(b, s, h, w), loss


def lookup(cb: Codebook, indices) -> Tensor:
    """Indices back to a decoder-width field, bit-identical to quantize's output."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("lookup", f"indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise ShapeError("lookup", f"index out of range for codebook of {cb.size}")
    flat = idx.reshape(-1)
    vals = Tensor(cb.entries.data[flat])
    lifted = cb.proj_up(vals)
    return T.reshape(lifted, idx.shape + (lifted.shape[-1],))


def codebook_stats(cb: Codebook):
    """Usage fraction and perplexity of the counts accumulated so far."""
    total = int(cb.usage.sum())
    if total == 0:
        raise ValueError("codebook_stats: no tokens quantized since the last reset")
    p = cb.usage.astype(np.float64) / total
    nz = p[p > 0]
    perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
    return {"usage": float((cb.usage > 0).mean()), "perplexity": perplexity}


class KLHead(Module):
    """Token-wise gaussian posterior with reparameterized sampling."""

    def __init__(self, channels: int, dim: int, rng: RngStream):
        self.mean_map = Linear(channels, dim, rng.child("mean"))
        self.logvar_map = Linear(channels, dim, rng.child("logvar"))
        self.up = Linear(dim, channels, rng.child("up"), bias=False)

    def init_from_codebook(self, cb: Codebook):
        """Warm-start the up-projection from a trained quantizer's."""
        self.up.weight.data = cb.proj_up.weight.data.copy()

    def __call__(self, field: TokenField, rng: RngStream | None = None, sample: bool = True):
        """Returns (latent field (B,S,h,w,dim), kl summed over tokens, mean, logvar)."""
        mean = self.mean_map(field.emb)
        logvar = T.clamp(self.logvar_map(field.emb), LOGVAR_MIN, LOGVAR_MAX)
        if sample:
            if rng is None:
                raise ValueError("kl head: sampling requires an rng stream")
            eps = rng.normal(mean.shape)
            z = T.add(mean, T.mul(T.exp(T.scale(logvar, 0.5)), Tensor(eps)))
        else:
            z = mean
        n = float(mean.size)
        kl = T.scale(
            T.reduce_sum(T.square(mean)) + T.reduce_sum(T.exp(logvar)) - n
            - T.reduce_sum(logvar),
            0.5,
        )
        return z, kl, mean, logvar
