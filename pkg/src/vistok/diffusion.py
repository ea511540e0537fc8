"""Denoising diffusion over continuous latent grids.

The forward process perturbs a clean latent z0 with gaussian noise whose
schedule is a linearly increasing beta over N steps; the reverse process
is ancestral sampling with a noise-prediction network. Step indices are
1-based: t runs over [1, N], and alpha_bar(0) = 1 by convention.
"""
from __future__ import annotations

import numpy as np

from vistok import tensor as T
from vistok.errors import ShapeError
from vistok.nn import Block, Embedding, LayerNorm, Linear, Module
from vistok.rng import RngStream
from vistok.tensor import Tensor


class DiffusionConfig:
    """Linear beta schedule and its cumulative products.

    Invariants checked at construction: every beta lies in (0, 1), the
    schedule increases, and alpha_bar decreases strictly from just below
    one toward zero.
    """

    def __init__(self, num_steps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.1):
        if num_steps < 1:
            raise ValueError(f"need at least one step, got {num_steps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"betas must satisfy 0 < {beta_start} <= {beta_end} < 1")
        if num_steps > 1 and beta_start == beta_end:
            raise ValueError("constant schedule: beta_start must be < beta_end")
        self.num_steps = int(num_steps)
        self.betas = np.linspace(beta_start, beta_end, num_steps).astype(np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not np.all(np.diff(self.alpha_bars) < 0) and num_steps > 1:
            raise ValueError("alpha_bar failed to decrease strictly")
        if self.alpha_bars[-1] <= 0.0:
            raise ValueError("alpha_bar underflowed to zero; schedule too aggressive")

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t; t=0 is the clean data."""
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside [0, {self.num_steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside [1, {self.num_steps}]")
        return float(self.betas[t - 1])


def ddpm_noise(z0, t: int, eps, dc: DiffusionConfig) -> np.ndarray:
    """Forward process: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError("ddpm_noise", f"z0 {z0.shape} vs eps {eps.shape}")
    if not 1 <= t <= dc.num_steps:
        raise ValueError(f"step {t} outside [1, {dc.num_steps}]")
    ab = dc.alpha_bar(t)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


class DenoiserNet(Module):
    """Noise-prediction transformer over flattened latent token grids.

    Inputs are (B, n, latent_dim) noisy latents; the step index enters as
    a learned embedding added to every token, an optional class id the
    same way. The output projection starts at zero, so the untrained
    network predicts zero noise everywhere.
    """

    def __init__(self, latent_dim: int, dim: int, n_layers: int, n_heads: int,
                 num_steps: int, max_tokens: int, rng: RngStream,
                 num_classes: int = 0):
        self.latent_dim = latent_dim
        self.num_steps = num_steps
        self.max_tokens = max_tokens
        self.num_classes = num_classes
        self.inp = Linear(latent_dim, dim, rng.child("in"))
        self.pos = Tensor(rng.normal((max_tokens, dim), scale=0.02), requires_grad=True)
        self.t_embed = Embedding(num_steps + 1, dim, rng.child("time"))
        self.cls_embed = (Embedding(num_classes, dim, rng.child("cls"))
                          if num_classes else None)
        self.blocks = [Block(dim, n_heads, rng.child(("block", i)))
                       for i in range(n_layers)]
        self.norm = LayerNorm(dim)
        self.out = Linear(dim, latent_dim, rng.child("out"))
        self.out.weight.data[:] = 0.0

    def __call__(self, z_t: Tensor, t: int, cond: int | None = None) -> Tensor:
        if z_t.ndim != 3 or z_t.shape[-1] != self.latent_dim:
            raise ShapeError("denoiser", f"expected (B, n, {self.latent_dim}), got {z_t.shape}")
        b, n, d = z_t.shape
        if n > self.max_tokens:
            raise ShapeError("denoiser", f"{n} tokens exceed table {self.max_tokens}")
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside [1, {self.num_steps}]")
        h = self.inp(z_t)
        dim = h.shape[-1]
        p = T.reshape(T.slice_(self.pos, (slice(0, n),)), (1, n, dim))
        te = T.reshape(self.t_embed(np.asarray([t])), (1, 1, dim))
        h = T.add(T.add(h, p), te)
        if cond is not None:
            if self.cls_embed is None:
                raise ValueError("denoiser built without classes cannot condition")
            if not 0 <= cond < self.num_classes:
                raise ValueError(f"class id {cond} outside [0, {self.num_classes})")
            ce = T.reshape(self.cls_embed(np.asarray([cond])), (1, 1, dim))
            h = T.add(h, ce)
        for blk in self.blocks:
            h = blk(h)
        return self.out(self.norm(h))


def _as_tokens(z) -> tuple[np.ndarray, tuple]:
    """Any (..., d) latent array to (B, n, d) plus the shape to restore."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim < 2:
        raise ShapeError("latents", f"expected at least (n, d), got {z.shape}")
    d = z.shape[-1]
    return z.reshape(1, -1, d), z.shape


def ddpm_train_loss(z0, model, dc: DiffusionConfig, rng: RngStream,
                    cond: int | None = None) -> Tensor:
    """Noise-prediction objective at a uniformly drawn step.

    Draws t ~ U[1, N] and eps ~ N(0, I), forms z_t, and returns
    ||eps - eps_hat||^2 summed over the latent entries of one sample
    (averaged over the batch when z0 has a batch axis of its own).
    A model that always outputs zero scores dim(z) in expectation.
    """
    z0 = np.asarray(z0, dtype=np.float32)
    batch = z0.shape[0] if z0.ndim >= 5 else 1
    t = int(rng.integers(1, dc.num_steps + 1))
    eps = rng.normal(z0.shape)
    z_t = ddpm_noise(z0, t, eps, dc)
    d = z0.shape[-1]
    zt_tok = Tensor(z_t.reshape(batch, -1, d))
    eps_tok = eps.reshape(batch, -1, d)
    eps_hat = model(zt_tok, t, cond)
    diff = T.add(eps_hat, Tensor(-eps_tok))
    return T.scale(T.reduce_sum(T.square(diff)), 1.0 / batch)


def ddpm_reverse_step(x, t: int, eps_hat, dc: DiffusionConfig,
                      noise=None) -> np.ndarray:
    """One ancestral step from x_t to x_{t-1}, given the noise estimate.

    The posterior variance is beta_tilde = (1 - abar_{t-1}) / (1 - abar_t)
    * beta_t, which is zero at t=1, so the final step is deterministic and
    a perfect noise estimate inverts a single-step chain exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x.shape != eps_hat.shape:
        raise ShapeError("ddpm_reverse", f"x {x.shape} vs eps_hat {eps_hat.shape}")
    if not 1 <= t <= dc.num_steps:
        raise ValueError(f"step {t} outside [1, {dc.num_steps}]")
    beta = dc.beta(t)
    alpha = 1.0 - beta
    ab_t = dc.alpha_bar(t)
    mean = (x - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean.astype(np.float32)
    if noise is None:
        raise ValueError("steps above 1 need a noise draw")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x.shape:
        raise ShapeError("ddpm_reverse", f"noise {noise.shape} vs x {x.shape}")
    var = (1.0 - dc.alpha_bar(t - 1)) / (1.0 - ab_t) * beta
    return (mean + np.sqrt(var) * noise).astype(np.float32)


def ddpm_sample(model, grid: tuple, dc: DiffusionConfig, rng: RngStream,
                cond: int | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise down to a clean latent grid.

    ``grid`` is (slots, h, w); the result has shape grid + (latent_dim,).
    Deterministic given the rng stream.
    """
    d = model.latent_dim
    n = int(np.prod(grid))
    if n > model.max_tokens:
        raise ShapeError("ddpm_sample", f"grid needs {n} tokens, model holds {model.max_tokens}")
    x = rng.normal((1, n, d))
    with T.no_grad():
        for t in range(dc.num_steps, 0, -1):
            eps_hat = model(Tensor(x), t, cond).data
            noise = rng.normal(x.shape) if t > 1 else None
            x = ddpm_reverse_step(x, t, eps_hat, dc, noise)
    return x.reshape(tuple(grid) + (d,))
