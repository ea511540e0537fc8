"""Joint image/video tokenizer network.

A clip is patchified into a (slots, h, w) token grid: the first frame on
its own p x p patches, every following group of ``t`` frames as tubelets,
so an image is just the degenerate case with one temporal slot and both
modalities share the rest of the network. Spatial mixing happens inside
disjoint windows per slot; temporal mixing is causal per grid site.
The decoder mirrors the encoder and ends in two bias-free linear
projections back to pixels (no activation), one per patch kind.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vistok import tensor as T
from vistok.errors import ShapeError
from vistok.nn import Block, LayerNorm, Linear, Module, causal_mask
from vistok.rng import RngStream
from vistok.tensor import Tensor


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 8
    temporal_patch: int = 4
    channels: int = 128

    def __post_init__(self):
        if self.patch_size < 1 or self.temporal_patch < 1 or self.channels < 1:
            raise ValueError(f"invalid patch config {self}")


@dataclass(frozen=True)
class NetConfig:
    spatial_layers: int = 4
    temporal_layers: int = 4
    window: int = 4
    n_heads: int = 4
    latent_dim: int = 8
    mlp_ratio: int = 4
    max_grid: int = 12
    max_slots: int = 5

    def __post_init__(self):
        if min(self.spatial_layers, self.temporal_layers, self.window,
               self.n_heads, self.latent_dim, self.max_grid, self.max_slots) < 1:
            raise ValueError(f"invalid net config {self}")


@dataclass
class TokenField:
    """Encoder output: embeddings on the (slots, h, w) grid."""

    emb: Tensor  # (B, S, h, w, c)

    @property
    def grid(self):
        return tuple(self.emb.shape[1:4])

    @property
    def batch(self):
        return self.emb.shape[0]

    @property
    def modality(self):
        return "image" if self.emb.shape[1] == 1 else "video"


def check_clip_shape(shape, pcfg: PatchConfig):
    """Validate a (B, F, H, W, 3) clip against the patch layout."""
    if len(shape) != 5 or shape[-1] != 3:
        raise ShapeError("clip", f"expected (B, F, H, W, 3), got {shape}")
    b, f, hh, ww, _ = shape
    if f < 1 or (f - 1) % pcfg.temporal_patch != 0:
        raise ShapeError("clip", f"frame count {f} is not 1 + k*{pcfg.temporal_patch}")
    if hh % pcfg.patch_size or ww % pcfg.patch_size:
        raise ShapeError("clip", f"resolution {hh}x{ww} not divisible by patch {pcfg.patch_size}")


def as_batched(x) -> Tensor:
    """Accept (F,H,W,3) or (B,F,H,W,3), array or Tensor; return a 5-d Tensor."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 4:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ShapeError("clip", f"expected 4 or 5 dims, got {x.shape}")
    return x


class Patchify(Module):
    """Two bias-free projections: first frame patches, then tubelets."""

    def __init__(self, pcfg: PatchConfig, rng: RngStream):
        p, t, c = pcfg.patch_size, pcfg.temporal_patch, pcfg.channels
        self.pcfg = pcfg
        self.img_proj = Linear(p * p * 3, c, rng.child("img"), bias=False)
        self.vid_proj = Linear(t * p * p * 3, c, rng.child("vid"), bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        pcfg = self.pcfg
        check_clip_shape(x.shape, pcfg)
        b, f, hh, ww, _ = x.shape
        p, t = pcfg.patch_size, pcfg.temporal_patch
        h, w = hh // p, ww // p

        first = T.slice_(x, (slice(None), slice(0, 1)))
        first = T.reshape(first, (b, 1, h, p, w, p, 3))
        first = T.permute(first, (0, 1, 2, 4, 3, 5, 6))
        first = T.reshape(first, (b, 1, h, w, p * p * 3))
        tokens = self.img_proj(first)

        if f > 1:
            s = (f - 1) // t
            rest = T.slice_(x, (slice(None), slice(1, f)))
            rest = T.reshape(rest, (b, s, t, h, p, w, p, 3))
            rest = T.permute(rest, (0, 1, 3, 5, 2, 4, 6, 7))
            rest = T.reshape(rest, (b, s, h, w, t * p * p * 3))
            tokens = T.concat([tokens, self.vid_proj(rest)], axis=1)
        return tokens


class Unpatchify(Module):
    """Decoder tail: tokens back to pixels, linear only."""

    def __init__(self, pcfg: PatchConfig, rng: RngStream):
        p, t, c = pcfg.patch_size, pcfg.temporal_patch, pcfg.channels
        self.pcfg = pcfg
        self.img_proj = Linear(c, p * p * 3, rng.child("img"), bias=False)
        self.vid_proj = Linear(c, t * p * p * 3, rng.child("vid"), bias=False)

    def __call__(self, z: Tensor) -> Tensor:
        pcfg = self.pcfg
        b, s, h, w, _ = z.shape
        p, t = pcfg.patch_size, pcfg.temporal_patch

        first = self.img_proj(T.slice_(z, (slice(None), slice(0, 1))))
        first = T.reshape(first, (b, 1, h, w, p, p, 3))
        first = T.permute(first, (0, 1, 2, 4, 3, 5, 6))
        first = T.reshape(first, (b, 1, h * p, w * p, 3))
        if s == 1:
            return first

        rest = self.vid_proj(T.slice_(z, (slice(None), slice(1, s))))
        rest = T.reshape(rest, (b, s - 1, h, w, t, p, p, 3))
        rest = T.permute(rest, (0, 1, 4, 2, 5, 3, 6, 7))
        rest = T.reshape(rest, (b, (s - 1) * t, h * p, w * p, 3))
        return T.concat([first, rest], axis=1)


class Positions(Module):
    """Learned additive position tables, cropped to the active grid."""

    def __init__(self, ncfg: NetConfig, channels: int, rng: RngStream):
        g, s = ncfg.max_grid, ncfg.max_slots
        self.spatial = Tensor(rng.normal((g, g, channels), scale=0.02), requires_grad=True)
        self.temporal = Tensor(rng.normal((s, channels), scale=0.02), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, s, h, w, c = x.shape
        gmax = self.spatial.shape[0]
        if h > gmax or w > gmax:
            raise ShapeError("positions", f"grid {h}x{w} exceeds table {gmax}x{gmax}")
        if s > self.temporal.shape[0]:
            raise ShapeError("positions", f"{s} temporal slots exceed table {self.temporal.shape[0]}")
        sp = T.reshape(T.slice_(self.spatial, (slice(0, h), slice(0, w))), (1, 1, h, w, c))
        tp = T.reshape(T.slice_(self.temporal, (slice(0, s),)), (1, s, 1, 1, c))
        return T.add(T.add(x, sp), tp)


class WindowBlock(Module):
    """Self-attention over disjoint win x win tiles, one temporal slot at a time."""

    def __init__(self, channels: int, ncfg: NetConfig, rng: RngStream):
        self.win = ncfg.window
        self.block = Block(channels, ncfg.n_heads, rng, mlp_ratio=ncfg.mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        b, s, h, w, c = x.shape
        k = self.win
        if h % k or w % k:
            raise ShapeError("window_attention", f"grid {h}x{w} not divisible by window {k}")
        hw, ww = h // k, w // k
        tiles = T.reshape(x, (b, s, hw, k, ww, k, c))
        tiles = T.permute(tiles, (0, 1, 2, 4, 3, 5, 6))
        tiles = T.reshape(tiles, (b * s * hw * ww, k * k, c))
        tiles = self.block(tiles)
        tiles = T.reshape(tiles, (b, s, hw, ww, k, k, c))
        tiles = T.permute(tiles, (0, 1, 2, 4, 3, 5, 6))
        return T.reshape(tiles, (b, s, h, w, c))


class TemporalBlock(Module):
    """Causal self-attention along the slot axis, one grid site at a time."""

    def __init__(self, channels: int, ncfg: NetConfig, rng: RngStream):
        self.block = Block(channels, ncfg.n_heads, rng, mlp_ratio=ncfg.mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        b, s, h, w, c = x.shape
        seq = T.permute(x, (0, 2, 3, 1, 4))
        seq = T.reshape(seq, (b * h * w, s, c))
        seq = self.block(seq, mask=causal_mask(s))
        seq = T.reshape(seq, (b, h, w, s, c))
        return T.permute(seq, (0, 3, 1, 2, 4))


class Encoder(Module):
    def __init__(self, pcfg: PatchConfig, ncfg: NetConfig, rng: RngStream):
        c = pcfg.channels
        self.patchify = Patchify(pcfg, rng.child("patchify"))
        self.positions = Positions(ncfg, c, rng.child("positions"))
        self.spatial = [WindowBlock(c, ncfg, rng.child(("spatial", i)))
                        for i in range(ncfg.spatial_layers)]
        self.temporal = [TemporalBlock(c, ncfg, rng.child(("temporal", i)))
                         for i in range(ncfg.temporal_layers)]
        self.norm = LayerNorm(c)
        self.head = Linear(c, c, rng.child("head"))

    def __call__(self, x: Tensor) -> TokenField:
        tokens = self.positions(self.patchify(x))
        for blk in self.spatial:
            tokens = blk(tokens)
        for blk in self.temporal:
            tokens = blk(tokens)
        return TokenField(self.head(self.norm(tokens)))


class Decoder(Module):
    def __init__(self, pcfg: PatchConfig, ncfg: NetConfig, rng: RngStream):
        c = pcfg.channels
        self.head = Linear(c, c, rng.child("head"))
        self.positions = Positions(ncfg, c, rng.child("positions"))
        self.temporal = [TemporalBlock(c, ncfg, rng.child(("temporal", i)))
                         for i in range(ncfg.temporal_layers)]
        self.spatial = [WindowBlock(c, ncfg, rng.child(("spatial", i)))
                        for i in range(ncfg.spatial_layers)]
        self.norm = LayerNorm(c)
        self.unpatchify = Unpatchify(pcfg, rng.child("unpatchify"))

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 5 or z.shape[-1] != self.head.weight.shape[0]:
            raise ShapeError("decode", f"expected (B,S,h,w,{self.head.weight.shape[0]}), got {z.shape}")
        x = self.positions(self.head(z))
        for blk in self.temporal:
            x = blk(x)
        for blk in self.spatial:
            x = blk(x)
        return self.unpatchify(self.norm(x))


class Tokenizer(Module):
    """Encoder/decoder pair plus a latent head (vector-quantizer or gaussian).

    ``decode`` routes by the width of what it is given: full-width fields
    go straight to the decoder, latent-width fields are lifted through the
    head's up-projection first.
    """

    def __init__(self, pcfg: PatchConfig, ncfg: NetConfig, rng: RngStream, head: Module | None = None):
        self.pcfg = pcfg
        self.ncfg = ncfg
        self.encoder = Encoder(pcfg, ncfg, rng.child("encoder"))
        self.decoder = Decoder(pcfg, ncfg, rng.child("decoder"))
        self.head = head

    def encode(self, x) -> TokenField:
        return self.encoder(as_batched(x))

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 5:
            raise ShapeError("decode", f"expected a 5-d latent field, got {z.shape}")
        width = z.shape[-1]
        if width == self.pcfg.channels:
            return self.decoder(z)
        if width == self.ncfg.latent_dim:
            if self.head is None or not hasattr(self.head, "up"):
                raise ShapeError("decode", f"no head to lift latent width {width}")
            return self.decoder(self.head.up(z))
        raise ShapeError("decode", f"width {width} is neither channels nor latent dim")

    def grid_for(self, frames: int, resolution: int):
        p, t = self.pcfg.patch_size, self.pcfg.temporal_patch
        check_clip_shape((1, frames, resolution, resolution, 3), self.pcfg)
        return (1 + (frames - 1) // t, resolution // p, resolution // p)
