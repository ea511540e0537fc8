"""Small module system on top of the tensor core.

Parameter discovery walks instance attributes in sorted order, so the
parameter naming (and with it checkpoint layout, gradient clipping and
optimizer state) is deterministic for a given architecture.
"""
from __future__ import annotations

import numpy as np

from vistok import tensor as T
from vistok.errors import ShapeError
from vistok.rng import RngStream
from vistok.tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name in sorted(vars(self)):
            val = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{full}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ShapeError("load_state_dict", f"missing={missing} unexpected={extra}")
        for name, p in mine.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ShapeError("load_state_dict", f"{name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def n_params(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: RngStream, bias: bool = True):
        std = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.normal((in_features, out_features), scale=std), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        normed = T.layer_norm(x, axis=-1, eps=self.eps)
        return T.add(T.mul(normed, self.gamma), self.beta)


class Mlp(Module):
    """Linear / gelu / linear with the usual 4x expansion."""

    def __init__(self, dim: int, rng: RngStream, ratio: int = 4):
        self.fc1 = Linear(dim, dim * ratio, rng.child("fc1"))
        self.fc2 = Linear(dim * ratio, dim, rng.child("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: RngStream):
        if dim % n_heads:
            raise ShapeError("attention", f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = Linear(dim, dim * 3, rng.child("qkv"))
        self.proj = Linear(dim, dim, rng.child("proj"))

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        """x: (B, n, dim); mask: (n, n) bool, True = blocked."""
        b, n, d = x.shape
        h, hd = self.n_heads, self.head_dim
        qkv = self.qkv(x)
        qkv = T.reshape(qkv, (b, n, 3, h, hd))
        qkv = T.permute(qkv, (2, 0, 3, 1, 4))
        q = T.slice_(qkv, (0,))
        k = T.slice_(qkv, (1,))
        v = T.slice_(qkv, (2,))
        att = T.matmul(q, T.permute(k, (0, 1, 3, 2)))
        att = T.scale(att, 1.0 / np.sqrt(hd))
        if mask is not None:
            att = T.masked_fill(att, mask, -1e9)
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v)
        out = T.permute(out, (0, 2, 1, 3))
        out = T.reshape(out, (b, n, d))
        return self.proj(out)


class Block(Module):
    """Pre-norm residual transformer block."""

    def __init__(self, dim: int, n_heads: int, rng: RngStream, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng.child("attn"))
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng.child("mlp"), ratio=mlp_ratio)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x), mask=mask))
        x = T.add(x, self.mlp(self.norm2(x)))
        return x


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: RngStream, scale: float = 0.02):
        self.table = Tensor(rng.normal((rows, dim), scale=scale), requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return T.gather_rows(self.table, indices)


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: position i may not see positions > i."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)
