"""Autoregressive model over quantizer token grids.

A (slots, h, w) index grid is rasterized temporal-slot-major, then
row-major within each slot, into a flat sequence. The language model is a
stack of causally masked full-attention blocks over that sequence, with a
vocabulary of K codes, an optional class-condition token per class, and a
single start token. Conditioning is a prepended token: it shifts what the
model predicts but is never itself a prediction target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vistok import tensor as T
from vistok.errors import ShapeError
from vistok.nn import Block, Embedding, LayerNorm, Linear, Module, causal_mask
from vistok.rng import RngStream
from vistok.tensor import Tensor


@dataclass
class TokenSequence:
    """Flat token ids plus the grid they came from.

    ``tokens`` holds code ids in [0, K); when ``cond`` was given at
    construction the first element is the encoded class token K + cond.
    ``grid`` is the (slots, h, w) shape the body rasterizes back into.
    """

    tokens: np.ndarray
    grid: tuple
    K: int
    num_classes: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        s, h, w = self.grid
        body = s * h * w
        if self.tokens.size not in (body, body + 1):
            raise ShapeError("token_sequence",
                             f"{self.tokens.size} tokens for grid {self.grid}")
        lead = self.tokens[: self.tokens.size - body]
        if lead.size and not (self.K <= lead[0] < self.K + self.num_classes):
            raise ShapeError("token_sequence",
                             f"leading token {lead[0]} is not a class token")
        rest = self.tokens[self.tokens.size - body:]
        if rest.size and (rest.min() < 0 or rest.max() >= self.K):
            raise ShapeError("token_sequence",
                             f"code ids must lie in [0, {self.K})")

    @property
    def conditioned(self) -> bool:
        return self.tokens.size == int(np.prod(self.grid)) + 1

    @property
    def cond(self):
        """The raw class id, or None."""
        return int(self.tokens[0]) - self.K if self.conditioned else None

    def body(self) -> np.ndarray:
        """Code ids only, condition token stripped."""
        return self.tokens[1:] if self.conditioned else self.tokens


def flatten_raster(grid_indices, K: int, cond: int | None = None,
                   num_classes: int = 0) -> TokenSequence:
    """Rasterize a (slots, h, w) index grid into a TokenSequence.

    Order is C order: all of slot 0 row by row, then slot 1, and so on.
    ``cond`` (a class id in [0, num_classes)) is encoded as K + cond and
    prepended.
    """
    g = np.asarray(grid_indices)
    if g.ndim != 3:
        raise ShapeError("flatten_raster", f"expected (slots, h, w), got {g.shape}")
    if not np.issubdtype(g.dtype, np.integer):
        raise ShapeError("flatten_raster", f"indices must be integers, got {g.dtype}")
    flat = g.reshape(-1).astype(np.int64)
    if cond is not None:
        if not 0 <= cond < num_classes:
            raise ValueError(f"class id {cond} outside [0, {num_classes})")
        flat = np.concatenate([[K + cond], flat])
    return TokenSequence(flat, tuple(g.shape), K, num_classes)


def unflatten(seq: TokenSequence) -> np.ndarray:
    """Inverse of flatten_raster; the condition token does not survive."""
    return seq.body().reshape(seq.grid).copy()


class TokenLM(Module):
    """Causal transformer over code sequences.

    The output head starts at exactly zero, so an untrained model assigns
    the uniform distribution over the K codes regardless of input.
    """

    def __init__(self, K: int, dim: int, n_layers: int, n_heads: int,
                 context: int, rng: RngStream, num_classes: int = 0):
        if K < 1 or context < 1:
            raise ValueError(f"need K >= 1 and context >= 1, got {K}, {context}")
        self.K = K
        self.num_classes = num_classes
        self.bos = K + num_classes
        self.vocab = K + num_classes + 1
        self.context = context
        self.embed = Embedding(self.vocab, dim, rng.child("embed"))
        self.pos = Tensor(rng.normal((context, dim), scale=0.02), requires_grad=True)
        self.blocks = [Block(dim, n_heads, rng.child(("block", i)))
                       for i in range(n_layers)]
        self.norm = LayerNorm(dim)
        self.out = Linear(dim, K, rng.child("out"))
        self.out.weight.data[:] = 0.0

    def __call__(self, ids) -> Tensor:
        """ids: (B, L) ints in [0, vocab) -> logits (B, L, K)."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError("token_lm", f"expected (B, L) ids, got {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ShapeError("token_lm", f"ids must be integers, got {ids.dtype}")
        b, n = ids.shape
        if n > self.context:
            raise ShapeError("token_lm", f"sequence of {n} exceeds context {self.context}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ShapeError("token_lm", f"token id outside [0, {self.vocab})")
        h = self.embed(ids)
        p = T.reshape(T.slice_(self.pos, (slice(0, n),)), (1, n, h.shape[-1]))
        h = T.add(h, p)
        mask = causal_mask(n)
        for blk in self.blocks:
            h = blk(h, mask=mask)
        return self.out(self.norm(h))


def _teacher_pairs(seq: TokenSequence, lm: TokenLM):
    """Input ids and target ids for next-token prediction on one sequence.

    Position i sees the condition (or start) token plus codes before i and
    must predict code i; the lead token is input only.
    """
    body = seq.body()
    if body.size == 0:
        raise ShapeError("lm_loss", "empty token sequence")
    if seq.K != lm.K or seq.num_classes != lm.num_classes:
        raise ShapeError("lm_loss",
                         f"sequence vocab ({seq.K}+{seq.num_classes}) does not "
                         f"match model ({lm.K}+{lm.num_classes})")
    lead = seq.tokens[0] if seq.conditioned else lm.bos
    inputs = np.concatenate([[lead], body[:-1]]).astype(np.int64)
    return inputs, body


def lm_loss(seq: TokenSequence, lm: TokenLM) -> Tensor:
    """Mean next-token cross-entropy in nats over the sequence body."""
    inputs, targets = _teacher_pairs(seq, lm)
    return batched_lm_loss(lm, inputs[None, :], targets[None, :])


def batched_lm_loss(lm: TokenLM, inputs, targets) -> Tensor:
    """Mean cross-entropy over a (B, L) batch of teacher-forced pairs."""
    inputs = np.asarray(inputs, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if inputs.shape != targets.shape or inputs.ndim != 2:
        raise ShapeError("lm_loss", f"inputs {inputs.shape} vs targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= lm.K:
        raise ShapeError("lm_loss", f"targets must be code ids in [0, {lm.K})")
    b, n = targets.shape
    logp = T.log_softmax(lm(inputs), axis=-1)
    onehot = np.zeros((b, n, lm.K), dtype=np.float32)
    bi, ni = np.meshgrid(np.arange(b), np.arange(n), indexing="ij")
    onehot[bi, ni, targets] = 1.0
    return T.scale(T.reduce_sum(T.mul(logp, Tensor(onehot))), -1.0 / (b * n))


def position_losses(seq: TokenSequence, lm: TokenLM) -> np.ndarray:
    """Per-position cross-entropy in nats, shape (len(body),). No gradient."""
    inputs, targets = _teacher_pairs(seq, lm)
    with T.no_grad():
        logp = T.log_softmax(lm(inputs[None, :]), axis=-1).data[0]
    return -logp[np.arange(targets.size), targets].astype(np.float64)


def _draw_token(logits: np.ndarray, temperature: float, top_k: int,
                rng: RngStream) -> int:
    """One categorical draw from f64 logits, truncated to the top_k codes.

    Sorting is stable on the negated logits, so exact ties resolve toward
    the lower code id; temperature 0 (or top_k 1) degenerates to that
    argmax choice.
    """
    order = np.argsort(-logits, kind="stable")
    keep = order[:top_k]
    if temperature == 0.0 or top_k == 1:
        return int(keep[0])
    z = (logits[keep] - logits[keep[0]]) / temperature
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(keep, p=p))


def ar_sample(lm: TokenLM, grid: tuple, rng: RngStream, cond: int | None = None,
              temperature: float = 1.0, top_k: int | None = None) -> np.ndarray:
    """Sample a full (slots, h, w) grid of code ids, one token at a time.

    ``temperature`` scales the logits (0 means greedy); ``top_k`` keeps
    only the k most likely codes before the draw (None means all K).
    """
    if top_k is None:
        top_k = lm.K
    if not 1 <= top_k <= lm.K:
        raise ValueError(f"top_k must lie in [1, {lm.K}], got {top_k}")
    if temperature < 0.0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    s, h, w = grid
    n_tok = s * h * w
    if n_tok > lm.context:
        raise ShapeError("ar_sample", f"grid needs {n_tok} tokens, context is {lm.context}")
    if cond is None:
        lead = lm.bos
    else:
        if not 0 <= cond < lm.num_classes:
            raise ValueError(f"class id {cond} outside [0, {lm.num_classes})")
        lead = lm.K + cond
    ids = [int(lead)]
    out = []
    with T.no_grad():
        for _ in range(n_tok):
            logits = lm(np.asarray([ids], dtype=np.int64)).data[0, -1].astype(np.float64)
            tok = _draw_token(logits, temperature, top_k, rng)
            out.append(tok)
            ids.append(tok)
    return np.asarray(out, dtype=np.int64).reshape(grid)


def encode_to_grid(tokenizer, cb, clip) -> np.ndarray:
    """Pixels to the nearest-code index grid (slots, h, w), inference only.

    Unlike the training-path quantizer this does not touch usage counters
    or build a loss.
    """
    from vistok import _kernels
    from vistok.quantize import project_codes

    with T.no_grad():
        field = tokenizer.encode(clip)
        e_hat = project_codes(field, cb)
        idx = _kernels.nearest_code(e_hat.data, cb.entries.data)
    _, s, h, w, _ = field.emb.shape
    return idx.reshape(s, h, w)


def frame_predict(prefix, n_future_slots: int, tokenizer, cb, lm: TokenLM,
                  rng: RngStream, cond: int | None = None,
                  temperature: float = 1.0, top_k: int | None = None,
                  slide: bool = False) -> np.ndarray:
    """Continue a pixel clip by sampling future temporal slots.

    The prefix is tokenized, its code ids become the fixed context, and
    ``n_future_slots`` grid slots are sampled autoregressively; decoded
    pixels for the whole (prefix + future) grid come back. With zero
    future slots this is exactly the quantized reconstruction of the
    prefix. If the context would overflow, ``slide`` drops the oldest
    slot (keeping the lead token) instead of raising.
    """
    if n_future_slots < 0:
        raise ValueError(f"n_future_slots must be >= 0, got {n_future_slots}")
    g0 = encode_to_grid(tokenizer, cb, prefix)
    s0, h, w = g0.shape
    slot = h * w
    history = [int(v) for v in g0.reshape(-1)]
    if cond is None:
        lead = lm.bos
    else:
        if not 0 <= cond < lm.num_classes:
            raise ValueError(f"class id {cond} outside [0, {lm.num_classes})")
        lead = lm.K + cond
    if top_k is None:
        top_k = lm.K
    if not 1 <= top_k <= lm.K:
        raise ValueError(f"top_k must lie in [1, {lm.K}], got {top_k}")

    ids = [int(lead)] + history
    with T.no_grad():
        for _ in range(n_future_slots * slot):
            if len(ids) > lm.context:
                if not slide:
                    raise ShapeError(
                        "frame_predict",
                        f"{len(ids)} tokens exceed context {lm.context}; "
                        "pass slide=True to roll the window")
                while len(ids) > lm.context:
                    del ids[1:1 + slot]
            logits = lm(np.asarray([ids], dtype=np.int64)).data[0, -1].astype(np.float64)
            tok = _draw_token(logits, temperature, top_k, rng)
            ids.append(tok)
            history.append(tok)

    from vistok.quantize import lookup

    full = np.asarray(history, dtype=np.int64).reshape(s0 + n_future_slots, h, w)
    with T.no_grad():
        pixels = tokenizer.decode(lookup(cb, full[None, ...]))
    return pixels.data[0]
