"""Optimization: Adam with global-norm clipping, the warmup/cosine
schedule, the two-stage curriculum, and the per-step loss wiring.

Stage 1 sees fixed-resolution images only. Stage 2 strictly alternates
image and video batches (parity counted from the first stage-2 step) and
draws the batch resolution uniformly from the configured set, one
resolution per batch. Optimizer state carries across the stage boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vistok import _kernels
from vistok import tensor as T
from vistok.errors import NumericFault
from vistok.quantize import Codebook, KLHead, quantize
from vistok.rng import RngStream
from vistok.tensor import Tensor


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8, clip_norm: float = 1.0):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {n: np.zeros(p.data.shape, np.float32) for n, p in self.params}
        self.v = {n: np.zeros(p.data.shape, np.float32) for n, p in self.params}

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.square(p.grad.astype(np.float64)).sum())
        return math.sqrt(total)

    def step(self, lr: float) -> float:
        """Clip, update every parameter that has a gradient, return the raw norm."""
        self.step_count += 1
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NumericFault("optimizer: non-finite gradient norm")
        shrink = None
        if self.clip_norm and norm > self.clip_norm:
            shrink = np.float32(self.clip_norm / norm)
        for name, p in self.params:
            if p.grad is None:
                continue
            g = np.ascontiguousarray(p.grad, dtype=np.float32)
            if shrink is not None:
                g = g * shrink
            _kernels.adam_update(p.data, g, self.m[name], self.v[name],
                                 lr, self.beta1, self.beta2, self.eps, self.step_count)
        return norm

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_arrays(self):
        out = {}
        for name, _ in self.params:
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, step_count: int):
        for name, p in self.params:
            m = np.asarray(arrays[f"m:{name}"], np.float32)
            v = np.asarray(arrays[f"v:{name}"], np.float32)
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for {name}")
            self.m[name] = m.copy()
            self.v[name] = v.copy()
        self.step_count = int(step_count)


def lr_at(it: int, total_iters: int, base_lr: float, warmup_iters: int) -> float:
    """Linear 0 -> base over the warmup, then cosine base -> 0."""
    if total_iters < 1:
        raise ValueError("total_iters must be >= 1")
    if it < 0 or it >= total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters})")
    if warmup_iters > 0 and it < warmup_iters:
        return base_lr * (it + 1) / warmup_iters
    span = max(1, total_iters - warmup_iters)
    progress = (it - warmup_iters) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class StageSchedule:
    stage1_iters: int
    stage2_iters: int
    image_resolution: int
    joint_resolutions: tuple = (32, 64)
    modality_rule: str = "alternate"
    video_frames: int = 9

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("negative stage length")
        if self.modality_rule not in ("alternate", "video_only", "image_only"):
            raise ValueError(f"unknown modality rule {self.modality_rule!r}")
        if not self.joint_resolutions:
            raise ValueError("joint resolution set is empty")

    @property
    def total_iters(self):
        return self.stage1_iters + self.stage2_iters

    def validate_grid(self, patch: int, window: int, temporal_patch: int):
        for r in (self.image_resolution, *self.joint_resolutions):
            if r % (patch * window):
                raise ValueError(f"resolution {r} not divisible by patch*window = {patch * window}")
        if self.video_frames < 1 or (self.video_frames - 1) % temporal_patch:
            raise ValueError(f"video length {self.video_frames} is not 1 + k*{temporal_patch}")


def schedule_at(it: int, sched: StageSchedule, rng_root: RngStream):
    """(stage, modality, resolution) for one iteration; pure given the seed."""
    if it < 0 or it >= sched.total_iters:
        raise ValueError(f"iteration {it} outside the schedule")
    if it < sched.stage1_iters:
        return 1, "image", sched.image_resolution
    j = it - sched.stage1_iters
    if sched.modality_rule == "alternate":
        modality = "image" if j % 2 == 0 else "video"
    elif sched.modality_rule == "video_only":
        modality = "video"
    else:
        modality = "image"
    res_set = sorted(sched.joint_resolutions)
    pick = int(rng_root.child(("resolution", it)).integers(0, len(res_set), 1)[0])
    return 2, modality, res_set[pick]


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over every element (the logged metric)."""
    return T.reduce_mean(T.square(T.add(x_hat, T.scale(x, -1.0))))


def recon_objective(x: Tensor, x_hat: Tensor) -> Tensor:
    """||x - x_hat||^2 summed, the reconstruction term the optimizer sees.

    Keeping the sum (not the mean) preserves the intended balance against
    the commitment and divergence terms, which are sums over tokens with
    weights of 1 and 1e-6 respectively.
    """
    return T.reduce_sum(T.square(T.add(x_hat, T.scale(x, -1.0))))


@dataclass
class StepMetrics:
    total: float
    recon: float
    head: float  # commitment loss for vq, weighted divergence for kl
    grad_norm: float = 0.0
    extra: dict = field(default_factory=dict)


def train_step_vq(batch: np.ndarray, model, cb: Codebook, opt: Adam, lr: float,
                  lambda1: float = 1.0, lambda2: float = 1.0) -> StepMetrics:
    x = Tensor(batch)
    field_ = model.encode(x)
    z, idx, vq_loss = quantize(field_, cb, lambda1=lambda1, lambda2=lambda2)
    x_hat = model.decode(z)
    rec = recon_objective(x, x_hat)
    total = T.add(rec, vq_loss)
    if not np.isfinite(total.data):
        raise NumericFault(f"vq step: loss diverged (recon={rec.data}, vq={vq_loss.data})")
    total.backward()
    norm = opt.step(lr)
    opt.zero_grad()
    if cb.normalize:
        cb.renormalize()
    mse = float(rec.data) / x.size
    return StepMetrics(float(total.data), mse, float(vq_loss.data), norm)


def train_step_kl(batch: np.ndarray, model, head: KLHead, opt: Adam, lr: float,
                  rng: RngStream, lambda3: float = 1e-6) -> StepMetrics:
    x = Tensor(batch)
    field_ = model.encode(x)
    z, kl, _, _ = head(field_, rng=rng, sample=True)
    x_hat = model.decode(head.up(z))
    rec = recon_objective(x, x_hat)
    weighted = T.scale(kl, lambda3)
    total = T.add(rec, weighted)
    if not np.isfinite(total.data):
        raise NumericFault(f"kl step: loss diverged (recon={rec.data}, kl={kl.data})")
    total.backward()
    norm = opt.step(lr)
    opt.zero_grad()
    mse = float(rec.data) / x.size
    return StepMetrics(float(total.data), mse, float(weighted.data), norm,
                       extra={"kl_nats": float(kl.data)})
