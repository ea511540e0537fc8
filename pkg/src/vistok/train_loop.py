"""End-to-end training runs built from the step functions.

Each run derives every random draw from the config seed through named
child streams, logs one tab-separated line per iteration, and finishes
with a checkpoint whose bytes are a pure function of the run, so a
repeated run with the same config produces identical logs and files.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from vistok import tensor as T
from vistok.config import Config, dump_config
from vistok.data import N_CLASSES, synth_dataset_labeled
from vistok.diffusion import DenoiserNet, DiffusionConfig, ddpm_train_loss
from vistok.errors import ConfigError
from vistok.lm import TokenLM, flatten_raster, batched_lm_loss, encode_to_grid
from vistok.model import NetConfig, PatchConfig, Tokenizer
from vistok.quantize import Codebook, KLHead, codebook_stats, quantize
from vistok.rng import RngStream
from vistok.serialize import load_checkpoint, save_checkpoint
from vistok.train import Adam, StageSchedule, lr_at, schedule_at, train_step_kl, train_step_vq
from vistok.train import recon_loss
from vistok.tensor import Tensor


@dataclass
class RunResult:
    out_dir: str
    metrics_path: str
    checkpoint_path: str
    rows: list = field(default_factory=list)
    modules: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


def build_tokenizer(cfg: Config, rng: RngStream):
    pcfg = PatchConfig(cfg.patch_size, cfg.temporal_patch, cfg.hidden)
    ncfg = NetConfig(cfg.spatial_layers, cfg.temporal_layers, cfg.window,
                     cfg.heads, cfg.latent_dim, cfg.mlp_ratio,
                     cfg.max_grid, cfg.max_slots)
    tok = Tokenizer(pcfg, ncfg, rng.child("model"))
    cb = Codebook(cfg.codebook_size, cfg.latent_dim, cfg.hidden,
                  rng.child("cb"), normalize=cfg.normalize_codes)
    return tok, cb


class DatasetCache:
    """Lazily built synthetic sets, one per (modality, resolution)."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self._sets = {}

    def get(self, modality: str, resolution: int):
        """Returns (clips, labels); images are single-frame clips."""
        key = (modality, resolution)
        if key not in self._sets:
            cfg = self.cfg
            if modality == "image":
                self._sets[key] = synth_dataset_labeled(
                    cfg.image_kind, cfg.dataset_size, resolution, 0, cfg.data_seed)
            elif modality == "video":
                self._sets[key] = synth_dataset_labeled(
                    cfg.data_kind, cfg.dataset_size, resolution,
                    cfg.video_frames - 1, cfg.data_seed)
            else:
                raise ValueError(f"unknown modality {modality!r}")
        return self._sets[key]


def _draw_batch(cache: DatasetCache, modality: str, resolution: int,
                batch_size: int, rng: RngStream):
    clips, labels = cache.get(modality, resolution)
    idx = rng.integers(0, len(clips), batch_size)
    return np.stack([clips[i] for i in idx]), labels[idx]


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


class MetricsLog:
    """One tab-separated line per iteration, flushed as it goes."""

    COLUMNS = ("iter", "stage", "modality", "resolution", "lr",
               "recon", "vq_or_kl", "usage", "perplexity")

    def __init__(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self.rows = []

    def write(self, **values):
        row = {k: values[k] for k in self.COLUMNS}
        self.rows.append(row)
        self._fh.write("\t".join(_fmt(row[k]) for k in self.COLUMNS) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _schedule_from(cfg: Config) -> StageSchedule:
    sched = StageSchedule(cfg.stage1_iters, cfg.stage2_iters, cfg.image_resolution,
                          tuple(cfg.joint_resolutions), cfg.modality_rule,
                          cfg.video_frames)
    sched.validate_grid(cfg.patch_size, cfg.window, cfg.temporal_patch)
    return sched


def run_vq_training(cfg: Config, out_dir: str) -> RunResult:
    """The two-stage quantizer curriculum, start to finish."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    root = RngStream(cfg.seed)
    tok, cb = build_tokenizer(cfg, root)
    sched = _schedule_from(cfg)
    opt = Adam(list(tok.named_parameters()) + list(cb.named_parameters()),
               beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
               clip_norm=cfg.grad_clip)
    cache = DatasetCache(cfg)
    log = MetricsLog(os.path.join(out_dir, "metrics.tsv"))
    total = sched.total_iters
    for it in range(total):
        stage, modality, resolution = schedule_at(it, sched, root)
        if cfg.usage_reset_every and it and it % cfg.usage_reset_every == 0:
            cb.reset_usage()
        batch, _ = _draw_batch(cache, modality, resolution, cfg.batch_size,
                               root.child(("batch", it)))
        m = train_step_vq(batch, tok, cb, opt, lr_at(it, total, cfg.base_lr, cfg.warmup_iters),
                          lambda1=cfg.lambda1, lambda2=cfg.lambda2)
        stats = codebook_stats(cb)
        log.write(iter=it, stage=stage, modality=modality, resolution=resolution,
                  lr=lr_at(it, total, cfg.base_lr, cfg.warmup_iters),
                  recon=m.recon, vq_or_kl=m.head,
                  usage=stats["usage"], perplexity=stats["perplexity"])
    log.close()

    ckpt = os.path.join(out_dir, "tokenizer_vq.otck")
    arrays = {f"tok.{k}": v for k, v in tok.state_dict().items()}
    arrays.update({f"cb.{k}": v for k, v in cb.state_dict().items()})
    arrays["cb.usage_counts"] = cb.usage.copy()
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    meta = {"phase": "vq", "step_count": opt.step_count, "config": dump_config(cfg)}
    save_checkpoint(ckpt, meta, arrays)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    return RunResult(out_dir, log.path, ckpt, log.rows,
                     {"tokenizer": tok, "codebook": cb, "optimizer": opt})


def load_vq_tokenizer(cfg: Config, ckpt_path: str):
    """Rebuild (tokenizer, codebook) from a quantizer checkpoint."""
    meta, arrays = load_checkpoint(ckpt_path)
    if meta.get("phase") != "vq":
        raise ConfigError(f"{ckpt_path}: expected a quantizer checkpoint, "
                          f"found phase {meta.get('phase')!r}")
    root = RngStream(cfg.seed)
    tok, cb = build_tokenizer(cfg, root)
    tok.load_state_dict({k[len("tok."):]: v for k, v in arrays.items()
                         if k.startswith("tok.")})
    cb.load_state_dict({k[len("cb."):]: v for k, v in arrays.items()
                        if k.startswith("cb.") and k != "cb.usage_counts"})
    if "cb.usage_counts" in arrays:
        cb.usage = arrays["cb.usage_counts"].astype(np.int64).copy()
    return tok, cb, meta


def run_kl_finetune(cfg: Config, vq_ckpt: str, out_dir: str) -> RunResult:
    """Swap the quantizer for the gaussian head and fine-tune.

    Refuses checkpoints that did not come out of quantizer training; the
    warm start copies the quantizer's up-projection into the head. The
    codebook itself is frozen out of this phase. Usage/perplexity columns
    are written as zero since no codes are selected here.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    tok, cb, _ = load_vq_tokenizer(cfg, vq_ckpt)
    root = RngStream(cfg.seed)
    head = KLHead(cfg.hidden, cfg.latent_dim, root.child("kl-head"))
    head.init_from_codebook(cb)
    sched = StageSchedule(0, cfg.kl_iters, cfg.image_resolution,
                          tuple(cfg.joint_resolutions), cfg.modality_rule,
                          cfg.video_frames)
    sched.validate_grid(cfg.patch_size, cfg.window, cfg.temporal_patch)
    opt = Adam(list(tok.named_parameters()) + list(head.named_parameters()),
               beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
               clip_norm=cfg.grad_clip)
    cache = DatasetCache(cfg)
    log = MetricsLog(os.path.join(out_dir, "metrics.tsv"))
    for it in range(cfg.kl_iters):
        stage, modality, resolution = schedule_at(it, sched, root)
        batch, _ = _draw_batch(cache, modality, resolution, cfg.batch_size,
                               root.child(("batch", it)))
        lr = lr_at(it, cfg.kl_iters, cfg.kl_lr, cfg.kl_warmup)
        m = train_step_kl(batch, tok, head, opt, lr, root.child(("eps", it)),
                          lambda3=cfg.lambda3)
        log.write(iter=it, stage=stage, modality=modality, resolution=resolution,
                  lr=lr, recon=m.recon, vq_or_kl=m.extra["kl_nats"],
                  usage=0.0, perplexity=0.0)
    log.close()

    ckpt = os.path.join(out_dir, "tokenizer_kl.otck")
    arrays = {f"tok.{k}": v for k, v in tok.state_dict().items()}
    arrays.update({f"head.{k}": v for k, v in head.state_dict().items()})
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    meta = {"phase": "kl", "step_count": opt.step_count, "config": dump_config(cfg),
            "initialized_from": "vq"}
    save_checkpoint(ckpt, meta, arrays)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    return RunResult(out_dir, log.path, ckpt, log.rows,
                     {"tokenizer": tok, "head": head, "codebook": cb})


def load_kl_tokenizer(cfg: Config, ckpt_path: str):
    meta, arrays = load_checkpoint(ckpt_path)
    if meta.get("phase") != "kl":
        raise ConfigError(f"{ckpt_path}: expected a gaussian-head checkpoint, "
                          f"found phase {meta.get('phase')!r}")
    root = RngStream(cfg.seed)
    tok, _ = build_tokenizer(cfg, root)
    head = KLHead(cfg.hidden, cfg.latent_dim, root.child("kl-head"))
    tok.load_state_dict({k[len("tok."):]: v for k, v in arrays.items()
                         if k.startswith("tok.")})
    head.load_state_dict({k[len("head."):]: v for k, v in arrays.items()
                          if k.startswith("head.")})
    tok.head = head
    return tok, head, meta


def evaluate_vq_mse(tok: Tokenizer, cb: Codebook, clips, batch_size: int = 8) -> float:
    """Mean reconstruction MSE over a clip list through the quantized path."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(clips), batch_size):
            batch = np.stack(clips[i:i + batch_size])
            z, _, _ = quantize(tok.encode(batch), cb)
            x_hat = tok.decode(z)
            total += float(recon_loss(Tensor(batch), x_hat).data) * batch.shape[0]
            count += batch.shape[0]
    return total / count


def evaluate_kl_mse(tok: Tokenizer, head: KLHead, clips, batch_size: int = 8) -> float:
    """Mean reconstruction MSE through the posterior mean (no sampling)."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(clips), batch_size):
            batch = np.stack(clips[i:i + batch_size])
            z, _, _, _ = head(tok.encode(batch), sample=False)
            x_hat = tok.decode(head.up(z))
            total += float(recon_loss(Tensor(batch), x_hat).data) * batch.shape[0]
            count += batch.shape[0]
    return total / count


def tokenize_dataset(tok: Tokenizer, cb: Codebook, clips) -> np.ndarray:
    """Index grids (N, slots, h, w) for a list of same-shape clips."""
    return np.stack([encode_to_grid(tok, cb, clip) for clip in clips])


def run_lm_training(cfg: Config, tok: Tokenizer, cb: Codebook, out_dir: str) -> RunResult:
    """Teacher-forced next-token training over the tokenized video set."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    root = RngStream(cfg.seed)
    cache = DatasetCache(cfg)
    clips, labels = cache.get("video", min(cfg.joint_resolutions))
    grids = tokenize_dataset(tok, cb, clips)
    n, s, h, w = grids.shape
    seq_len = s * h * w
    if seq_len > cfg.lm_context:
        raise ConfigError(f"sequences of {seq_len} tokens exceed lm_context {cfg.lm_context}")
    lm = TokenLM(cfg.codebook_size, cfg.lm_dim, cfg.lm_layers, cfg.lm_heads,
                 cfg.lm_context, root.child("lm"), num_classes=N_CLASSES)
    flat = grids.reshape(n, seq_len)
    leads = cfg.codebook_size + labels.astype(np.int64)
    inputs = np.concatenate([leads[:, None], flat[:, :-1]], axis=1)
    opt = Adam(list(lm.named_parameters()), beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps, clip_norm=cfg.grad_clip)
    log = MetricsLog(os.path.join(out_dir, "metrics.tsv"))
    for it in range(cfg.lm_iters):
        pick = root.child(("batch", it)).integers(0, n, cfg.lm_batch)
        lr = lr_at(it, cfg.lm_iters, cfg.lm_lr, cfg.lm_warmup)
        loss = batched_lm_loss(lm, inputs[pick], flat[pick])
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        log.write(iter=it, stage=1, modality="tokens", resolution=min(cfg.joint_resolutions),
                  lr=lr, recon=float(loss.data), vq_or_kl=0.0, usage=0.0, perplexity=0.0)
    log.close()

    ckpt = os.path.join(out_dir, "token_lm.otck")
    arrays = {f"lm.{k}": v for k, v in lm.state_dict().items()}
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    meta = {"phase": "lm", "step_count": opt.step_count, "config": dump_config(cfg),
            "grid": [int(s), int(h), int(w)], "num_classes": N_CLASSES}
    save_checkpoint(ckpt, meta, arrays)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    return RunResult(out_dir, log.path, ckpt, log.rows, {"lm": lm, "grid": (s, h, w)})


def load_lm(cfg: Config, ckpt_path: str):
    meta, arrays = load_checkpoint(ckpt_path)
    if meta.get("phase") != "lm":
        raise ConfigError(f"{ckpt_path}: expected a token-model checkpoint, "
                          f"found phase {meta.get('phase')!r}")
    lm = TokenLM(cfg.codebook_size, cfg.lm_dim, cfg.lm_layers, cfg.lm_heads,
                 cfg.lm_context, RngStream(cfg.seed).child("lm"),
                 num_classes=int(meta.get("num_classes", 0)))
    lm.load_state_dict({k[len("lm."):]: v for k, v in arrays.items()
                        if k.startswith("lm.")})
    return lm, meta


def run_ddpm_training(cfg: Config, tok: Tokenizer, head: KLHead, out_dir: str) -> RunResult:
    """Noise-prediction training over the posterior-mean latents."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    root = RngStream(cfg.seed)
    cache = DatasetCache(cfg)
    clips, labels = cache.get("video", min(cfg.joint_resolutions))
    with T.no_grad():
        latents = []
        for i in range(0, len(clips), cfg.batch_size):
            batch = np.stack(clips[i:i + cfg.batch_size])
            z, _, _, _ = head(tok.encode(batch), sample=False)
            latents.append(z.data)
    latents = np.concatenate(latents, axis=0)
    n, s, h, w, d = latents.shape
    dc = DiffusionConfig(cfg.ddpm_steps, cfg.ddpm_beta_start, cfg.ddpm_beta_end)
    model = DenoiserNet(d, cfg.ddpm_dim, cfg.ddpm_layers, cfg.ddpm_heads,
                        cfg.ddpm_steps, s * h * w, root.child("denoiser"),
                        num_classes=N_CLASSES)
    opt = Adam(list(model.named_parameters()), beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps, clip_norm=cfg.grad_clip)
    log = MetricsLog(os.path.join(out_dir, "metrics.tsv"))
    for it in range(cfg.ddpm_iters):
        step_rng = root.child(("step", it))
        pick = int(step_rng.child("pick").integers(0, n, 1)[0])
        lr = lr_at(it, cfg.ddpm_iters, cfg.ddpm_lr, cfg.ddpm_warmup)
        loss = ddpm_train_loss(latents[pick], model, dc, step_rng.child("noise"),
                               cond=int(labels[pick]))
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        log.write(iter=it, stage=1, modality="latent", resolution=min(cfg.joint_resolutions),
                  lr=lr, recon=float(loss.data), vq_or_kl=0.0, usage=0.0, perplexity=0.0)
    log.close()

    ckpt = os.path.join(out_dir, "denoiser.otck")
    arrays = {f"dn.{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    meta = {"phase": "ddpm", "step_count": opt.step_count, "config": dump_config(cfg),
            "grid": [int(s), int(h), int(w)], "num_classes": N_CLASSES}
    save_checkpoint(ckpt, meta, arrays)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    return RunResult(out_dir, log.path, ckpt, log.rows,
                     {"denoiser": model, "schedule": dc, "grid": (s, h, w)})


def load_denoiser(cfg: Config, ckpt_path: str):
    meta, arrays = load_checkpoint(ckpt_path)
    if meta.get("phase") != "ddpm":
        raise ConfigError(f"{ckpt_path}: expected a denoiser checkpoint, "
                          f"found phase {meta.get('phase')!r}")
    s, h, w = (int(v) for v in meta["grid"])
    model = DenoiserNet(cfg.latent_dim, cfg.ddpm_dim, cfg.ddpm_layers,
                        cfg.ddpm_heads, cfg.ddpm_steps, s * h * w,
                        RngStream(cfg.seed).child("denoiser"),
                        num_classes=int(meta.get("num_classes", 0)))
    model.load_state_dict({k[len("dn."):]: v for k, v in arrays.items()
                           if k.startswith("dn.")})
    dc = DiffusionConfig(cfg.ddpm_steps, cfg.ddpm_beta_start, cfg.ddpm_beta_end)
    return model, dc, (s, h, w), meta
