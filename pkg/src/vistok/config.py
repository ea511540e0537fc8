"""Flat key=value run configuration.

One file, one namespace, every key typed by its default. `#` starts a
comment, blank lines are skipped, unknown keys are errors (typos should
not become silent defaults). The VISTOK_SEED environment variable
overrides the default seed but never an explicit one.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from vistok.errors import ConfigError

SEED_ENV = "VISTOK_SEED"


@dataclass
class Config:
    seed: int = 0

    # tokenizer architecture
    patch_size: int = 8
    temporal_patch: int = 4
    hidden: int = 128
    heads: int = 4
    spatial_layers: int = 4
    temporal_layers: int = 4
    window: int = 4
    latent_dim: int = 8
    codebook_size: int = 512
    normalize_codes: bool = True
    mlp_ratio: int = 4
    max_grid: int = 12
    max_slots: int = 5

    # curriculum
    stage1_iters: int = 300
    stage2_iters: int = 700
    image_resolution: int = 32
    joint_resolutions: tuple = (32, 64)
    modality_rule: str = "alternate"
    video_frames: int = 9
    batch_size: int = 8

    # optimizer
    base_lr: float = 1e-3
    warmup_iters: int = 40
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1e-6

    # data
    data_kind: str = "moving-shapes"
    image_kind: str = "moving-shapes"
    dataset_size: int = 64
    data_seed: int = 101

    # usage counters roll over every this many iterations, so the logged
    # usage/perplexity reflect current codebook behavior; 0 = never reset
    usage_reset_every: int = 0

    # gaussian fine-tune
    kl_iters: int = 500
    kl_lr: float = 2e-4
    kl_warmup: int = 20

    # token language model
    lm_dim: int = 128
    lm_layers: int = 2
    lm_heads: int = 4
    lm_context: int = 320
    lm_iters: int = 400
    lm_lr: float = 1e-3
    lm_warmup: int = 20
    lm_batch: int = 8
    temperature: float = 1.0
    top_k: int = 0  # 0 means no truncation

    # latent diffusion
    ddpm_steps: int = 100
    ddpm_beta_start: float = 1e-4
    ddpm_beta_end: float = 0.1
    ddpm_dim: int = 64
    ddpm_layers: int = 2
    ddpm_heads: int = 2
    ddpm_iters: int = 500
    ddpm_lr: float = 1e-3
    ddpm_warmup: int = 25

    def validate(self) -> "Config":
        grid_unit = self.patch_size * self.window
        for res in (self.image_resolution, *self.joint_resolutions):
            if res < grid_unit or res % grid_unit:
                raise ConfigError(
                    f"resolution {res} must be a positive multiple of patch*window = {grid_unit}")
        if (self.video_frames - 1) % self.temporal_patch or self.video_frames < 1:
            raise ConfigError(
                f"video_frames {self.video_frames} must be 1 + k*{self.temporal_patch}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.lm_dim % self.lm_heads or self.ddpm_dim % self.ddpm_heads:
            raise ConfigError("lm_dim/ddpm_dim must be divisible by their head counts")
        top_res = max(self.image_resolution, *self.joint_resolutions)
        if top_res // self.patch_size > self.max_grid:
            raise ConfigError(
                f"max_grid {self.max_grid} too small for resolution {top_res}")
        if 1 + (self.video_frames - 1) // self.temporal_patch > self.max_slots:
            raise ConfigError(f"max_slots {self.max_slots} too small for {self.video_frames} frames")
        if self.modality_rule not in ("alternate", "video_only", "image_only"):
            raise ConfigError(f"unknown modality_rule {self.modality_rule!r}")
        if self.codebook_size < 1:
            raise ConfigError("codebook_size must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")
        if not (0 < self.ddpm_beta_start <= self.ddpm_beta_end < 1):
            raise ConfigError("need 0 < ddpm_beta_start <= ddpm_beta_end < 1")
        if self.ddpm_steps < 1:
            raise ConfigError("ddpm_steps must be >= 1")
        for name in ("batch_size", "dataset_size", "lm_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("stage lengths must be >= 0")
        if self.stage1_iters + self.stage2_iters < 1:
            raise ConfigError("curriculum needs at least one iteration")
        if self.usage_reset_every < 0:
            raise ConfigError("usage_reset_every must be >= 0")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(key: str, raw: str):
    default = _FIELDS[key].default
    kind = type(default) if default is not None else str
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> Config:
    """Defaults <- file <- explicit overrides <- seed env var (defaults only)."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    seed_was_explicit = "seed" in values
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val) if isinstance(val, str) else val
        if key == "seed":
            seed_was_explicit = True
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and not seed_was_explicit:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    return Config(**values).validate()


def dump_config(cfg: Config) -> str:
    """Stable text form, reparseable by parse_config_text."""
    lines = []
    for name in sorted(_FIELDS):
        val = getattr(cfg, name)
        if isinstance(val, tuple):
            rendered = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            rendered = "true" if val else "false"
        elif isinstance(val, float):
            rendered = repr(val)
        else:
            rendered = str(val)
        lines.append(f"{name} = {rendered}")
    return "\n".join(lines) + "\n"
