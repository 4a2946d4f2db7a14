"""Run configuration: one flat dataclass, a key=value text format, and
validation against every stage's preconditions at load time."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .conditioning import MODES, ModelConfig, map_blocks_to_layers
from .codec import CodecConfig


@dataclass
class RunConfig:
    seed: int = 0

    # dataset / rendering
    height: int = 32
    width: int = 32
    frames: int = 41
    n_pairs: int = 8
    kf_budget: int = 6
    kf_strategy: str = "uniform"
    swapper: str = "oracle"
    failure_prob: float = 0.3
    artifact_strength: float = 0.1

    # latent codec
    patch: int = 4
    latent_dim: int = 16
    codec_seed: int = 7
    codec_center: float = 0.0

    # model
    model_width: int = 64
    model_depth: int = 4
    model_heads: int = 4
    enc_blocks: int = 4

    # training
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 2
    train_steps: int = 2000
    window: int = 9
    timestep_dist: str = "uniform"
    logit_mu: float = 0.0
    logit_sigma: float = 1.0
    mode: str = "reference"
    target_position: str = "first"
    grayscale_keyframes: bool = False

    # inference
    sample_steps: int = 8
    sampler_init: str = "noise"
    copy_guidance: bool = True
    crop_size: int = 0            # 0 = full frame
    crop_inflate: float = 0.2
    feather: int = 2
    eval_frames: int = 10

    def validate(self) -> "RunConfig":
        if self.height < 8 or self.width < 8:
            raise ValueError("frame dims must be at least 8x8")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"frame dims {self.height}x{self.width} must be divisible by patch {self.patch}")
        CodecConfig(self.patch, self.latent_dim, self.codec_seed, self.codec_center).validate()
        ModelConfig(self.latent_dim, self.model_width, self.model_depth,
                    self.model_heads, self.enc_blocks).validate()
        map_blocks_to_layers(self.enc_blocks, self.model_depth)
        if self.window < 2 or self.window > self.frames:
            raise ValueError("window must be in [2, frames]")
        if not 2 <= self.kf_budget <= self.frames:
            raise ValueError("kf_budget must be in [2, frames]")
        if self.kf_strategy not in ("uniform", "greedy"):
            raise ValueError(f"unknown keyframe strategy {self.kf_strategy!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if self.target_position not in ("first", "last"):
            raise ValueError("target_position must be 'first' or 'last'")
        if self.timestep_dist not in ("uniform", "logit-normal"):
            raise ValueError(f"unknown timestep distribution {self.timestep_dist!r}")
        if self.swapper not in ("oracle", "noisy"):
            raise ValueError(f"unknown swapper {self.swapper!r}")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError("failure_prob must be in [0,1]")
        if self.lr < 0 or self.batch_size < 1 or self.train_steps < 0:
            raise ValueError("bad training hyperparameters")
        if self.sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")
        if self.sampler_init not in ("noise", "source"):
            raise ValueError("sampler_init must be 'noise' or 'source'")
        if self.crop_size and (self.crop_size % self.patch):
            raise ValueError("crop_size must be a multiple of the patch size")
        if self.feather < 0 or not 0.0 <= self.crop_inflate <= 2.0:
            raise ValueError("bad paste-back parameters")
        if self.eval_frames < 1:
            raise ValueError("eval_frames must be >= 1")
        return self


def _coerce(value: str, typ):
    if typ is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    return typ(value)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``key=value`` strings onto a config (returns the same instance)."""
    for item in pairs or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        typ = _TYPES.get(str(_FIELDS[key]).replace("<class '", "").replace("'>", ""), None)
        if typ is None:
            typ = type(getattr(cfg, key))
        setattr(cfg, key, _coerce(value.strip(), typ))
    return cfg


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a flat key=value file (``#`` comments allowed), apply overrides,
    and validate."""
    cfg = RunConfig()
    if path is not None:
        lines = Path(path).read_text().splitlines()
        kv = [line.strip() for line in lines
              if line.strip() and not line.strip().startswith("#")]
        apply_overrides(cfg, kv)
    apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")
