"""Validated configuration documents.

Every section rejects unknown keys. Precedence when assembled by the CLI is
defaults < config file < command-line flags.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .signal_core import CompressionParams, StftParams

Family = Literal["MM", "CR", "SGMSE+", "SB"]
Preset = Literal["paper", "toy"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StftConfig(_Strict):
    window_len: int = 510
    hop: int = 128
    fft_len: int = 512
    window: str = "hann"

    def params(self) -> StftParams:
        return StftParams(self.window_len, self.hop, self.window, self.fft_len)


class CompressionConfig(_Strict):
    alpha: float = Field(0.5, gt=0, le=1)
    beta: float = Field(0.33, gt=0)

    def params(self) -> CompressionParams:
        return CompressionParams(self.alpha, self.beta)


class DiffusionConfig(_Strict):
    ouve_sigma_min: float = 0.05
    ouve_sigma_max: float = 0.5
    ouve_gamma: float = 1.5
    bridge_sigma_min: float = 0.7
    bridge_sigma_max: float = 1.82
    t_eps: float = Field(0.03, gt=0, lt=0.5)
    pc_steps: int = Field(30, ge=1)
    corrector_snr: float = Field(0.5, gt=0)
    sb_steps: int = Field(50, ge=1)
    sb_var_floor: float = Field(1e-6, gt=0)
    ema_decay: float = Field(0.999, ge=0, lt=1)


# Backbone sizes. The full-size ("paper") presets land within 10% of
# 7.6M (MM), 22.1M (CR) and 25.2M (SGMSE+, SB) parameters.
PRESETS = {
    ("MM", "paper"): {"hidden": 256, "layers": 5},
    ("MM", "toy"): {"hidden": 48, "layers": 2},
    ("unet", "paper"): {"nf": 124, "ch_mult": (1, 1, 2, 2), "num_res_blocks": 2},
    ("unet", "toy"): {"nf": 8, "ch_mult": (1, 2, 4), "num_res_blocks": 1},
}


class ModelConfig(_Strict):
    family: Family = "MM"
    preset: Preset = "toy"
    hidden: Optional[int] = None
    layers: Optional[int] = None
    nf: Optional[int] = None
    ch_mult: Optional[tuple[int, ...]] = None
    num_res_blocks: Optional[int] = None
    stft: StftConfig = StftConfig()
    compression: CompressionConfig = CompressionConfig()
    diffusion: DiffusionConfig = DiffusionConfig()

    @model_validator(mode="after")
    def _fill_preset(self):
        if self.family == "MM":
            keys, preset = ("hidden", "layers"), PRESETS[("MM", self.preset)]
            if any(getattr(self, k) is not None for k in ("nf", "ch_mult", "num_res_blocks")):
                raise ValueError("U-Net hyperparameters given for an MM (BLSTM) model")
        else:
            keys, preset = ("nf", "ch_mult", "num_res_blocks"), PRESETS[("unet", self.preset)]
            if any(getattr(self, k) is not None for k in ("hidden", "layers")):
                raise ValueError(f"BLSTM hyperparameters given for a {self.family} (U-Net) model")
        for k in keys:
            if getattr(self, k) is None:
                object.__setattr__(self, k, preset[k])
        return self

    @property
    def generative(self) -> bool:
        return self.family in ("SGMSE+", "SB")


class TrainConfig(_Strict):
    batch_size: int = Field(8, ge=1)
    max_epochs: int = Field(1000, ge=1)
    patience: int = Field(20, ge=1)
    lr: float = Field(1e-4, gt=0)
    seed: int = 0
    crop_seconds: float = Field(2.0, gt=0)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    grad_clip: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        return self


class DataConfig(_Strict):
    sample_rate: int = 16000
    train_snr_low: float = -6.0
    train_snr_high: float = 14.0
    test_snrs: tuple[float, ...] = (-5.0, 0.0, 5.0, 10.0, 15.0)
    frozen_validation: bool = True
    personalization_val_fraction: float = Field(0.2, gt=0, lt=1)


class MetricsConfig(_Strict):
    names: tuple[Literal["si_sdr", "fwssnr", "estoi", "pesq"], ...] = (
        "estoi", "pesq", "fwssnr", "si_sdr")
    pesq_executable: Optional[str] = None
    pesq_mode: Literal["wb", "nb"] = "wb"
    pesq_jobs: int = Field(1, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    metrics: MetricsConfig = MetricsConfig()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from an optional YAML/JSON file plus overrides."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        data = loaded or {}
    if overrides:
        data = _merge(data, overrides)
    return RunConfig.model_validate(data)


def dump_config(cfg: BaseModel) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


def derive_seed(root: int, *names) -> int:
    """Stable per-stage seed from a root seed and a stage path."""
    key = ":".join([str(root), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")
