"""Predictive model families (MM, CR), shared backbones and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .signal_core import CompressionParams, SignalError, Spectrogram

CHECKPOINT_SCHEMA = 1


class FamilyMismatch(ValueError):
    pass


class LossError(ValueError):
    pass


# -- backbones -----------------------------------------------------------------

class MaskEstimator(nn.Module):
    """Bidirectional LSTM mapping compressed magnitudes to a [0, 1] mask."""

    family = "MM"

    def __init__(self, n_bins: int, hidden: int, layers: int):
        super().__init__()
        self.blstm = nn.LSTM(n_bins, hidden, num_layers=layers, bidirectional=True,
                             batch_first=True)
        self.out = nn.Linear(2 * hidden, n_bins)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # feats: (batch, bins, frames)
        h, _ = self.blstm(feats.transpose(1, 2))
        return torch.sigmoid(self.out(h)).transpose(1, 2)


def _groups(ch: int) -> int:
    return math.gcd(ch, min(32, max(ch // 4, 1)))


class FourierTimeEmbedding(nn.Module):
    """Random Fourier features of process time followed by a two-layer MLP."""

    def __init__(self, nf: int, scale: float = 16.0):
        super().__init__()
        self.register_buffer("freqs", torch.randn(nf // 2) * scale)
        self.mlp = nn.Sequential(nn.Linear(nf, 4 * nf), nn.SiLU(), nn.Linear(4 * nf, 4 * nf))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        proj = 2 * math.pi * t[:, None] * self.freqs[None, :].to(t.dtype)
        return self.mlp(torch.cat([proj.sin(), proj.cos()], dim=-1))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (self.skip(x) + h) / math.sqrt(2.0)


class UNet(nn.Module):
    """Multi-resolution U-Net over (channels, freq, frames) with skip connections.

    ResNet blocks with group normalisation, strided-conv downsampling and
    nearest-neighbour upsampling. ``time_conditioned`` adds a process-time
    embedding injected into every block.
    """

    def __init__(self, in_ch: int, out_ch: int, nf: int, ch_mult=(1, 2, 2, 2),
                 num_res_blocks: int = 2, time_conditioned: bool = False):
        super().__init__()
        self.levels = len(ch_mult)
        temb_dim = 4 * nf if time_conditioned else None
        self.temb = FourierTimeEmbedding(nf) if time_conditioned else None
        self.conv_in = nn.Conv2d(in_ch, nf, 3, padding=1)
        self.down = nn.ModuleList()
        skips = [nf]
        ch = nf
        for i, mult in enumerate(ch_mult):
            blocks = nn.ModuleList()
            for _ in range(num_res_blocks):
                blocks.append(ResBlock(ch, nf * mult, temb_dim))
                ch = nf * mult
                skips.append(ch)
            sample = None
            if i < self.levels - 1:
                sample = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
                skips.append(ch)
            self.down.append(nn.ModuleDict({"blocks": blocks, **({"sample": sample} if sample else {})}))
        self.mid = nn.ModuleList([ResBlock(ch, ch, temb_dim), ResBlock(ch, ch, temb_dim)])
        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(ch_mult))):
            blocks = nn.ModuleList()
            for _ in range(num_res_blocks + 1):
                blocks.append(ResBlock(ch + skips.pop(), nf * mult, temb_dim))
                ch = nf * mult
            entry = {"blocks": blocks}
            if i > 0:
                entry["sample"] = nn.Conv2d(ch, ch, 3, padding=1)
            self.up.append(nn.ModuleDict(entry))
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
        temb = None
        if self.temb is not None:
            t = torch.as_tensor(t, dtype=x.dtype, device=x.device).expand(x.shape[0])
            temb = self.temb(t)
        f, k = x.shape[-2:]
        mult = 2 ** (self.levels - 1)
        x = F.pad(x, (0, (-k) % mult, 0, (-f) % mult))
        h = self.conv_in(x)
        hs = [h]
        for level in self.down:
            for block in level["blocks"]:
                h = block(h, temb)
                hs.append(h)
            if "sample" in level:
                h = level["sample"](h)
                hs.append(h)
        for block in self.mid:
            h = block(h, temb)
        for level in self.up:
            for block in level["blocks"]:
                h = block(torch.cat([h, hs.pop()], dim=1), temb)
            if "sample" in level:
                h = level["sample"](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.conv_out(F.silu(self.norm_out(h)))
        return h[..., :f, :k]


class ComplexRegressor(nn.Module):
    """CR model: compressed noisy coefficients -> compressed clean estimate."""

    family = "CR"

    def __init__(self, backbone: UNet):
        super().__init__()
        self.backbone = backbone

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        # y: (batch, 2, bins, frames) real/imag channels
        return self.backbone(y)


def to_channels(spec: torch.Tensor) -> torch.Tensor:
    """Complex ``(batch, bins, frames)`` -> real ``(batch, 2, bins, frames)``."""
    return torch.stack([spec.real, spec.imag], dim=1)


def from_channels(x: torch.Tensor) -> torch.Tensor:
    return torch.complex(x[:, 0], x[:, 1])


def build_model(cfg: ModelConfig, seed: int | None = 0) -> nn.Module:
    """Instantiate the network for ``cfg.family``; seeded init when ``seed`` is given."""
    from .diffusion import BridgeModel, ScoreModel, SdeSchedule

    if seed is not None:
        torch.manual_seed(seed)
    n_bins = cfg.stft.params().n_bins
    if cfg.family == "MM":
        return MaskEstimator(n_bins, cfg.hidden, cfg.layers)
    if cfg.family == "CR":
        return ComplexRegressor(UNet(2, 2, cfg.nf, cfg.ch_mult, cfg.num_res_blocks))
    backbone = UNet(4, 2, cfg.nf, cfg.ch_mult, cfg.num_res_blocks, time_conditioned=True)
    d = cfg.diffusion
    if cfg.family == "SGMSE+":
        return ScoreModel(backbone, SdeSchedule.ouve(d.ouve_sigma_min, d.ouve_sigma_max,
                                                     d.ouve_gamma))
    return BridgeModel(backbone, SdeSchedule.bridge(d.bridge_sigma_min, d.bridge_sigma_max))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _require_family(model, family: str) -> None:
    got = getattr(model, "family", None)
    if got != family:
        raise FamilyMismatch(f"expected a {family} model, got {got}")


# -- MM ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Mask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def irm_target(clean: Spectrogram, noisy: Spectrogram) -> Mask:
    """Ideal ratio mask ``min(|X| / |Y|, 1)``, zero where ``|Y| == 0``."""
    if clean.coeffs.shape != noisy.coeffs.shape:
        raise SignalError(f"shape mismatch {clean.coeffs.shape} vs {noisy.coeffs.shape}")
    if clean.compressed or noisy.compressed:
        raise SignalError("IRM is defined on uncompressed magnitudes")
    num, den = np.abs(clean.coeffs), np.abs(noisy.coeffs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return Mask(np.minimum(ratio, 1.0))


def mm_features(spec: torch.Tensor, c: CompressionParams) -> torch.Tensor:
    return c.beta * spec.abs() ** c.alpha


def predict_mask(model, noisy: Spectrogram, c: CompressionParams | None = None) -> Mask:
    _require_family(model, "MM")
    c = c or CompressionParams()
    feats = c.beta * np.abs(noisy.coeffs) ** c.alpha
    with torch.no_grad():
        m = model(torch.as_tensor(feats[None], dtype=torch.float32))[0]
    return Mask(m.double().numpy())


def apply_mask(mask: Mask, noisy: Spectrogram) -> Spectrogram:
    if mask.values.shape != noisy.coeffs.shape:
        raise SignalError("mask and spectrogram shapes differ")
    return replace(noisy, coeffs=mask.values * noisy.coeffs)


def mm_enhance(model, noisy: Spectrogram, c: CompressionParams | None = None) -> Spectrogram:
    """Mask the noisy coefficients with the model's estimate (noisy phase kept)."""
    if noisy.compressed:
        raise SignalError("MM enhancement expects an uncompressed spectrogram")
    return apply_mask(predict_mask(model, noisy, c), noisy)


def si_sdr_loss(est: torch.Tensor, ref: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Negative SI-SDR in dB per example (last axis is time).

    ``eps`` is relative to the target energy, so the loss stays exactly
    scale-invariant and tends to ``-10 log10(1/eps)`` for a perfect estimate.
    """
    if est.shape != ref.shape:
        raise LossError(f"shape mismatch {tuple(est.shape)} vs {tuple(ref.shape)}")
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    if torch.any(ref_energy <= 0):
        raise LossError("reference is silent")
    target = (est * ref).sum(-1, keepdim=True) / ref_energy * ref
    t_energy = (target * target).sum(-1)
    resid = est - target
    r_energy = (resid * resid).sum(-1)
    tiny = torch.finfo(est.dtype).tiny
    return -10.0 * torch.log10((t_energy + tiny) / (r_energy + eps * t_energy + tiny))


def mse_time_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if est.shape != ref.shape:
        raise LossError(f"length mismatch {tuple(est.shape)} vs {tuple(ref.shape)}")
    return ((est - ref) ** 2).mean()


# -- CR ------------------------------------------------------------------------------

def cr_enhance(model, noisy: Spectrogram) -> Spectrogram:
    """Regress compressed clean coefficients from compressed noisy ones."""
    _require_family(model, "CR")
    if not noisy.compressed:
        raise SignalError("CR enhancement expects a compressed spectrogram")
    x = to_channels(torch.as_tensor(noisy.coeffs[None], dtype=torch.complex64))
    with torch.no_grad():
        out = from_channels(model(x))[0]
    return replace(noisy, coeffs=out.numpy().astype(np.complex128))


# -- checkpoints -----------------------------------------------------------------------

@dataclass
class Provenance:
    strategy: str = "scratch"
    base_checkpoint: str = ""
    trained_on: str = ""
    data_fingerprint: str = ""
    epoch: int = 0
    val_loss: float = float("nan")
    lineage: list = field(default_factory=list)


def weights_fingerprint(weights: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(weights):
        h.update(k.encode())
        h.update(weights[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    weights: dict
    config: ModelConfig
    provenance: Provenance
    ema_weights: dict | None = None

    @property
    def id(self) -> str:
        return weights_fingerprint(self.weights)

    @property
    def family(self) -> str:
        return self.config.family

    def model(self, use_ema: bool = True) -> nn.Module:
        net = build_model(self.config, seed=None)
        state = dict(self.weights)
        if use_ema and self.ema_weights:
            state.update(self.ema_weights)
        net.load_state_dict(state)
        return net.eval()

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save({"weights": self.weights, "ema": self.ema_weights}, d / "weights.pt")
        meta = {
            "schema_version": CHECKPOINT_SCHEMA,
            "id": self.id,
            "family": self.family,
            "config": self.config.model_dump(mode="json"),
            "provenance": asdict(self.provenance),
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text())
            blob = torch.load(d / "weights.pt", map_location="cpu", weights_only=True)
        except (OSError, ValueError, RuntimeError, KeyError, EOFError,
                pickle.UnpicklingError) as exc:
            raise ValueError(f"corrupt or missing checkpoint in {d}: {exc}") from exc
        if meta.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{d}: unsupported checkpoint schema {meta.get('schema_version')}")
        ckpt = cls(blob["weights"], ModelConfig.model_validate(meta["config"]),
                   Provenance(**meta["provenance"]), blob.get("ema"))
        if ckpt.id != meta["id"]:
            raise ValueError(f"{d}: weights do not match recorded id {meta['id']}")
        return ckpt
