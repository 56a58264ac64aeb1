"""Training loop, adaptation strategies, cross-validation and evaluation runs.

All randomness is derived from a root seed with :func:`config.derive_seed`, keyed
by stage name, epoch and step. Nothing depends on global RNG state after model
initialisation, so a run resumed from its saved state follows exactly the same
trajectory as an uninterrupted one.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig, derive_seed, dump_config
from .dataio import (AudioClip, FoldPlan, ManifestError, NoiseClip, draw_mixture_spec,
                     make_mixture, plan_personalization_split, write_wav)
from .diffusion import (EMA, SamplerDivergence, pc_sample, sb_data_loss, sb_sde_sample,
                        score_matching_loss)
from .metrics import UNAVAILABLE, EvalRecord, compute_metrics, pesq_executable, pesq_many
from .models import (Checkpoint, FamilyMismatch, Provenance, build_model, from_channels,
                     mse_time_loss, si_sdr_loss, to_channels)
from .signal_core import (Waveform, compress_torch, decompress_torch, istft_torch,
                          stft_torch)

log = logging.getLogger(__name__)

Strategy = Literal["scratch", "finetune", "personalize"]


class TrainingDivergence(FloatingPointError):
    """Raised on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, last_good: Checkpoint | None, diagnostic: dict):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostic = diagnostic


# -- data ----------------------------------------------------------------------

@dataclass
class ClipSet:
    """Clean clips plus the noise bank they are mixed with, loaded in memory."""

    clips: tuple[AudioClip, ...]
    noises: tuple[NoiseClip, ...]
    audio: dict[str, Waveform] = field(default_factory=dict, repr=False)
    noise_audio: dict[str, Waveform] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.clips, self.noises = tuple(self.clips), tuple(self.noises)
        if not self.clips:
            raise ManifestError("clip set is empty")
        if not self.noises:
            raise ManifestError("noise bank is empty")
        for c in self.clips:
            if c.id not in self.audio:
                self.audio[c.id] = c.load()
        for n in self.noises:
            if n.id not in self.noise_audio:
                self.noise_audio[n.id] = n.load()
        rates = {w.sample_rate for w in (*self.audio.values(), *self.noise_audio.values())}
        if len(rates) != 1:
            raise ManifestError(f"mixed sample rates in clip set: {sorted(rates)}")
        self.sample_rate = rates.pop()

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(sorted({c.speaker_id for c in self.clips}))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in sorted(c.id for c in self.clips) + sorted(n.id for n in self.noises):
            h.update(key.encode() + b"\0")
        for c in sorted(self.clips, key=lambda c: c.id):
            h.update(self.audio[c.id].samples.tobytes())
        return h.hexdigest()[:16]

    def mixture(self, clip: AudioClip, seed: int, snr_db: float | None = None):
        spec = draw_mixture_spec(clip.id, len(self.audio[clip.id]), self.noises, seed, snr_db)
        return make_mixture(spec, self.audio, self.noise_audio)


def _crop(clean: np.ndarray, noisy: np.ndarray, n: int, rng: np.random.Generator):
    if len(clean) < n:
        pad = n - len(clean)
        return np.pad(clean, (0, pad)), np.pad(noisy, (0, pad))
    start = int(rng.integers(len(clean) - n + 1))
    return clean[start:start + n], noisy[start:start + n]


def _batches(pairs: list, batch_size: int):
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        clean = torch.as_tensor(np.stack([c for c, _ in chunk]), dtype=torch.float32)
        noisy = torch.as_tensor(np.stack([n for _, n in chunk]), dtype=torch.float32)
        yield clean, noisy


def train_examples(data: ClipSet, cfg: TrainConfig, seed: int, epoch: int) -> list:
    """Fresh mixtures and random crops for one epoch, in a seeded order."""
    rng = np.random.default_rng(derive_seed(seed, "order", epoch))
    n = int(round(cfg.crop_seconds * data.sample_rate))
    n_items = len(data.clips)
    if cfg.steps_per_epoch is not None:
        n_items = cfg.steps_per_epoch * cfg.batch_size
    order: list[int] = []
    while len(order) < n_items:
        order.extend(rng.permutation(len(data.clips)).tolist())
    pairs = []
    for k, i in enumerate(order[:n_items]):
        clip = data.clips[i]
        noisy, clean, _ = data.mixture(clip, derive_seed(seed, "train", epoch, k, clip.id))
        pairs.append(_crop(clean.samples, noisy.samples, n, rng))
    return pairs


def val_examples(data: ClipSet, cfg: TrainConfig, seed: int, epoch: int = 0,
                 frozen: bool = True) -> list:
    """Validation mixtures; with ``frozen`` they are identical every epoch."""
    key = 0 if frozen else epoch
    n = int(round(cfg.crop_seconds * data.sample_rate))
    pairs = []
    for clip in data.clips:
        s = derive_seed(seed, "val", key, clip.id)
        noisy, clean, _ = data.mixture(clip, s)
        pairs.append(_crop(clean.samples, noisy.samples, n, np.random.default_rng(s)))
    return pairs


# -- losses --------------------------------------------------------------------

def family_loss(model: nn.Module, cfg: ModelConfig, clean: torch.Tensor, noisy: torch.Tensor,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Training loss of ``model`` on a batch of time-domain ``(batch, samples)`` pairs.

    MM: negative SI-SDR of the masked, resynthesised estimate. CR: time-domain
    MSE after decompression and resynthesis. SGMSE+: sigma^2-weighted denoising
    score matching. SB: weighted data-prediction loss. The generative losses draw
    ``t`` and ``z`` from ``generator``.
    """
    p, c = cfg.stft.params(), cfg.compression.params()
    n = clean.shape[-1]
    spec_y = stft_torch(noisy, p)
    if cfg.family == "MM":
        mask = model(c.beta * spec_y.abs() ** c.alpha)
        return si_sdr_loss(istft_torch(mask * spec_y, n, p), clean).mean()
    y = to_channels(compress_torch(spec_y, c))
    if cfg.family == "CR":
        est = decompress_torch(from_channels(model(y)), c)
        return mse_time_loss(istft_torch(est, n, p), clean)
    x0 = to_channels(compress_torch(stft_torch(clean, p), c))
    d = cfg.diffusion
    b = x0.shape[0]
    u = torch.rand(b, generator=generator, dtype=x0.dtype)
    z = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if cfg.family == "SGMSE+":
        t = d.t_eps + (1 - d.t_eps) * u
        return score_matching_loss(model, x0, y, t, z, model.schedule, d.t_eps, "sigma2")
    t = d.t_eps + (1 - 2 * d.t_eps) * u
    return sb_data_loss(model, x0, y, t, z, model.schedule, d.t_eps, d.sb_var_floor)


# -- early stopping --------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss; epochs are numbered from 1."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.epoch = 0
        self.best = math.inf
        self.best_epoch = 0

    def step(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch = float(loss), self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience

    def state_dict(self) -> dict:
        return {"patience": self.patience, "epoch": self.epoch, "best": self.best,
                "best_epoch": self.best_epoch}

    def load_state_dict(self, state: dict) -> None:
        self.patience = state["patience"]
        self.epoch, self.best, self.best_epoch = state["epoch"], state["best"], state["best_epoch"]


# -- run directories ---------------------------------------------------------------

INCOMPLETE_MARKER = ".incomplete"


class RunDir:
    """Run directory layout: ``config.yaml``, ``metrics.jsonl``, ``state.pt``,
    ``checkpoint/`` and result CSVs. ``.incomplete`` exists until :meth:`finish`."""

    def __init__(self, path, config=None):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / INCOMPLETE_MARKER).touch()
        if config is not None:
            (self.path / "config.yaml").write_text(dump_config(config), encoding="utf-8")

    @property
    def metrics_log(self) -> Path:
        return self.path / "metrics.jsonl"

    @property
    def state_file(self) -> Path:
        return self.path / "state.pt"

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / "checkpoint"

    def log_epoch(self, entry: dict) -> None:
        with self.metrics_log.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def finish(self) -> None:
        (self.path / INCOMPLETE_MARKER).unlink(missing_ok=True)


def _atomic_save(obj, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    torch.save(obj, tmp)
    os.replace(tmp, path)


def _clone(state: dict) -> dict:
    return {k: v.detach().clone() for k, v in state.items()}


# -- training ------------------------------------------------------------------------

def _eval_model(model: nn.Module, ema: EMA | None) -> nn.Module:
    if ema is None:
        return model
    shadow = copy.deepcopy(model)
    state = shadow.state_dict()
    state.update(ema.shadow)
    shadow.load_state_dict(state)
    return shadow


@torch.no_grad()
def validation_loss(model: nn.Module, model_cfg: ModelConfig, pairs: list, batch_size: int,
                    seed: int) -> float:
    """Mean family loss over fixed validation pairs with fixed diffusion draws."""
    model.eval()
    total, count = 0.0, 0
    for k, (clean, noisy) in enumerate(_batches(pairs, batch_size)):
        gen = torch.Generator().manual_seed(derive_seed(seed, "val-noise", k))
        total += float(family_loss(model, model_cfg, clean, noisy, gen)) * clean.shape[0]
        count += clean.shape[0]
    return total / count


def train(model: nn.Module, train_set: ClipSet, val_set: ClipSet, cfg: TrainConfig,
          model_cfg: ModelConfig, *, seed: int | None = None,
          data_cfg: DataConfig | None = None, provenance: Provenance | None = None,
          run_dir: RunDir | None = None, ema_init: dict | None = None,
          resume: bool = True) -> Checkpoint:
    """Optimise ``model`` with Adam until patience expires or ``max_epochs``.

    Returns the checkpoint with the lowest validation loss. Generative families
    keep an EMA shadow, used for validation and stored with the checkpoint.
    When ``run_dir`` holds a saved state the run continues from it.
    """
    if getattr(model, "family", None) != model_cfg.family:
        raise FamilyMismatch(f"model is {getattr(model, 'family', None)}, "
                             f"config says {model_cfg.family}")
    seed = cfg.seed if seed is None else seed
    data_cfg = data_cfg or DataConfig()
    provenance = provenance or Provenance()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ema = EMA(model, model_cfg.diffusion.ema_decay) if model_cfg.generative else None
    if ema is not None and ema_init is not None:
        ema.load_state_dict(ema_init)
    stopper = EarlyStopping(cfg.patience)
    best: dict | None = None
    step = 0

    if run_dir is not None and resume and run_dir.state_file.exists():
        state = torch.load(run_dir.state_file, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        if ema is not None:
            ema.load_state_dict(state["ema"])
        stopper.load_state_dict(state["stopper"])
        best, step = state["best"], state["step"]
        log.info("resuming after epoch %d", stopper.epoch)

    def checkpoint_of(snapshot: dict | None) -> Checkpoint | None:
        if snapshot is None:
            return None
        prov = replace(provenance, epoch=snapshot["epoch"], val_loss=snapshot["val_loss"])
        return Checkpoint(snapshot["weights"], model_cfg, prov, snapshot["ema"])

    def diverged(what: str, diag: dict):
        last_good = checkpoint_of(best)
        if run_dir is not None and last_good is not None:
            last_good.save(run_dir.path / "last_good")
        raise TrainingDivergence(f"non-finite {what}: {diag}", last_good, diag)

    val_pairs = val_examples(val_set, cfg, seed) if data_cfg.frozen_validation else None
    while not stopper.should_stop and stopper.epoch < cfg.max_epochs:
        epoch = stopper.epoch + 1
        model.train()
        pairs = train_examples(train_set, cfg, seed, epoch)
        losses = []
        for k, (clean, noisy) in enumerate(_batches(pairs, cfg.batch_size)):
            gen = torch.Generator().manual_seed(derive_seed(seed, "noise", epoch, k))
            loss = family_loss(model, model_cfg, clean, noisy, gen)
            if not torch.isfinite(loss):
                batch_id = hashlib.sha256(noisy.numpy().tobytes()).hexdigest()[:12]
                diverged("training loss", {"epoch": epoch, "step": step, "lr": cfg.lr,
                                           "batch": batch_id})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            if ema is not None:
                ema.update(model)
            losses.append(float(loss.detach()))
            step += 1
        vp = val_pairs if val_pairs is not None else val_examples(val_set, cfg, seed, epoch, False)
        val = validation_loss(_eval_model(model, ema), model_cfg, vp, cfg.batch_size, seed)
        if not math.isfinite(val):
            diverged("validation loss", {"epoch": epoch, "step": step, "lr": cfg.lr})
        if stopper.step(val):
            best = {"weights": _clone(model.state_dict()), "epoch": epoch, "val_loss": val,
                    "ema": ema.state_dict() if ema is not None else None}
        entry = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)),
                 "val_loss": val, "best_epoch": stopper.best_epoch}
        log.info("epoch %d train %.4f val %.4f (best %d)", epoch, entry["train_loss"], val,
                 stopper.best_epoch)
        if run_dir is not None:
            run_dir.log_epoch(entry)
            _atomic_save({"model": model.state_dict(), "optimizer": optimizer.state_dict(),
                          "ema": ema.state_dict() if ema is not None else None,
                          "stopper": stopper.state_dict(), "best": best, "step": step},
                         run_dir.state_file)
    ckpt = checkpoint_of(best)
    if run_dir is not None:
        ckpt.save(run_dir.checkpoint_dir)
    return ckpt


# -- strategies ------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategySpec:
    kind: Strategy
    base_checkpoint: Checkpoint | str | Path | None = None
    speaker: str | None = None
    split: Literal["A", "B"] | None = None

    def __post_init__(self):
        if self.kind not in ("scratch", "finetune", "personalize"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "scratch" and self.base_checkpoint is not None:
            raise ValueError("scratch training takes no base checkpoint")
        if self.kind != "scratch" and self.base_checkpoint is None:
            raise ValueError(f"{self.kind} requires a base checkpoint")
        if self.kind == "personalize" and self.split not in ("A", "B"):
            raise ValueError("personalize requires split 'A' or 'B'")
        if self.kind != "personalize" and (self.split or self.speaker):
            raise ValueError("speaker/split only apply to personalize")

    def base(self) -> Checkpoint | None:
        b = self.base_checkpoint
        return b if b is None or isinstance(b, Checkpoint) else Checkpoint.load(b)


def lineage_of(base: Checkpoint) -> list:
    return [*base.provenance.lineage, {"id": base.id, "strategy": base.provenance.strategy}]


def split_in_time(clips: Sequence[AudioClip], val_fraction: float) -> tuple[list, list]:
    """Cut every clip into a leading train part and a trailing validation part."""
    train_part, val_part = [], []
    for c in clips:
        w = c.load()
        cut = int(round(len(w) * (1 - val_fraction)))
        if cut <= 0 or cut >= len(w):
            raise ManifestError(f"clip {c.id} too short to split for validation")
        for suffix, seg, out in (("train", w.samples[:cut], train_part),
                                 ("val", w.samples[cut:], val_part)):
            piece = Waveform(seg, w.sample_rate)
            out.append(replace(c, id=f"{c.id}#{suffix}", path=None, waveform=piece,
                               duration=piece.duration))
    return train_part, val_part


def run_strategy(spec: StrategySpec, clips: Sequence[AudioClip], noises: Sequence[NoiseClip],
                 cfg: RunConfig, val_clips: Sequence[AudioClip] | None = None,
                 run_dir: RunDir | None = None, tag: str = "") -> Checkpoint:
    """Train according to ``spec``.

    scratch and finetune train on ``clips`` and validate on ``val_clips``.
    personalize takes one speaker's clips, adapts on the chosen split and
    validates on a held-out time slice of the adapt material.
    """
    base = spec.base()
    if base is not None and base.family != cfg.model.family:
        raise FamilyMismatch(f"base checkpoint is {base.family}, config asks for "
                             f"{cfg.model.family}")
    if spec.kind == "personalize":
        speakers = {c.speaker_id for c in clips}
        if spec.speaker is not None:
            clips = [c for c in clips if c.speaker_id == spec.speaker]
            speakers = {spec.speaker}
        split_a, split_b = plan_personalization_split(clips)
        split = split_a if spec.split == "A" else split_b
        train_clips, val_clips = split_in_time(split.adapt, cfg.data.personalization_val_fraction)
        log.info("personalizing %s split %s on %d clip(s)", sorted(speakers)[0], split.name,
                 len(split.adapt))
    else:
        if not val_clips:
            raise ManifestError(f"{spec.kind} training needs validation clips")
        train_clips = list(clips)
    train_set = ClipSet(train_clips, noises)
    val_set = ClipSet(val_clips, noises, noise_audio=train_set.noise_audio)
    seed = derive_seed(cfg.seed, "train", spec.kind, spec.split or "", tag)
    if base is None:
        model_cfg = cfg.model
        model = build_model(model_cfg, seed=derive_seed(cfg.seed, "init", tag))
        ema_init = None
    else:
        model_cfg = base.config
        model = base.model(use_ema=False).train()
        ema_init = base.ema_weights
    prov = Provenance(strategy=spec.kind, base_checkpoint=base.id if base else "",
                      trained_on=",".join(train_set.speakers),
                      data_fingerprint=train_set.fingerprint(),
                      lineage=lineage_of(base) if base else [])
    return train(model, train_set, val_set, cfg.train, model_cfg, seed=seed,
                 data_cfg=cfg.data, provenance=prov, run_dir=run_dir, ema_init=ema_init)


# -- enhancement -----------------------------------------------------------------------

class Enhancer:
    """Checkpoint-backed enhancement of single waveforms.

    The pipeline follows the checkpoint family: masking (MM), regression (CR),
    predictor-corrector sampling (SGMSE+) or bridge sampling (SB). EMA weights
    are used when present. ``last_nfe`` counts network calls of the last call.
    """

    def __init__(self, ckpt: Checkpoint, steps: int | None = None):
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.model = ckpt.model(use_ema=True)
        d = self.cfg.diffusion
        self.steps = steps or (d.pc_steps if self.cfg.family == "SGMSE+" else d.sb_steps)
        self.last_nfe = 0

    def _network(self, *args):
        self.last_nfe += 1
        return self.model(*args)

    @torch.no_grad()
    def __call__(self, noisy: Waveform, *, seed: int = 0, clean: Waveform | None = None,
                 name: str = "") -> Waveform:
        p, c = self.cfg.stft.params(), self.cfg.compression.params()
        d = self.cfg.diffusion
        x = torch.as_tensor(noisy.samples, dtype=torch.float32)[None]
        spec_y = stft_torch(x, p)
        self.last_nfe = 0
        if self.cfg.family == "MM":
            est = self._network(c.beta * spec_y.abs() ** c.alpha) * spec_y
        else:
            y = to_channels(compress_torch(spec_y, c))
            gen = torch.Generator().manual_seed(seed)
            if self.cfg.family == "CR":
                out = self._network(y)
            elif self.cfg.family == "SGMSE+":
                out = pc_sample(self._network, y, self.model.schedule, self.steps, gen,
                                d.t_eps, d.corrector_snr)
            else:
                out = sb_sde_sample(self._network, y, self.model.schedule, self.steps, gen,
                                    d.t_eps)
            est = decompress_torch(from_channels(out), c)
        log.info("%s: %d network evaluations", name or "utterance", self.last_nfe)
        wav = istft_torch(est, x.shape[-1], p)[0].double().numpy()
        return Waveform(wav, noisy.sample_rate)


def identity_enhancer(noisy: Waveform, **_) -> Waveform:
    """Debug baseline: returns the noisy input."""
    return noisy


def oracle_enhancer(noisy: Waveform, *, clean: Waveform, **_) -> Waveform:
    """Debug ceiling: returns the clean reference."""
    return clean


# -- evaluation --------------------------------------------------------------------------

def _resolve_metrics(names: Sequence[str], executable: str | None) -> list[str]:
    names = list(names)
    if "pesq" in names and pesq_executable(executable) is None:
        log.warning("no PESQ evaluator configured; omitting the pesq column")
        names.remove("pesq")
    return names


def evaluate(enhancer: Checkpoint | Callable, clips: Sequence[AudioClip],
             noises: Sequence[NoiseClip], snrs: Sequence[float], metrics: Sequence[str],
             seed: int = 0, labels: Mapping[str, str] | None = None,
             pesq_exe: str | None = None, pesq_mode: str = "wb",
             jobs: int = 1) -> list[EvalRecord]:
    """One record per (utterance, SNR): mix, enhance, score noisy and enhanced.

    Mixtures depend only on ``seed``, the utterance id and the SNR, so every
    model evaluated with the same seed sees identical inputs. An enhancement
    that fails numerically yields a flagged record with NaN enhanced scores.
    """
    if not clips:
        raise ManifestError("no test clips to evaluate")
    if isinstance(enhancer, Checkpoint):
        labels = {"family": enhancer.family, "strategy": enhancer.provenance.strategy,
                  **(labels or {})}
        enhancer = Enhancer(enhancer)
    names = _resolve_metrics(metrics, pesq_exe)
    use_pesq = "pesq" in names
    direct = [m for m in names if m != "pesq"]
    data = ClipSet(clips, noises)
    records: list[EvalRecord] = []
    with tempfile.TemporaryDirectory() as tmp:
        pesq_jobs = []
        for clip in data.clips:
            for snr in snrs:
                noisy, clean, _ = data.mixture(clip, derive_seed(seed, "test", clip.id, snr),
                                               float(snr))
                flagged = False
                try:
                    enhanced = enhancer(noisy, clean=clean, name=f"{clip.id}@{snr:g}dB",
                                        seed=derive_seed(seed, "enhance", clip.id, snr))
                    flagged = not np.all(np.isfinite(enhanced.samples))
                except SamplerDivergence as exc:
                    log.warning("%s at %g dB: %s", clip.id, snr, exc)
                    enhanced, flagged = None, True
                if enhanced is not None and len(enhanced) != len(noisy):
                    raise ValueError(f"{clip.id}: enhancer changed the signal length")
                noisy_m = compute_metrics(noisy.samples, clean.samples, direct, data.sample_rate)
                enh_m = ({m: math.nan for m in direct} if flagged else
                         compute_metrics(enhanced.samples, clean.samples, direct,
                                         data.sample_rate))
                rec = EvalRecord(clip.id, clip.speaker_id, clip.group, float(snr), noisy_m,
                                 enh_m, flagged, dict(labels or {}))
                if use_pesq:
                    stem = Path(tmp) / f"{len(records)}"
                    write_wav(f"{stem}_ref.wav", clean)
                    write_wav(f"{stem}_noisy.wav", noisy)
                    pesq_jobs.append((f"{stem}_noisy.wav", f"{stem}_ref.wav",
                                      f"{clip.id}@{snr:g}dB noisy"))
                    if not flagged:
                        write_wav(f"{stem}_enh.wav", enhanced)
                        pesq_jobs.append((f"{stem}_enh.wav", f"{stem}_ref.wav",
                                          f"{clip.id}@{snr:g}dB enhanced"))
                records.append(rec)
        if use_pesq:
            scores = iter(pesq_many(pesq_jobs, pesq_mode, pesq_exe, jobs))
            for rec in records:
                rec.noisy["pesq"] = next(scores)
                rec.enhanced["pesq"] = math.nan if rec.flagged else next(scores)
                if UNAVAILABLE in (rec.noisy["pesq"], rec.enhanced["pesq"]):
                    raise RuntimeError("PESQ evaluator disappeared during evaluation")
    for rec in records:
        rec.noisy = {m: rec.noisy[m] for m in names}
        rec.enhanced = {m: rec.enhanced[m] for m in names}
    n_flag = sum(r.flagged for r in records)
    if n_flag:
        log.warning("%d of %d records flagged", n_flag, len(records))
    return records


def metric_names(records: Sequence[EvalRecord]) -> list[str]:
    return list(records[0].noisy) if records else []


# -- orchestration -------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint | None
    records: list[EvalRecord]
    status: str = "ok"
    error: str = ""


def _clips_of(clips: Sequence[AudioClip], speakers) -> list[AudioClip]:
    wanted = set(speakers)
    return [c for c in clips if c.speaker_id in wanted]


def run_cross_validation(plan: FoldPlan, spec: StrategySpec, clips: Sequence[AudioClip],
                         noises: Sequence[NoiseClip], cfg: RunConfig,
                         out_dir: str | Path | None = None) -> list[FoldResult]:
    """Train, early-stop and test once per fold.

    A failing fold is recorded with status ``failed`` and the remaining folds
    still run. With ``out_dir`` each fold gets its own run directory and a
    ``summary.json`` lists the per-fold status.
    """
    if spec.kind == "personalize":
        raise ValueError("personalization is per speaker; use run_personalization")
    results = []
    for i, fold in enumerate(plan.folds):
        fold_dir = RunDir(Path(out_dir) / f"fold{i:02d}", cfg) if out_dir else None
        try:
            ckpt = run_strategy(spec, _clips_of(clips, fold.train), noises, cfg,
                                _clips_of(clips, fold.val), fold_dir, tag=f"fold{i}")
            test = _clips_of(clips, fold.test)
            records = evaluate(ckpt, test, noises, cfg.data.test_snrs, cfg.metrics.names,
                               cfg.seed, {"fold": str(i)}, cfg.metrics.pesq_executable,
                               cfg.metrics.pesq_mode, cfg.metrics.pesq_jobs)
            seen = set(fold.train) | set(fold.val)
            leaked = sorted({r.speaker_id for r in records} & seen)
            assert not leaked, f"fold {i}: test speakers {leaked} were used for training"
            results.append(FoldResult(i, ckpt, records))
            if fold_dir is not None:
                fold_dir.finish()
        except Exception as exc:  # noqa: BLE001 - isolate folds
            log.error("fold %d failed: %s", i, exc)
            results.append(FoldResult(i, None, [], "failed", f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        summary = [{"fold": r.fold, "status": r.status, "error": r.error,
                    "checkpoint": r.checkpoint.id if r.checkpoint else None,
                    "records": len(r.records)} for r in results]
        Path(out_dir, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return results


@dataclass
class PersonalizationResult:
    speaker: str
    checkpoints: tuple[Checkpoint, Checkpoint]
    records: list[EvalRecord]


def run_personalization(speaker: str, clips: Sequence[AudioClip], base: Checkpoint | str | Path,
                        noises: Sequence[NoiseClip], cfg: RunConfig,
                        out_dir: str | Path | None = None) -> PersonalizationResult:
    """Fine-tune on split A and on split B, test each on its complement, pool."""
    own = [c for c in clips if c.speaker_id == speaker]
    if not own:
        raise ManifestError(f"no clips for speaker {speaker}")
    splits = plan_personalization_split(own)
    ckpts, records = [], []
    for split in splits:
        spec = StrategySpec("personalize", base, speaker, split.name)
        rd = RunDir(Path(out_dir) / f"split{split.name}", cfg) if out_dir else None
        ckpt = run_strategy(spec, own, noises, cfg, run_dir=rd, tag=speaker)
        records += evaluate(ckpt, split.test, noises, cfg.data.test_snrs, cfg.metrics.names,
                            cfg.seed, {"split": split.name}, cfg.metrics.pesq_executable,
                            cfg.metrics.pesq_mode, cfg.metrics.pesq_jobs)
        if rd is not None:
            rd.finish()
        ckpts.append(ckpt)
    return PersonalizationResult(speaker, (ckpts[0], ckpts[1]), records)
