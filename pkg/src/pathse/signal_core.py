"""Time-frequency analysis/synthesis, spectral compression and SNR arithmetic.

Conventions shared by every STFT in the package (numpy and torch paths):

* periodic Hann window of ``window_len`` samples, zero-padded (centred) to
  ``fft_len``;
* frames of ``fft_len`` samples taken every ``hop`` samples from a signal
  padded by ``fft_len // 2`` on both sides (reflection when the signal is long
  enough, zeros otherwise), giving ``1 + len // hop`` frames;
* synthesis by windowed overlap-add normalised with the summed squared window,
  which reconstructs exactly wherever that envelope is non-zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.signal import get_window

__all__ = [
    "Waveform",
    "StftParams",
    "Spectrogram",
    "CompressionParams",
    "SignalError",
    "stft",
    "istft",
    "compress",
    "decompress",
    "signal_power",
    "snr_db",
    "noise_gain_for_snr",
    "stft_torch",
    "istft_torch",
    "compress_torch",
    "decompress_torch",
]


class SignalError(ValueError):
    """Invalid signal or analysis parameters."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftParams:
    window_len: int = 510
    hop: int = 128
    window: str = "hann"
    fft_len: int = 512

    def __post_init__(self):
        if self.window_len <= 0 or self.hop <= 0:
            raise SignalError("window_len and hop must be positive")
        if self.hop > self.window_len:
            raise SignalError(f"hop ({self.hop}) exceeds window_len ({self.window_len})")
        if self.fft_len < self.window_len:
            raise SignalError("fft_len must be >= window_len")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def pad(self) -> int:
        return self.fft_len // 2

    def analysis_window(self) -> np.ndarray:
        """Window of length ``fft_len`` with the named window centred in it."""
        win = get_window(self.window, self.window_len, fftbins=True)
        left = (self.fft_len - self.window_len) // 2
        out = np.zeros(self.fft_len)
        out[left:left + self.window_len] = win
        return out

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    def envelope(self, n_frames: int) -> np.ndarray:
        """Summed squared window over the padded signal span."""
        win_sq = self.analysis_window() ** 2
        env = np.zeros(self.fft_len + self.hop * (n_frames - 1))
        for k in range(n_frames):
            env[k * self.hop:k * self.hop + self.fft_len] += win_sq
        return env

    def check_overlap_add(self) -> None:
        """Raise unless the squared window overlap-adds to a non-vanishing envelope."""
        win_sq = self.analysis_window() ** 2
        steady = np.zeros(self.hop)
        for start in range(0, self.fft_len, self.hop):
            chunk = win_sq[start:start + self.hop]
            steady[:len(chunk)] += chunk
        if steady.min() <= 1e-10 * max(steady.max(), 1e-300):
            raise SignalError(
                f"window {self.window!r} ({self.window_len}) is not overlap-add "
                f"invertible at hop {self.hop}"
            )


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT coefficients indexed (frequency bin, frame)."""

    coeffs: np.ndarray
    params: StftParams = field(default_factory=StftParams)
    compressed: bool = False
    orig_len: int = 0

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim != 2 or coeffs.shape[0] != self.params.n_bins:
            raise SignalError(
                f"coefficients of shape {coeffs.shape} do not match "
                f"{self.params.n_bins} frequency bins"
            )
        if not np.all(np.isfinite(coeffs)):
            raise SignalError("spectrogram contains non-finite values")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[1]

    def __add__(self, other: "Spectrogram") -> "Spectrogram":
        if self.params != other.params or self.compressed or other.compressed:
            raise SignalError("can only add uncompressed spectrograms with equal params")
        return replace(self, coeffs=self.coeffs + other.coeffs)


@dataclass(frozen=True)
class CompressionParams:
    alpha: float = 0.5
    beta: float = 0.33

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise SignalError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.beta <= 0:
            raise SignalError(f"beta must be positive, got {self.beta}")


def _pad_signal(x: np.ndarray, pad: int) -> np.ndarray:
    mode = "reflect" if x.shape[-1] > pad else "constant"
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, widths, mode=mode)


def stft(w: Waveform, p: StftParams | None = None) -> Spectrogram:
    """Short-time Fourier transform of a waveform."""
    p = p or StftParams()
    if len(w) == 0:
        raise SignalError("cannot analyse an empty waveform")
    p.check_overlap_add()
    x = _pad_signal(w.samples, p.pad)
    frames = np.lib.stride_tricks.sliding_window_view(x, p.fft_len)[::p.hop]
    frames = frames[:p.n_frames(len(w))]
    coeffs = np.fft.rfft(frames * p.analysis_window(), axis=-1).T
    return Spectrogram(coeffs, p, compressed=False, orig_len=len(w))


def reconstructible_length(s: Spectrogram) -> int:
    p = s.params
    env = p.envelope(s.n_frames)[p.pad:]
    nonzero = np.flatnonzero(env > 1e-10)
    return int(nonzero[-1]) + 1 if nonzero.size else 0


def istft(s: Spectrogram, out_len: int | None = None, sample_rate: int = 16000) -> Waveform:
    """Inverse of :func:`stft` by normalised overlap-add.

    ``out_len`` defaults to the length recorded at analysis time; shorter
    requests return a prefix of the full reconstruction.
    """
    if s.compressed:
        raise SignalError("decompress the spectrogram before synthesis")
    p = s.params
    p.check_overlap_add()
    out_len = s.orig_len if out_len is None else int(out_len)
    limit = reconstructible_length(s)
    if out_len > limit:
        raise SignalError(f"out_len {out_len} exceeds reconstructible length {limit}")
    win = p.analysis_window()
    frames = np.fft.irfft(s.coeffs.T, n=p.fft_len, axis=-1) * win
    total = p.fft_len + p.hop * (s.n_frames - 1)
    y = np.zeros(total)
    for k in range(s.n_frames):
        y[k * p.hop:k * p.hop + p.fft_len] += frames[k]
    env = p.envelope(s.n_frames)
    y = y[p.pad:p.pad + out_len]
    env = env[p.pad:p.pad + out_len]
    return Waveform(y / np.where(env > 1e-10, env, 1.0), sample_rate)


def compress(s: Spectrogram, c: CompressionParams | None = None) -> Spectrogram:
    """Map magnitudes ``m -> beta * m**alpha`` keeping phases."""
    c = c or CompressionParams()
    if s.compressed:
        raise SignalError("spectrogram is already compressed")
    mag = np.abs(s.coeffs)
    out = c.beta * mag ** c.alpha * np.exp(1j * np.angle(s.coeffs))
    out[mag == 0] = 0
    return replace(s, coeffs=out, compressed=True)


def decompress(s: Spectrogram, c: CompressionParams | None = None) -> Spectrogram:
    c = c or CompressionParams()
    if not s.compressed:
        raise SignalError("spectrogram is not compressed")
    mag = np.abs(s.coeffs)
    out = (mag / c.beta) ** (1.0 / c.alpha) * np.exp(1j * np.angle(s.coeffs))
    out[mag == 0] = 0
    return replace(s, coeffs=out, compressed=False)


def signal_power(x) -> float:
    x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    return float(np.mean(x ** 2))


def snr_db(clean, noise) -> float:
    """Power ratio of ``clean`` to ``noise`` in dB over the full signals."""
    return 10.0 * np.log10(signal_power(clean) / signal_power(noise))


def noise_gain_for_snr(clean: Waveform, noise: Waveform, snr_db: float) -> float:
    """Gain ``g`` such that ``clean + g * noise`` has the requested SNR."""
    p_clean, p_noise = signal_power(clean), signal_power(noise)
    if p_clean <= 0:
        raise SignalError("clean signal is silent")
    if p_noise <= 0:
        raise SignalError("noise signal is silent")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


# -- differentiable torch counterparts (same framing as the numpy path) ------

def _torch_window(p: StftParams, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(p.analysis_window(), dtype=like.dtype, device=like.device)


def stft_torch(x: torch.Tensor, p: StftParams | None = None) -> torch.Tensor:
    """Batched STFT: ``(..., L)`` real -> ``(..., bins, frames)`` complex."""
    p = p or StftParams()
    lead = x.shape[:-1]
    n = x.shape[-1]
    flat = x.reshape(-1, 1, n)
    mode = "reflect" if n > p.pad else "constant"
    flat = torch.nn.functional.pad(flat, (p.pad, p.pad), mode=mode)[:, 0]
    frames = flat.unfold(-1, p.fft_len, p.hop)[:, :p.n_frames(n)]
    spec = torch.fft.rfft(frames * _torch_window(p, x), dim=-1)
    return spec.transpose(-1, -2).reshape(*lead, p.n_bins, -1)


def istft_torch(spec: torch.Tensor, length: int, p: StftParams | None = None) -> torch.Tensor:
    """Batched inverse of :func:`stft_torch`; output ``(..., length)``."""
    p = p or StftParams()
    lead = spec.shape[:-2]
    n_frames = spec.shape[-1]
    flat = spec.reshape(-1, p.n_bins, n_frames)
    frames = torch.fft.irfft(flat.transpose(-1, -2), n=p.fft_len, dim=-1)
    win = torch.as_tensor(p.analysis_window(), dtype=frames.dtype, device=frames.device)
    frames = frames * win
    total = p.fft_len + p.hop * (n_frames - 1)
    y = torch.nn.functional.fold(
        frames.transpose(-1, -2),
        output_size=(1, total),
        kernel_size=(1, p.fft_len),
        stride=(1, p.hop),
    )[:, 0, 0]
    env = p.envelope(n_frames)[p.pad:p.pad + length]
    if env.shape[0] < length or env.min() <= 1e-10:
        raise SignalError(f"length {length} exceeds reconstructible range")
    env = torch.as_tensor(env, dtype=y.dtype, device=y.device)
    y = y[:, p.pad:p.pad + length] / env
    return y.reshape(*lead, length)


def compress_torch(spec: torch.Tensor, c: CompressionParams | None = None,
                   eps: float = 1e-12) -> torch.Tensor:
    c = c or CompressionParams()
    mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)
    return spec * (c.beta * mag ** (c.alpha - 1.0))


def decompress_torch(spec: torch.Tensor, c: CompressionParams | None = None,
                     eps: float = 1e-12) -> torch.Tensor:
    c = c or CompressionParams()
    mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)
    return spec * (mag ** (1.0 / c.alpha - 1.0) / c.beta ** (1.0 / c.alpha))
