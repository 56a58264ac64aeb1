"""Objective speech metrics, EvalRecords and delta aggregation."""
from __future__ import annotations

import csv
import io
import math
import os
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import resample_poly

from .signal_core import Waveform

SI_SDR_CAP = 100.0
FWSSNR_CLAMP = (-10.0, 35.0)
PESQ_RANGE = {"wb": (1.04, 4.644), "nb": (1.0, 4.5)}
PESQ_ENV = "PATHSE_PESQ"

METRIC_NAMES = {"si_sdr": "SI-SDR", "fwssnr": "fwSSNR", "estoi": "ESTOI", "pesq": "PESQ"}
DEFAULT_METRICS = ("estoi", "pesq", "fwssnr", "si_sdr")


class MetricError(ValueError):
    pass


class PesqError(RuntimeError):
    pass


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _check_pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    e, r = _samples(est), _samples(ref)
    if e.shape != r.shape:
        raise MetricError(f"length mismatch: {e.shape} vs {r.shape}")
    return e, r


# -- SI-SDR ------------------------------------------------------------------

def si_sdr(est, ref, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, clipped to ``[-cap, cap]``.

    No mean removal is applied, so DC offsets affect the value.
    """
    e, r = _check_pair(est, ref)
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0:
        raise MetricError("reference is silent")
    target = (np.dot(e, r) / ref_energy) * r
    t_energy = float(np.dot(target, target))
    resid = e - target
    r_energy = float(np.dot(resid, resid))
    if r_energy == 0:
        return cap
    if t_energy == 0:
        return -cap
    return float(np.clip(10.0 * np.log10(t_energy / r_energy), -cap, cap))


# -- fwSSNR ------------------------------------------------------------------

FWSSNR_BANDS = 25
FWSSNR_FRAME_S = 0.025
FWSSNR_OVERLAP = 0.75
FWSSNR_GAMMA = 0.2
FWSSNR_FMIN = 50.0
FWSSNR_FMAX = 7000.0


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def fwssnr_filterbank(fs: int, nfft: int) -> np.ndarray:
    """Gaussian bands centred on a mel grid; std = half the local centre spacing."""
    centres = _mel_to_hz(np.linspace(_hz_to_mel(FWSSNR_FMIN), _hz_to_mel(FWSSNR_FMAX),
                                     FWSSNR_BANDS))
    spacing = np.gradient(centres)
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    return np.exp(-0.5 * ((freqs[None, :] - centres[:, None]) / (0.5 * spacing[:, None])) ** 2)


def fwssnr(est, ref, fs: int = 16000) -> float:
    """Frequency-weighted segmental SNR in dB.

    25 ms Hann frames with 75% overlap; band SNRs clamped to [-10, 35] dB and
    weighted by reference band magnitude ** 0.2.
    """
    e, r = _check_pair(est, ref)
    frame = int(round(FWSSNR_FRAME_S * fs))
    hop = int(round(frame * (1 - FWSSNR_OVERLAP)))
    if len(r) < frame:
        raise MetricError(f"utterance shorter than one {frame}-sample segment")
    nfft = 1 << (frame - 1).bit_length()
    win = np.hanning(frame + 2)[1:-1]
    idx = np.arange(0, len(r) - frame + 1, hop)[:, None] + np.arange(frame)
    fb = fwssnr_filterbank(fs, nfft)
    ref_b = np.abs(np.fft.rfft(r[idx] * win, n=nfft)) @ fb.T
    est_b = np.abs(np.fft.rfft(e[idx] * win, n=nfft)) @ fb.T
    lo, hi = FWSSNR_CLAMP
    with np.errstate(divide="ignore", invalid="ignore"):
        band_snr = 10.0 * np.log10(ref_b ** 2 / (ref_b - est_b) ** 2)
    band_snr = np.where(np.isnan(band_snr), hi, band_snr)
    band_snr = np.clip(band_snr, lo, hi)
    weights = ref_b ** FWSSNR_GAMMA
    wsum = weights.sum(axis=1)
    active = wsum > 0
    if not active.any():
        raise MetricError("reference is silent")
    seg = (weights[active] * band_snr[active]).sum(axis=1) / wsum[active]
    return float(np.clip(seg.mean(), lo, hi))


# -- ESTOI -------------------------------------------------------------------

ESTOI_FS = 10000
ESTOI_FRAME = 256
ESTOI_NFFT = 512
ESTOI_BANDS = 15
ESTOI_FMIN = 150.0
ESTOI_SEGMENT = 30  # frames, 384 ms
ESTOI_DYN_RANGE = 40.0


def _octave_style_resample(x: np.ndarray, up: int, down: int) -> np.ndarray:
    # Kaiser-windowed sinc, 60 dB rejection, roll-off 10% of the cutoff.
    cutoff = 1.0 / (2 * max(up, down))
    width = cutoff / 10
    rejection = 60.0
    half = int(np.ceil((rejection - 8) / (28.714 * width)))
    n = np.arange(-half, half + 1)
    h = 2 * up * cutoff * np.sinc(2 * cutoff * n) * np.kaiser(2 * half + 1,
                                                             0.1102 * (rejection - 8.7))
    return resample_poly(x, up, down, window=h / h.sum())


def _sym_hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, size: int, hop: int, include_last: bool) -> np.ndarray:
    stop = len(x) - size + (1 if include_last else 0)
    starts = np.arange(0, max(stop, 0), hop)
    return x[starts[:, None] + np.arange(size)] if len(starts) else np.zeros((0, size))


def _drop_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hop = ESTOI_FRAME // 2
    w = _sym_hann(ESTOI_FRAME)
    xf = _frames(x, ESTOI_FRAME, hop, include_last=True) * w
    yf = _frames(y, ESTOI_FRAME, hop, include_last=True) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - ESTOI_DYN_RANGE

    def ola(frames):
        out = np.zeros((len(frames) - 1) * hop + ESTOI_FRAME) if len(frames) else np.zeros(0)
        for i, f in enumerate(frames):
            out[i * hop:i * hop + ESTOI_FRAME] += f
        return out

    return ola(xf[keep]), ola(yf[keep])


def _third_octave_matrix() -> np.ndarray:
    freqs = np.linspace(0, ESTOI_FS, ESTOI_NFFT + 1)[:ESTOI_NFFT // 2 + 1]
    k = np.arange(ESTOI_BANDS)
    lows = ESTOI_FMIN * 2.0 ** ((2 * k - 1) / 6)
    highs = ESTOI_FMIN * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((ESTOI_BANDS, len(freqs)))
    for i in range(ESTOI_BANDS):
        lo = int(np.argmin((freqs - lows[i]) ** 2))
        hi = int(np.argmin((freqs - highs[i]) ** 2))
        obm[i, lo:hi] = 1
    return obm


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    w = _sym_hann(ESTOI_FRAME)
    frames = _frames(x, ESTOI_FRAME, ESTOI_FRAME // 2, include_last=False) * w
    spec = np.fft.rfft(frames, n=ESTOI_NFFT, axis=1).T
    return np.sqrt(_third_octave_matrix() @ np.abs(spec) ** 2)


def _normalise(seg: np.ndarray, axis: int) -> np.ndarray:
    seg = seg - seg.mean(axis=axis, keepdims=True)
    norm = np.sqrt((seg ** 2).sum(axis=axis, keepdims=True))
    return seg / np.where(norm > 0, norm, 1.0)


def estoi(est, ref, fs: int = 16000) -> float:
    """Extended short-time objective intelligibility in [-1, 1].

    Resamples to 10 kHz, drops frames more than 40 dB below the loudest
    reference frame, and averages correlations of row- and column-normalised
    384 ms third-octave envelope segments.
    """
    e, r = _check_pair(est, ref)
    if fs != ESTOI_FS:
        ratio = Fraction(ESTOI_FS, fs)
        r = _octave_style_resample(r, ratio.numerator, ratio.denominator)
        e = _octave_style_resample(e, ratio.numerator, ratio.denominator)
    r, e = _drop_silent_frames(r, e)
    x_env, y_env = _band_envelopes(r), _band_envelopes(e)
    n_frames = x_env.shape[1]
    if n_frames < ESTOI_SEGMENT:
        raise MetricError(f"need at least {ESTOI_SEGMENT} active frames "
                          f"({ESTOI_SEGMENT * 12.8:.0f} ms at 10 kHz), got {n_frames}")
    starts = np.arange(n_frames - ESTOI_SEGMENT + 1)
    idx = starts[:, None] + np.arange(ESTOI_SEGMENT)
    xs = x_env[:, idx].transpose(1, 0, 2)  # (segments, bands, frames)
    ys = y_env[:, idx].transpose(1, 0, 2)
    xn = _normalise(_normalise(xs, axis=2), axis=1)
    yn = _normalise(_normalise(ys, axis=2), axis=1)
    return float(np.sum(xn * yn) / (ESTOI_SEGMENT * xn.shape[0]))


# -- PESQ adapter ------------------------------------------------------------

class _Unavailable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNAVAILABLE"

    def __bool__(self):
        return False


UNAVAILABLE = _Unavailable()
_FLOAT_RE = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def pesq_executable(explicit: str | None = None) -> str | None:
    return explicit or os.environ.get(PESQ_ENV) or None


def pesq_external(est_path, ref_path, mode: str = "wb", executable: str | None = None,
                  utterance: str | None = None, timeout: float = 120.0):
    """Score ``est_path`` against ``ref_path`` with an external P.862.2 evaluator.

    The evaluator is called as ``<exe> <ref> <est> <mode>`` and must print the
    score as the last number on its last non-empty output line, e.g.::

        $ my-pesq ref.wav est.wav wb
        P.862.2 Prediction (MOS-LQO):  = 4.644

    Returns :data:`UNAVAILABLE` when no evaluator is configured.
    """
    exe = pesq_executable(executable)
    if exe is None:
        return UNAVAILABLE
    name = utterance or Path(est_path).name
    try:
        proc = subprocess.run([exe, str(ref_path), str(est_path), mode],
                              capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise PesqError(f"{name}: PESQ evaluator failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise PesqError(f"{name}: PESQ evaluator exited with {proc.returncode}: "
                        f"{proc.stderr.strip()[-200:]}")
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    numbers = _FLOAT_RE.findall(lines[-1]) if lines else []
    if not numbers:
        raise PesqError(f"{name}: unparseable PESQ evaluator output {proc.stdout[-200:]!r}")
    score = float(numbers[-1])
    lo, hi = PESQ_RANGE.get(mode, (-0.5, 4.64))
    if not lo - 1e-6 <= score <= hi + 1e-6:
        raise PesqError(f"{name}: PESQ score {score} outside [{lo}, {hi}]")
    return score


def pesq_many(pairs: Sequence[tuple[str, str, str]], mode: str = "wb",
              executable: str | None = None, limit: int = 1) -> list:
    """Run the adapter over ``(est, ref, utterance)`` triples with bounded concurrency."""
    with ThreadPoolExecutor(max_workers=max(1, limit)) as pool:
        futures = [pool.submit(pesq_external, e, r, mode, executable, u) for e, r, u in pairs]
        return [f.result() for f in futures]


# -- records and aggregation -------------------------------------------------

@dataclass
class EvalRecord:
    utt_id: str
    speaker_id: str
    group: str
    snr_db: float
    noisy: dict[str, float]
    enhanced: dict[str, float]
    flagged: bool = False
    labels: dict[str, str] = field(default_factory=dict)

    @property
    def deltas(self) -> dict[str, float]:
        return {m: self.enhanced[m] - self.noisy[m] for m in self.noisy}


def compute_metrics(est: np.ndarray, ref: np.ndarray, names: Iterable[str],
                    fs: int = 16000) -> dict[str, float]:
    fns: dict[str, Callable] = {
        "si_sdr": lambda e, r: si_sdr(e, r),
        "fwssnr": lambda e, r: fwssnr(e, r, fs),
        "estoi": lambda e, r: estoi(e, r, fs),
    }
    return {n: fns[n](est, ref) for n in names}


LABEL_COLUMNS = ("family", "strategy")


def record_columns(metrics: Sequence[str]) -> list[str]:
    cols = ["utt_id", "speaker_id", "group", "snr_db", *LABEL_COLUMNS]
    for m in metrics:
        cols += [f"{m}_noisy", f"{m}_enhanced", f"{m}_delta"]
    return cols + ["flagged"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_records_csv(path, records: Sequence[EvalRecord], metrics: Sequence[str]) -> None:
    if not records:
        raise MetricError("refusing to write an empty record set")
    cols = record_columns(metrics)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = [r.utt_id, r.speaker_id, r.group, _fmt(r.snr_db),
               *(r.labels.get(c, "") for c in LABEL_COLUMNS)]
        for m in metrics:
            row += [_fmt(r.noisy[m]), _fmt(r.enhanced[m]), _fmt(r.enhanced[m] - r.noisy[m])]
        row.append("1" if r.flagged else "0")
        w.writerow(row)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def metrics_in_columns(cols: Sequence[str]) -> list[str]:
    return [c[:-len("_delta")] for c in cols if c.endswith("_delta")]


def read_records_csv(path) -> tuple[list[EvalRecord], list[str]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        metrics = metrics_in_columns(cols)
        if list(cols) != record_columns(metrics):
            raise MetricError(f"{path}: unexpected column schema {cols}")
        records = []
        for row in reader:
            rec = EvalRecord(
                row["utt_id"], row["speaker_id"], row["group"], float(row["snr_db"]),
                {m: float(row[f"{m}_noisy"]) for m in metrics},
                {m: float(row[f"{m}_enhanced"]) for m in metrics},
                row["flagged"] == "1", {c: row[c] for c in LABEL_COLUMNS if row[c]})
            for m in metrics:
                stored, delta = float(row[f"{m}_delta"]), rec.enhanced[m] - rec.noisy[m]
                if stored != delta and not (math.isnan(stored) and math.isnan(delta)):
                    raise MetricError(f"{path}: delta mismatch for {rec.utt_id}/{m}")
            records.append(rec)
    return records, metrics


@dataclass(frozen=True)
class DeltaStat:
    mean: float
    se: float
    sd: float
    n: int


@dataclass(frozen=True)
class AggregateRow:
    key: tuple
    stats: Mapping[str, DeltaStat]
    excluded: int = 0


def _stat(values: np.ndarray) -> DeltaStat:
    n = len(values)
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return DeltaStat(float(np.mean(values)), sd / math.sqrt(n), sd, n)


def aggregate_deltas(records: Sequence[EvalRecord], group: str | None = None,
                     by: Sequence[str] = ()) -> list[AggregateRow]:
    """Mean and standard error of per-metric deltas, optionally grouped.

    ``by`` may contain ``"group"``, ``"snr_db"``, ``"speaker_id"`` or any label
    key. Flagged records are excluded and counted per row.
    """
    selected = [r for r in records if group is None or r.group == group]
    if not selected:
        raise MetricError("no records match the selection")

    def key_of(r: EvalRecord) -> tuple:
        return tuple(getattr(r, k) if hasattr(r, k) else r.labels.get(k, "") for k in by)

    keys = sorted({key_of(r) for r in selected})
    rows = []
    for key in keys:
        members = [r for r in selected if key_of(r) == key]
        usable = [r for r in members if not r.flagged]
        if not usable:
            rows.append(AggregateRow(key, {}, len(members)))
            continue
        metrics = list(usable[0].noisy)
        stats = {m: _stat(np.array([r.enhanced[m] - r.noisy[m] for r in usable]))
                 for m in metrics}
        rows.append(AggregateRow(key, stats, len(members) - len(usable)))
    return rows


def aggregate_table(rows: Sequence[AggregateRow], by: Sequence[str],
                    metrics: Sequence[str]) -> tuple[str, str]:
    """Render aggregate rows as (csv, aligned text)."""
    header = [*by, *(f"delta_{m}_{s}" for m in metrics for s in ("mean", "se")), "n", "excluded"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    text_rows = [[*by, *(f"d{METRIC_NAMES.get(m, m)}" for m in metrics), "n"]]
    for row in rows:
        n = max((s.n for s in row.stats.values()), default=0)
        cells = []
        for m in metrics:
            s = row.stats.get(m)
            cells += ["", ""] if s is None else [_fmt(s.mean), _fmt(s.se)]
        w.writerow([*map(str, row.key), *cells, n, row.excluded])
        text_rows.append([*map(str, row.key),
                          *(f"{row.stats[m].mean:.2f} ± {row.stats[m].se:.2f}"
                            if m in row.stats else "-" for m in metrics), str(n)])
    return buf.getvalue(), format_aligned(text_rows)


def format_aligned(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
