"""Manifests, resampling, noisy-mixture synthesis, fold planning, toy corpora."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .signal_core import SignalError, Waveform, noise_gain_for_snr

GROUPS = ("neurotypical", "pathological")
UTTERANCE_TYPES = ("sentence", "read_text", "monologue")
NOISE_CATEGORIES = ("bus", "cafe", "pedestrian", "street")
TRAIN_SNR_RANGE = (-6.0, 14.0)
CANONICAL_RATE = 16000


class ManifestError(ValueError):
    pass


class MixtureError(ValueError):
    pass


class FoldPlanError(ValueError):
    pass


# -- audio files -------------------------------------------------------------

def read_wav(path) -> Waveform:
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"unreadable audio {path}: {exc}") from exc
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    try:
        return Waveform(samples, rate)
    except SignalError as exc:
        raise ManifestError(f"corrupt audio {path}: {exc}") from exc


def write_wav(path, w: Waveform, pcm16: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(str(path), w.sample_rate, data)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class AudioClip:
    id: str
    speaker_id: str
    group: str
    utterance_type: str
    duration: float
    sample_rate: int = CANONICAL_RATE
    path: Path | None = None
    language: str = "es"
    waveform: Waveform | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ManifestError(f"clip {self.id}: unknown group {self.group!r}")
        if self.utterance_type not in UTTERANCE_TYPES:
            raise ManifestError(f"clip {self.id}: unknown utterance_type {self.utterance_type!r}")
        if not self.duration > 0:
            raise ManifestError(f"clip {self.id}: duration must be positive")
        if self.path is None and self.waveform is None:
            raise ManifestError(f"clip {self.id}: needs a path or an inline waveform")

    def load(self) -> Waveform:
        return self.waveform if self.waveform is not None else read_wav(self.path)

    def record(self, root: Path | None = None) -> dict:
        path = self.path
        if path is not None and root is not None:
            try:
                path = Path(path).resolve().relative_to(Path(root).resolve())
            except ValueError:
                pass
        return {
            "id": self.id,
            "path": None if path is None else str(path),
            "speaker_id": self.speaker_id,
            "group": self.group,
            "utterance_type": self.utterance_type,
            "sample_rate": self.sample_rate,
            "duration": self.duration,
            "language": self.language,
        }


@dataclass(frozen=True)
class NoiseClip:
    id: str
    category: str
    duration: float
    sample_rate: int = CANONICAL_RATE
    path: Path | None = None
    waveform: Waveform | None = field(default=None, compare=False, repr=False)

    def load(self) -> Waveform:
        return self.waveform if self.waveform is not None else read_wav(self.path)

    def record(self, root: Path | None = None) -> dict:
        path = self.path
        if path is not None and root is not None:
            try:
                path = Path(path).resolve().relative_to(Path(root).resolve())
            except ValueError:
                pass
        return {"id": self.id, "path": None if path is None else str(path),
                "category": self.category, "sample_rate": self.sample_rate,
                "duration": self.duration}


_CLIP_FIELDS = ("id", "path", "speaker_id", "group", "utterance_type", "sample_rate", "duration")
_NOISE_FIELDS = ("id", "path", "category", "sample_rate", "duration")


def _read_records(path, required: Sequence[str]) -> list[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    rows = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in required if k not in rec or rec[k] is None]
            if missing:
                raise ManifestError(f"{path}:{lineno}: row missing field(s) {', '.join(missing)}")
            if rec["id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            rows.append((lineno, rec))
    return rows


def _resolve(manifest: Path, rel: str, lineno: int, check: bool) -> Path:
    p = Path(rel)
    if not p.is_absolute():
        p = manifest.parent / p
    if check and not p.is_file():
        raise ManifestError(f"{manifest}:{lineno}: audio file {p} not found")
    return p


def load_manifest(path, check_audio: bool = True) -> list[AudioClip]:
    """Parse a line-delimited JSON manifest of clean clips."""
    path = Path(path)
    clips = []
    for lineno, rec in _read_records(path, _CLIP_FIELDS):
        try:
            clips.append(AudioClip(
                id=str(rec["id"]),
                speaker_id=str(rec["speaker_id"]),
                group=rec["group"],
                utterance_type=rec["utterance_type"],
                duration=float(rec["duration"]),
                sample_rate=int(rec["sample_rate"]),
                path=_resolve(path, rec["path"], lineno, check_audio),
                language=rec.get("language", "es"),
            ))
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return clips


def load_noise_manifest(path, check_audio: bool = True) -> list[NoiseClip]:
    path = Path(path)
    out = []
    for lineno, rec in _read_records(path, _NOISE_FIELDS):
        out.append(NoiseClip(
            id=str(rec["id"]), category=rec["category"], duration=float(rec["duration"]),
            sample_rate=int(rec["sample_rate"]),
            path=_resolve(path, rec["path"], lineno, check_audio),
        ))
    return out


def save_manifest(path, clips: Iterable[AudioClip | NoiseClip]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.record(path.parent), sort_keys=True) + "\n")


# -- resampling --------------------------------------------------------------

RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 14.0


def _resample_filter(up: int, down: int) -> np.ndarray:
    phases = max(up, down)
    numtaps = RESAMPLE_TAPS_PER_PHASE * phases + 1
    return firwin(numtaps, 1.0 / phases, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(clip, target_rate: int = CANONICAL_RATE):
    """Downsample a :class:`Waveform` or inline/file-backed :class:`AudioClip`.

    Windowed-sinc polyphase filter (Kaiser, beta 14, 64 taps per phase).
    Equal rates pass through untouched.
    """
    if isinstance(clip, (AudioClip, NoiseClip)):
        w = resample(clip.load(), target_rate)
        return replace(clip, waveform=w, sample_rate=target_rate, duration=w.duration)
    w: Waveform = clip
    if w.sample_rate == target_rate:
        return w
    if w.sample_rate < target_rate:
        raise SignalError(f"upsampling {w.sample_rate} -> {target_rate} Hz is not supported")
    ratio = Fraction(target_rate, w.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    y = resample_poly(w.samples, up, down, window=_resample_filter(up, down))
    return Waveform(y, target_rate)


# -- mixtures ----------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    clean_ref: str
    noise_ref: str
    noise_offset: int
    snr_db: float
    rng_seed: int

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise MixtureError("snr_db must be finite")
        if self.noise_offset < 0:
            raise MixtureError("noise_offset must be non-negative")


def sample_training_snr(rng: np.random.Generator) -> float:
    return float(rng.uniform(*TRAIN_SNR_RANGE))


def test_snr_grid() -> list[float]:
    return [-5.0, 0.0, 5.0, 10.0, 15.0]


test_snr_grid.__test__ = False  # not a pytest test despite the name


def draw_mixture_spec(clean_id: str, clean_len: int, noises: Sequence[NoiseClip],
                      seed: int, snr_db: float | None = None) -> MixtureSpec:
    """Pick a noise file (uniform category, then uniform file), an offset and an SNR.

    All choices derive from ``seed``; ``snr_db=None`` draws a training SNR.
    """
    rng = np.random.default_rng(seed)
    cats = sorted({n.category for n in noises})
    if not cats:
        raise MixtureError("noise bank is empty")
    cat = cats[rng.integers(len(cats))]
    pool = [n for n in noises if n.category == cat]
    noise = pool[rng.integers(len(pool))]
    n_len = int(round(noise.duration * noise.sample_rate))
    if n_len < clean_len:
        raise MixtureError(f"noise {noise.id} ({n_len} samples) is shorter than clean "
                           f"{clean_id} ({clean_len} samples)")
    offset = int(rng.integers(n_len - clean_len + 1))
    snr = sample_training_snr(rng) if snr_db is None else float(snr_db)
    return MixtureSpec(clean_id, noise.id, offset, snr, int(seed))


def make_mixture(spec: MixtureSpec, clips: Mapping[str, object],
                 noises: Mapping[str, object]) -> tuple[Waveform, Waveform, Waveform]:
    """Return ``(noisy, clean, scaled_noise)`` with ``noisy == clean + scaled_noise``."""
    clean = _as_waveform(clips[spec.clean_ref])
    noise = _as_waveform(noises[spec.noise_ref])
    if clean.sample_rate != noise.sample_rate:
        raise MixtureError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    end = spec.noise_offset + len(clean)
    if end > len(noise):
        raise MixtureError(f"noise {spec.noise_ref} has no {len(clean)}-sample segment "
                           f"at offset {spec.noise_offset}")
    segment = Waveform(noise.samples[spec.noise_offset:end], noise.sample_rate)
    try:
        g = noise_gain_for_snr(clean, segment, spec.snr_db)
    except SignalError as exc:
        raise MixtureError(f"{spec.clean_ref}/{spec.noise_ref}: {exc}") from exc
    scaled = segment.samples * g
    return (Waveform(clean.samples + scaled, clean.sample_rate), clean,
            Waveform(scaled, clean.sample_rate))


def _as_waveform(obj) -> Waveform:
    return obj if isinstance(obj, Waveform) else obj.load()


def save_mixture_specs(path, specs: Iterable[MixtureSpec]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def load_mixture_specs(path) -> list[MixtureSpec]:
    with Path(path).open(encoding="utf-8") as fh:
        return [MixtureSpec(**json.loads(line)) for line in fh if line.strip()]


# -- cross-validation planning -----------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[Fold, ...]
    labels: Mapping[str, str]
    seed: int = 0

    def __post_init__(self):
        test_seen: list[str] = []
        for i, f in enumerate(self.folds):
            a, b, c = set(f.train), set(f.val), set(f.test)
            if a & b or a & c or b & c:
                raise FoldPlanError(f"fold {i}: speaker subsets overlap")
            test_seen.extend(f.test)
        if sorted(test_seen) != sorted(self.labels):
            raise FoldPlanError("test sets must cover every speaker exactly once")

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k, "seed": self.seed, "labels": dict(sorted(self.labels.items())),
            "folds": [{"train": list(f.train), "val": list(f.val), "test": list(f.test)}
                      for f in self.folds],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        folds = tuple(Fold(tuple(f["train"]), tuple(f["val"]), tuple(f["test"]))
                      for f in d["folds"])
        return cls(d["k"], folds, d["labels"], d.get("seed", 0))


def plan_folds(speakers: Mapping[str, str], k: int = 10, rng_seed: int = 0) -> FoldPlan:
    """Stratified speaker-independent k-fold plan.

    Speakers are shuffled within each group and dealt round-robin into ``k``
    test buckets; fold ``i`` validates on bucket ``i+1`` and trains on the rest.
    With ``k == 2`` there is no spare bucket, so one speaker per group of the
    other bucket is held out for validation instead.
    """
    if k < 2:
        raise FoldPlanError("k must be at least 2")
    by_group: dict[str, list[str]] = {}
    for spk, grp in sorted(speakers.items()):
        by_group.setdefault(grp, []).append(spk)
    for grp, members in by_group.items():
        if len(members) < k:
            raise FoldPlanError(f"group {grp!r} has {len(members)} speakers, need >= {k}")
    rng = np.random.default_rng(rng_seed)
    order: list[str] = []
    for grp in sorted(by_group):
        members = list(by_group[grp])
        rng.shuffle(members)
        order.extend(members)
    buckets: list[list[str]] = [[] for _ in range(k)]
    for i, spk in enumerate(order):
        buckets[i % k].append(spk)
    folds = []
    for i in range(k):
        test = sorted(buckets[i])
        if k == 2:
            rest = buckets[1 - i]
            val = sorted({speakers[s]: s for s in reversed(rest)}.values())
            train = sorted(set(rest) - set(val))
            if not train:
                raise FoldPlanError("2-fold plan leaves no training speakers; "
                                    "need at least 2 speakers per group per bucket")
        else:
            val = sorted(buckets[(i + 1) % k])
            train = sorted(s for j, b in enumerate(buckets) if j not in (i, (i + 1) % k)
                           for s in b)
        folds.append(Fold(tuple(train), tuple(val), tuple(test)))
    return FoldPlan(k, tuple(folds), dict(speakers), rng_seed)


@dataclass(frozen=True)
class PersonalizationSplit:
    name: str
    adapt: tuple[AudioClip, ...]
    test: tuple[AudioClip, ...]


def plan_personalization_split(clips: Sequence[AudioClip]) -> tuple[PersonalizationSplit,
                                                                    PersonalizationSplit]:
    """Split A adapts on the monologue(s) and tests on the rest; split B the reverse."""
    speakers = {c.speaker_id for c in clips}
    if len(speakers) != 1:
        raise ManifestError(f"expected clips of a single speaker, got {sorted(speakers)}")
    mono = tuple(c for c in clips if c.utterance_type == "monologue")
    rest = tuple(c for c in clips if c.utterance_type in ("sentence", "read_text"))
    if not mono or not rest:
        raise ManifestError(
            f"speaker {next(iter(speakers))} needs at least one monologue and one "
            "sentence/read_text clip for personalization")
    return PersonalizationSplit("A", mono, rest), PersonalizationSplit("B", rest, mono)


# -- toy corpus --------------------------------------------------------------

def _utterance_types(n: int) -> list[str]:
    if n >= 3:
        return ["sentence"] * (n - 2) + ["read_text", "monologue"]
    return ["sentence"] * max(n - 1, 0) + ["monologue"] * min(n, 1)


def synth_speech(rng: np.random.Generator, duration: float, sample_rate: int,
                 f0: float, formants: Sequence[float], pathological: bool) -> np.ndarray:
    """Harmonic 'speech': syllable-gated glottal-like harmonics through formant bumps."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    if pathological:
        # tremor and jitter
        drift = drift * (1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(4, 7) * t))
        drift = drift * (1.0 + 0.01 * rng.standard_normal(n).cumsum() / np.sqrt(n))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sample_rate
    nyq = sample_rate / 2
    x = np.zeros(n)
    for h in range(1, int(0.9 * nyq / f0)):
        fh = h * f0
        gain = sum(np.exp(-0.5 * ((fh - fc) / (0.12 * fc)) ** 2) for fc in formants) + 0.05
        x += gain / np.sqrt(h) * np.sin(h * phase)
    # syllabic gating
    rate = rng.uniform(3.0, 5.0) * (0.7 if pathological else 1.0)
    env = 0.5 * (1 - np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    env = env ** (1.0 if pathological else 2.0)
    pauses = np.ones(n)
    for _ in range(max(1, int(duration))):
        start = int(rng.uniform(0.1, 0.9) * n)
        width = int(rng.uniform(0.05, 0.15) * sample_rate)
        pauses[start:start + width] = 0.05
    x = x * env * np.convolve(pauses, np.ones(160) / 160, mode="same")
    if pathological:
        breath = rng.standard_normal(n) * env * 0.05 * np.abs(x).max()
        x = x + breath
    fade = min(n // 4, int(0.01 * sample_rate))
    if fade:
        ramp = np.linspace(0, 1, fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return 0.3 * x / (np.abs(x).max() + 1e-12)


def synth_noise(rng: np.random.Generator, category: str, duration: float,
                sample_rate: int) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    white = rng.standard_normal(n)
    if category == "bus":
        brown = np.cumsum(white)
        brown -= np.convolve(brown, np.ones(801) / 801, mode="same")
        hum = np.sin(2 * np.pi * rng.uniform(40, 80) * t) * 0.5
        x = brown / (np.std(brown) + 1e-12) + hum + 0.1 * white
    elif category == "cafe":
        x = 0.2 * white
        for _ in range(6):
            f0 = rng.uniform(90, 260)
            phase = 2 * np.pi * f0 * t
            voice = sum(np.sin(h * phase) / h for h in range(1, 12))
            gate = 0.5 * (1 - np.cos(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 6.3)))
            x = x + voice * gate * rng.uniform(0.3, 1.0)
    elif category == "pedestrian":
        pink = np.fft.irfft(np.fft.rfft(white) / np.sqrt(np.arange(n // 2 + 1) + 1.0), n=n)
        steps = np.zeros(n)
        for s in rng.integers(0, n, size=max(1, int(2 * duration))):
            steps[s:s + 200] += np.exp(-np.arange(min(200, n - s)) / 40.0)
        x = pink / (np.std(pink) + 1e-12) + 2.0 * steps * rng.standard_normal(n)
    elif category == "street":
        mod = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t)
        x = white * mod
    else:
        raise ValueError(f"unknown noise category {category!r}")
    return 0.3 * x / (np.abs(x).max() + 1e-12)


@dataclass(frozen=True)
class ToyCorpus:
    clean_manifest: Path
    noise_manifest: Path
    clips: tuple[AudioClip, ...]
    noises: tuple[NoiseClip, ...]


def generate_toy_corpus(out_dir, n_speakers: int = 4, utterances_per_speaker: int = 12,
                        rng_seed: int = 0, sample_rate: int = CANONICAL_RATE,
                        min_duration: float = 1.0, max_duration: float = 2.0,
                        noise_files_per_category: int = 1,
                        noise_duration: float = 8.0) -> ToyCorpus:
    """Write a deterministic synthetic corpus (clean speakers + CHiME-style noise bank)."""
    if n_speakers <= 0 or utterances_per_speaker <= 0:
        raise ValueError("n_speakers and utterances_per_speaker must be positive")
    if not 0 < min_duration <= max_duration:
        raise ValueError("need 0 < min_duration <= max_duration")
    out = Path(out_dir)
    rng = np.random.default_rng(rng_seed)
    clips = []
    for s in range(n_speakers):
        group = GROUPS[s % 2]
        spk = f"spk{s:03d}"
        f0 = rng.uniform(90, 240)
        formants = sorted(rng.uniform([400, 1000, 2200], [900, 1800, 3200]))
        for u, utype in enumerate(_utterance_types(utterances_per_speaker)):
            dur = max_duration if utype == "monologue" else rng.uniform(min_duration, max_duration)
            x = synth_speech(rng, dur, sample_rate, f0, formants, group == "pathological")
            cid = f"{spk}_u{u:02d}"
            path = out / "clean" / f"{cid}.wav"
            w = Waveform(x, sample_rate)
            write_wav(path, w)
            clips.append(AudioClip(cid, spk, group, utype, len(w) / sample_rate,
                                   sample_rate, path))
    noises = []
    for cat in NOISE_CATEGORIES:
        for i in range(noise_files_per_category):
            nid = f"{cat}_{i:02d}"
            w = Waveform(synth_noise(rng, cat, noise_duration, sample_rate), sample_rate)
            path = out / "noise" / f"{nid}.wav"
            write_wav(path, w)
            noises.append(NoiseClip(nid, cat, len(w) / sample_rate, sample_rate, path))
    save_manifest(out / "clean.jsonl", clips)
    save_manifest(out / "noise.jsonl", noises)
    return ToyCorpus(out / "clean.jsonl", out / "noise.jsonl", tuple(clips), tuple(noises))
