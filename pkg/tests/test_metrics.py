import math
import stat
import sys
import textwrap

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from pystoi import stoi as ref_stoi
from torchmetrics.functional.audio import scale_invariant_signal_distortion_ratio

from pathse.dataio import synth_speech
from pathse.metrics import (UNAVAILABLE, EvalRecord, MetricError, PesqError,
                            aggregate_deltas, aggregate_table, compute_metrics, estoi, fwssnr,
                            pesq_external, pesq_many, read_records_csv, si_sdr,
                            write_records_csv)

FS = 16000


def speech(seed, seconds=2.0, patho=False):
    rng = np.random.default_rng(seed)
    return synth_speech(rng, seconds, FS, rng.uniform(100, 220), [600, 1400, 2600], patho)


def pair(seed, snr=5.0):
    rng = np.random.default_rng(seed + 1000)
    ref = speech(seed)
    noise = rng.standard_normal(len(ref))
    noise *= np.sqrt(np.mean(ref ** 2) / np.mean(noise ** 2) / 10 ** (snr / 10))
    return ref + noise, ref


# -- SI-SDR -----------------------------------------------------------------

def test_si_sdr_examples():
    assert si_sdr([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-12)
    x = speech(0)
    assert si_sdr(x, x) == 100.0
    assert si_sdr(3 * x, x) == 100.0
    with pytest.raises(MetricError):
        si_sdr(x, np.zeros_like(x))
    with pytest.raises(MetricError):
        si_sdr(x[:10], x)


def test_si_sdr_scale_invariant_not_shift_invariant():
    est, ref = pair(1)
    base = si_sdr(est, ref)
    for a in (0.5, 2.0, 10.0):
        assert abs(si_sdr(a * est, ref) - base) <= 1e-9
    assert abs(si_sdr(est + 0.5, ref) - base) > 0.1


def test_si_sdr_matches_reference_implementation():
    for seed in range(10):
        est, ref = pair(seed, snr=seed - 3.0)
        expected = float(scale_invariant_signal_distortion_ratio(
            torch.as_tensor(est), torch.as_tensor(ref), zero_mean=False))
        assert abs(si_sdr(est, ref) - expected) <= 1e-3


# -- ESTOI ------------------------------------------------------------------

def test_estoi_matches_reference_implementation():
    for seed in range(10):
        est, ref = pair(seed, snr=seed - 5.0)
        expected = ref_stoi(ref, est, FS, extended=True)
        assert abs(estoi(est, ref) - expected) <= 1e-3


def test_estoi_identity_and_sign():
    ref = speech(3)
    assert abs(estoi(ref, ref) - 1.0) <= 1e-6
    # envelopes are magnitudes, so a sign flip leaves the score unchanged
    assert abs(estoi(-ref, ref) - 1.0) <= 1e-6


def test_estoi_independent_noise_decorrelates():
    ref = speech(4)
    rng = np.random.default_rng(0)
    scores = [estoi(rng.standard_normal(len(ref)), ref) for _ in range(20)]
    assert max(abs(s) for s in scores) <= 0.1


def test_estoi_too_short():
    with pytest.raises(MetricError):
        estoi(np.ones(2000), np.ones(2000))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), snr=st.floats(-20, 30))
def test_estoi_codomain(seed, snr):
    est, ref = pair(seed % 50, snr)
    assert -1.0 <= estoi(est, ref) <= 1.0


# -- fwSSNR -----------------------------------------------------------------

def fwssnr_oracle(est, ref, fs=FS):
    """Frame-by-frame restatement of the pinned variant."""
    frame, hop, nfft = 400, 100, 512
    win = np.array([0.5 - 0.5 * math.cos(2 * math.pi * (n + 1) / (frame + 1))
                    for n in range(frame)])
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    imel = lambda m: 700 * (10 ** (m / 2595) - 1)
    m_lo, m_hi = mel(50.0), mel(7000.0)
    centres = [imel(m_lo + i * (m_hi - m_lo) / 24) for i in range(25)]
    spacing = np.gradient(np.array(centres))
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    segs = []
    for start in range(0, len(ref) - frame + 1, hop):
        rs = np.abs(np.fft.rfft(ref[start:start + frame] * win, nfft))
        es = np.abs(np.fft.rfft(est[start:start + frame] * win, nfft))
        num = den = 0.0
        for c, sp in zip(centres, spacing):
            g = np.exp(-0.5 * ((freqs - c) / (0.5 * sp)) ** 2)
            xb, yb = float(rs @ g), float(es @ g)
            snr = 35.0 if xb == yb else 10 * math.log10(xb ** 2 / (xb - yb) ** 2)
            snr = min(max(snr, -10.0), 35.0)
            w = xb ** 0.2
            num += w * snr
            den += w
        if den > 0:
            segs.append(num / den)
    return float(np.mean(segs))


def test_fwssnr_matches_oracle():
    for seed in range(10):
        est, ref = pair(seed, snr=2.0 * seed - 5)
        assert abs(fwssnr(est, ref) - fwssnr_oracle(est, ref)) <= 0.1


def test_fwssnr_clamps():
    ref = speech(5)
    assert fwssnr(ref, ref) == 35.0
    noise = np.random.default_rng(1).standard_normal(len(ref))
    noise *= np.sqrt(np.mean(ref ** 2) / np.mean(noise ** 2) * 1e4)
    assert fwssnr(ref + noise, ref) == pytest.approx(-10.0, abs=1e-9)
    with pytest.raises(MetricError):
        fwssnr(ref[:100], ref[:100])


def test_fwssnr_monotone_noise_ladder():
    ref = speech(6)
    noise = np.random.default_rng(2).standard_normal(len(ref))
    noise /= np.sqrt(np.mean(noise ** 2))
    p = np.sqrt(np.mean(ref ** 2))
    values = [fwssnr(ref + p * 10 ** (-snr / 20) * noise, ref)
              for snr in np.linspace(40, -30, 10)]
    assert all(-10 <= v <= 35 for v in values)
    assert all(b <= a for a, b in zip(values, values[1:]))


# -- PESQ adapter -------------------------------------------------------------

def _script(tmp_path, body):
    path = tmp_path / "evaluator"
    path.write_text(f"#!{sys.executable}\n" + textwrap.dedent(body))
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


CONFORMANT = """
import sys
from scipy.io import wavfile
from pesq import pesq
ref, est, mode = sys.argv[1:4]
fs, r = wavfile.read(ref)
_, e = wavfile.read(est)
print("P.862.2 Prediction (MOS-LQO):  = %.3f" % pesq(fs, r, e, mode))
"""


def _wavs(tmp_path, est, ref):
    from pathse.dataio import write_wav
    from pathse.signal_core import Waveform
    write_wav(tmp_path / "ref.wav", Waveform(ref, FS))
    write_wav(tmp_path / "est.wav", Waveform(est, FS))
    return tmp_path / "est.wav", tmp_path / "ref.wav"


def test_pesq_unavailable(monkeypatch, tmp_path):
    monkeypatch.delenv("PATHSE_PESQ", raising=False)
    e, r = _wavs(tmp_path, speech(7), speech(7))
    assert pesq_external(e, r) is UNAVAILABLE
    assert not UNAVAILABLE


def test_pesq_conformant_evaluator(tmp_path, monkeypatch):
    exe = _script(tmp_path, CONFORMANT)
    ref = speech(8, 3.0)
    e, r = _wavs(tmp_path, ref, ref)
    assert pesq_external(e, r, "wb", exe) >= 4.5
    monkeypatch.setenv("PATHSE_PESQ", exe)
    noisy, _ = pair(8, 0.0)
    e2, _ = _wavs(tmp_path, noisy[:len(ref)], ref)
    [score] = pesq_many([(str(e2), str(r), "u1")], limit=2)
    assert 1.04 <= score < 4.5


def test_pesq_malformed_output_names_utterance(tmp_path):
    e, r = _wavs(tmp_path, speech(9), speech(9))
    bad = _script(tmp_path, 'print("no score here")\n')
    with pytest.raises(PesqError, match="utt-42"):
        pesq_external(e, r, "wb", bad, utterance="utt-42")
    out_of_range = _script(tmp_path, 'print("7.5")\n')
    with pytest.raises(PesqError, match="outside"):
        pesq_external(e, r, "wb", out_of_range, utterance="u")
    crash = _script(tmp_path, 'import sys; sys.exit(3)\n')
    with pytest.raises(PesqError, match="exited"):
        pesq_external(e, r, "wb", crash, utterance="u")


# -- records and aggregation -----------------------------------------------------

def rec(uid, delta, group="pathological", snr=0.0, flagged=False, **labels):
    return EvalRecord(uid, "s" + uid, group, snr, {"si_sdr": 1.0},
                      {"si_sdr": 1.0 + delta}, flagged, labels)


def test_aggregate_examples():
    [row] = aggregate_deltas([rec("a", 2.0)])
    s = row.stats["si_sdr"]
    assert (s.mean, s.se, s.n) == (2.0, 0.0, 1)
    [row] = aggregate_deltas([rec("a", 1.0), rec("b", 3.0)])
    assert row.stats["si_sdr"].mean == 2.0
    assert row.stats["si_sdr"].se == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(MetricError):
        aggregate_deltas([])
    with pytest.raises(MetricError):
        aggregate_deltas([rec("a", 1.0)], group="neurotypical")


def test_aggregate_grouping_and_flags():
    records = [rec("a", 1.0, "neurotypical"), rec("b", 5.0, "pathological"),
               rec("c", float("nan"), "pathological", flagged=True)]
    rows = aggregate_deltas(records, by=("group",))
    assert [r.key for r in rows] == [("neurotypical",), ("pathological",)]
    patho = rows[1]
    assert patho.excluded == 1 and patho.stats["si_sdr"].mean == 5.0
    csv_text, text = aggregate_table(rows, ("group",), ["si_sdr"])
    assert csv_text.splitlines()[0].startswith("group,delta_si_sdr_mean")
    assert "pathological" in text and "5.00" in text


def test_records_csv_round_trip(tmp_path):
    records = [rec(str(i), 0.1 * i, snr=s, family="MM", strategy="scratch")
               for i, s in enumerate([-5.0, 0.0, 5.0])]
    records.append(rec("x", float("nan"), flagged=True, family="MM", strategy="scratch"))
    write_records_csv(tmp_path / "r.csv", records, ["si_sdr"])
    back, metrics = read_records_csv(tmp_path / "r.csv")
    assert metrics == ["si_sdr"]
    for a, b in zip(records[:3], back):
        assert a.deltas == b.deltas and a.labels == b.labels and a.snr_db == b.snr_db
    assert back[-1].flagged and math.isnan(back[-1].enhanced["si_sdr"])
    with pytest.raises(MetricError):
        write_records_csv(tmp_path / "e.csv", [], ["si_sdr"])


def test_records_csv_delta_tamper_detected(tmp_path):
    write_records_csv(tmp_path / "r.csv", [rec("a", 1.0)], ["si_sdr"])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    cells = lines[1].split(",")
    cells[-2] = "9.0"
    (tmp_path / "r.csv").write_text("\n".join([lines[0], ",".join(cells)]) + "\n")
    with pytest.raises(MetricError, match="delta"):
        read_records_csv(tmp_path / "r.csv")


@settings(max_examples=50, deadline=None)
@given(noisy=st.floats(-50, 50), enhanced=st.floats(-50, 50))
def test_delta_is_exact_difference(noisy, enhanced):
    r = EvalRecord("u", "s", "neurotypical", 0.0, {"m": noisy}, {"m": enhanced})
    assert r.deltas["m"] == enhanced - noisy


def test_compute_metrics_selection():
    est, ref = pair(2)
    got = compute_metrics(est, ref, ["si_sdr", "fwssnr"])
    assert list(got) == ["si_sdr", "fwssnr"]
    assert got["si_sdr"] == si_sdr(est, ref)
