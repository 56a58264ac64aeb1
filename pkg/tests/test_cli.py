import json
import logging
from pathlib import Path

import numpy as np
import pytest
import yaml

from pathse.cli import main, report_tables
from pathse.dataio import load_manifest, load_mixture_specs, read_wav, write_wav
from pathse.signal_core import Waveform

TINY_SB = ["--set", "model.family=SB", "--set", "model.nf=4", "--set", "model.ch_mult=[1, 2]",
           "--set", "train.max_epochs=2", "--set", "train.patience=1",
           "--set", "train.steps_per_epoch=1", "--set", "train.batch_size=2",
           "--set", "train.crop_seconds=0.4"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["toy-corpus", "--out", str(root / "toy"), "--speakers", "4",
                 "--utterances", "3", "--min-duration", "0.5", "--max-duration", "0.7",
                 "--noise-duration", "2", "-q"]) == 0
    return root


def test_print_config_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 3, "train": {"lr": 0.01}}))
    assert main(["mix", "--manifest", "x", "--noise-manifest", "y", "--config", str(cfg),
                 "--seed", "9", "--set", "train.lr=0.5", "--print-config"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["seed"] == 9 and doc["train"]["lr"] == 0.5


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"bogus": 1}}))
    assert main(["folds", "--manifest", "x", "--config", str(cfg), "--print-config"]) == 1
    assert "bogus" in capsys.readouterr().err
    assert main(["folds", "--manifest", "x", "--set", "nope=1", "--print-config"]) == 1


def _corpus48k(root, n=3, corrupt=False):
    rows = []
    for i in range(n):
        path = root / f"c{i}.wav"
        t = np.arange(48000) / 48000
        write_wav(path, Waveform(0.3 * np.sin(2 * np.pi * (200 + 50 * i) * t), 48000))
        rows.append({"id": f"c{i}", "path": path.name, "speaker_id": "s1",
                     "group": "neurotypical", "utterance_type": "sentence",
                     "sample_rate": 48000, "duration": 1.0})
    if corrupt:
        (root / "c1.wav").write_bytes(b"RIFF garbage")
    m = root / "m.jsonl"
    m.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return m


def test_prepare_resamples_and_is_idempotent(tmp_path):
    m = _corpus48k(tmp_path)
    out = tmp_path / "prep"
    assert main(["prepare", "--manifest", str(m), "--out", str(out), "-q"]) == 0
    first = {p.name: p.read_bytes() for p in (out / "clean").iterdir()}
    clips = load_manifest(out / "clean.jsonl")
    assert all(c.sample_rate == 16000 and read_wav(c.path).sample_rate == 16000 for c in clips)
    assert all(len(read_wav(c.path)) == 16000 for c in clips)
    assert main(["prepare", "--manifest", str(m), "--out", str(out), "-q"]) == 0
    assert first == {p.name: p.read_bytes() for p in (out / "clean").iterdir()}


def test_prepare_reports_corrupt_files(tmp_path):
    m = _corpus48k(tmp_path, corrupt=True)
    out = tmp_path / "prep"
    assert main(["prepare", "--manifest", str(m), "--out", str(out), "-q"]) == 1
    report = (out / "failures.txt").read_text()
    assert "c1" in report and "c0" not in report
    assert [c.id for c in load_manifest(out / "clean.jsonl")] == ["c0", "c2"]


def test_mix_specs_are_reproducible(toy, tmp_path):
    args = ["mix", "--manifest", str(toy / "toy/clean.jsonl"),
            "--noise-manifest", str(toy / "toy/noise.jsonl"), "-q"]
    assert main([*args, "--out", str(tmp_path / "a.jsonl")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.jsonl"),
                 "--materialize", str(tmp_path / "wav")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    specs = load_mixture_specs(tmp_path / "a.jsonl")
    assert len(specs) == 12 * 5
    assert sorted({s.snr_db for s in specs}) == [-5, 0, 5, 10, 15]
    assert len(list((tmp_path / "wav").glob("*.wav"))) == 60
    assert main([*args, "--mode", "train", "--out", str(tmp_path / "t.jsonl")]) == 0
    train = load_mixture_specs(tmp_path / "t.jsonl")
    assert len(train) == 12 and all(-6 <= s.snr_db <= 14 for s in train)


def test_train_enhance_evaluate_report(toy, tmp_path, capsys, caplog):
    clean, noise = str(toy / "toy/clean.jsonl"), str(toy / "toy/noise.jsonl")
    run = tmp_path / "run"
    assert main(["train", "--manifest", clean, "--noise-manifest", noise, "--out", str(run),
                 "--val-speakers", "spk003", "-q", *TINY_SB]) == 0
    assert (run / "checkpoint" / "weights.pt").exists()
    assert not (run / ".incomplete").exists()

    noisy = read_wav(load_manifest(clean)[0].path)
    (tmp_path / "in").mkdir()
    write_wav(tmp_path / "in" / "x.wav", noisy)
    with caplog.at_level(logging.INFO, logger="pathse"):
        for out in ("e1", "e2"):
            assert main(["enhance", "--checkpoint", str(run / "checkpoint"), "--input",
                         str(tmp_path / "in"), "--out", str(tmp_path / out)]) == 0
    assert "x.wav: 50 network evaluations" in caplog.text
    a, b = (read_wav(tmp_path / d / "x.wav") for d in ("e1", "e2"))
    assert len(a) == len(noisy) and np.array_equal(a.samples, b.samples)

    ev = ["evaluate", "--manifest", clean, "--noise-manifest", noise, "-q",
          "--set", "metrics.names=[si_sdr, fwssnr]", "--set", "data.test_snrs=[0]"]
    assert main([*ev, "--identity", "--out", str(tmp_path / "id")]) == 0
    assert main([*ev, "--checkpoint", str(run / "checkpoint"), "--out",
                 str(tmp_path / "sb")]) == 0
    assert main([*ev, "--out", str(tmp_path / "bad")]) == 1
    capsys.readouterr()
    assert main(["report", str(tmp_path / "id/records.csv"), str(tmp_path / "sb/records.csv"),
                 "--out", str(tmp_path / "rep")]) == 0
    text = capsys.readouterr().out
    assert "identity" in text and "SB" in text and "**" in text
    assert (tmp_path / "rep" / "report.csv").exists()


def test_evaluate_empty_manifest(toy, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["evaluate", "--manifest", str(empty), "--noise-manifest",
                 str(toy / "toy/noise.jsonl"), "--identity", "--out", str(tmp_path / "o")]) == 1
    assert "no test clips" in capsys.readouterr().err


def test_finetune_requires_base(toy, tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["finetune", "--manifest", "x", "--noise-manifest", "y", "--out", str(tmp_path)])
    assert "--base" in capsys.readouterr().err


def _identity_csv(toy, out, extra=()):
    assert main(["evaluate", "--manifest", str(toy / "toy/clean.jsonl"), "--noise-manifest",
                 str(toy / "toy/noise.jsonl"), "--identity", "--out", str(out), "-q",
                 "--set", "data.test_snrs=[0]", *extra]) == 0
    return out / "records.csv"


def test_report_single_csv_and_schema_mismatch(toy, tmp_path):
    a = _identity_csv(toy, tmp_path / "a", ["--set", "metrics.names=[si_sdr]"])
    _, text = report_tables([a])
    assert "**0.00 ± 0.00**" in text
    b = _identity_csv(toy, tmp_path / "b", ["--set", "metrics.names=[si_sdr, fwssnr]"])
    with pytest.raises(Exception, match="differ"):
        report_tables([a, b])
    assert main(["report", str(a), str(b)]) == 1


@pytest.mark.parametrize("name", ["mm_paper", "cr_paper", "sgmse_paper", "sb_paper", "toy"])
def test_shipped_configs_load(name, capsys):
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.yaml"
    assert main(["folds", "--manifest", "x", "--config", str(path), "--print-config"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["model"]["family"]
