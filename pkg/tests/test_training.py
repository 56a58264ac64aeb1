import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pathse import training
from pathse.config import ModelConfig, RunConfig, TrainConfig
from pathse.dataio import generate_toy_corpus, plan_folds
from pathse.diffusion import SamplerDivergence
from pathse.metrics import aggregate_deltas
from pathse.models import FamilyMismatch, build_model
from pathse.signal_core import Waveform
from pathse.training import (ClipSet, EarlyStopping, RunDir, StrategySpec, TrainingDivergence,
                             evaluate, identity_enhancer, oracle_enhancer, run_cross_validation,
                             run_personalization, run_strategy, train)

SNRS = (-5.0, 0.0, 5.0, 10.0, 15.0)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_toy_corpus(tmp_path_factory.mktemp("toy"), n_speakers=6,
                               utterances_per_speaker=4, min_duration=0.5, max_duration=0.8,
                               noise_duration=2.0)


def small_cfg(family="MM", **train_kw):
    kw = dict(batch_size=2, max_epochs=3, patience=2, lr=1e-3, crop_seconds=0.4,
              steps_per_epoch=2)
    kw.update(train_kw)
    model = (ModelConfig(family=family, hidden=8, layers=1) if family == "MM" else
             ModelConfig(family=family, nf=4, ch_mult=(1, 2), num_res_blocks=1))
    return RunConfig(seed=0, model=model, train=TrainConfig(**kw),
                     metrics={"names": ("si_sdr",)})


def sets(corpus):
    clips = corpus.clips
    return ClipSet(clips[:8], corpus.noises), ClipSet(clips[8:12], corpus.noises)


def weights_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.values(), b.values()))


# -- early stopping -----------------------------------------------------------------

def test_early_stopping_example():
    stopper = EarlyStopping(20)
    losses = iter([5.0, 4.0] + [4.0] * 100)
    while not stopper.should_stop:
        stopper.step(next(losses))
    assert stopper.epoch == 22 and stopper.best_epoch == 2


def test_early_stopping_rejects_bad_patience():
    with pytest.raises(ValueError):
        EarlyStopping(0)


@settings(max_examples=100, deadline=None)
@given(losses=st.lists(st.floats(0, 10), min_size=1, max_size=60),
       patience=st.integers(1, 10))
def test_early_stopping_never_overruns(losses, patience):
    stopper = EarlyStopping(patience)
    for loss in losses:
        if stopper.should_stop:
            break
        stopper.step(loss)
    assert stopper.epoch <= stopper.best_epoch + patience
    assert stopper.best == min(losses[:stopper.epoch])


# -- training ---------------------------------------------------------------------

def test_training_is_deterministic(corpus):
    cfg = small_cfg()
    tr, va = sets(corpus)
    runs = [train(build_model(cfg.model, seed=1), tr, va, cfg.train, cfg.model, seed=5)
            for _ in range(2)]
    assert weights_equal(runs[0].weights, runs[1].weights)
    assert runs[0].id == runs[1].id


def test_resume_matches_uninterrupted(corpus, tmp_path, monkeypatch):
    cfg = small_cfg(max_epochs=4, patience=3)
    tr, va = sets(corpus)
    full = train(build_model(cfg.model, seed=1), tr, va, cfg.train, cfg.model, seed=5)

    real, calls = training.validation_loss, {"n": 0}

    def crash_on_third(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise KeyboardInterrupt
        return real(*args, **kw)

    monkeypatch.setattr(training, "validation_loss", crash_on_third)
    rd = RunDir(tmp_path / "run", cfg)
    with pytest.raises(KeyboardInterrupt):
        train(build_model(cfg.model, seed=1), tr, va, cfg.train, cfg.model, seed=5, run_dir=rd)
    assert (rd.path / training.INCOMPLETE_MARKER).exists()
    monkeypatch.setattr(training, "validation_loss", real)
    resumed = train(build_model(cfg.model, seed=99), tr, va, cfg.train, cfg.model, seed=5,
                    run_dir=rd)
    assert weights_equal(full.weights, resumed.weights)
    epochs = [json.loads(line)["epoch"] for line in rd.metrics_log.read_text().splitlines()]
    assert epochs == list(range(1, len(epochs) + 1))


def test_divergence_keeps_last_good(corpus, tmp_path, monkeypatch):
    cfg = small_cfg()
    tr, va = sets(corpus)
    real = training.family_loss
    state = {"epoch": 0}

    def poisoned(model, mcfg, clean, noisy, gen):
        loss = real(model, mcfg, clean, noisy, gen)
        return loss * math.nan if model.training and state["epoch"] >= 2 else loss

    real_examples = training.train_examples

    def tracking(data, tcfg, seed, epoch):
        state["epoch"] = epoch
        return real_examples(data, tcfg, seed, epoch)

    monkeypatch.setattr(training, "family_loss", poisoned)
    monkeypatch.setattr(training, "train_examples", tracking)
    rd = RunDir(tmp_path / "run")
    with pytest.raises(TrainingDivergence) as info:
        train(build_model(cfg.model, seed=1), tr, va, cfg.train, cfg.model, run_dir=rd)
    err = info.value
    assert err.last_good is not None and err.last_good.provenance.epoch == 1
    assert {"epoch", "step", "lr", "batch"} <= set(err.diagnostic)
    assert (rd.path / "last_good" / "weights.pt").exists()


# -- strategies ---------------------------------------------------------------------

def test_strategy_spec_validation():
    with pytest.raises(ValueError):
        StrategySpec("finetune")
    with pytest.raises(ValueError):
        StrategySpec("personalize", "x", "spk", None)
    with pytest.raises(ValueError):
        StrategySpec("scratch", "x")
    with pytest.raises(ValueError):
        StrategySpec("transfer")


def test_strategy_provenance_chain(corpus):
    cfg = small_cfg(max_epochs=2, patience=1)
    clips = corpus.clips
    scratch = run_strategy(StrategySpec("scratch"), clips[:8], corpus.noises, cfg, clips[8:12])
    assert scratch.provenance.strategy == "scratch" and scratch.provenance.lineage == []
    assert scratch.provenance.trained_on == "spk000,spk001"
    ft = run_strategy(StrategySpec("finetune", scratch), clips[12:20], corpus.noises, cfg,
                      clips[20:24])
    assert ft.provenance.base_checkpoint == scratch.id
    assert ft.provenance.lineage == [{"id": scratch.id, "strategy": "scratch"}]
    pers = run_strategy(StrategySpec("personalize", ft, "spk005", "A"), clips, corpus.noises,
                        cfg)
    assert [e["id"] for e in pers.provenance.lineage] == [scratch.id, ft.id]
    assert pers.provenance.trained_on == "spk005"
    with pytest.raises(FamilyMismatch):
        run_strategy(StrategySpec("finetune", scratch), clips[:8], corpus.noises,
                     small_cfg("CR"), clips[8:12])


def test_personalization_pools_both_splits(corpus, tmp_path):
    cfg = small_cfg(max_epochs=2, patience=1)
    base = run_strategy(StrategySpec("scratch"), corpus.clips[:8], corpus.noises, cfg,
                        corpus.clips[8:12])
    res = run_personalization("spk003", corpus.clips, base, corpus.noises, cfg, tmp_path)
    own = [c for c in corpus.clips if c.speaker_id == "spk003"]
    assert len(res.records) == len(own) * len(SNRS)
    assert {r.labels["split"] for r in res.records} == {"A", "B"}
    tested = {(r.labels["split"], r.utt_id) for r in res.records}
    assert len({u for _, u in tested}) == len(own)
    for ck in res.checkpoints:
        assert ck.provenance.strategy == "personalize"
        assert ck.provenance.base_checkpoint == base.id
    assert not any(p.name == training.INCOMPLETE_MARKER for p in tmp_path.rglob("*"))


# -- evaluation ---------------------------------------------------------------------

def test_identity_and_oracle_enhancers(corpus):
    clips = corpus.clips[:10]
    ident = evaluate(identity_enhancer, clips, corpus.noises, SNRS, ["si_sdr", "fwssnr"])
    assert len(ident) == 50
    assert all(d == 0.0 for r in ident for d in r.deltas.values())
    oracle = evaluate(oracle_enhancer, clips, corpus.noises, SNRS, ["si_sdr"])
    for r in oracle:
        assert r.enhanced["si_sdr"] == 100.0
        assert r.deltas["si_sdr"] == 100.0 - r.noisy["si_sdr"] > 0
    again = evaluate(identity_enhancer, clips, corpus.noises, SNRS, ["si_sdr"])
    assert [r.noisy for r in again] == [{"si_sdr": r.noisy["si_sdr"]} for r in ident]


def test_diverged_enhancement_is_flagged(corpus):
    def broken(noisy, **_):
        raise SamplerDivergence("non-finite state at step 3")

    recs = evaluate(broken, corpus.clips[:2], corpus.noises, SNRS, ["si_sdr"])
    assert all(r.flagged and math.isnan(r.enhanced["si_sdr"]) for r in recs)
    good = evaluate(identity_enhancer, corpus.clips[2:3], corpus.noises, [0.0], ["si_sdr"])
    [row] = aggregate_deltas(recs + good)
    assert row.excluded == len(recs) and row.stats["si_sdr"].n == 1


def test_evaluate_checks_inputs(corpus):
    with pytest.raises(Exception, match="no test clips"):
        evaluate(identity_enhancer, [], corpus.noises, SNRS, ["si_sdr"])

    def shorter(noisy, **_):
        return Waveform(noisy.samples[:-1], noisy.sample_rate)

    with pytest.raises(ValueError, match="length"):
        evaluate(shorter, corpus.clips[:1], corpus.noises, [0.0], ["si_sdr"])


def test_evaluate_drops_pesq_without_evaluator(corpus, monkeypatch):
    monkeypatch.delenv("PATHSE_PESQ", raising=False)
    recs = evaluate(identity_enhancer, corpus.clips[:1], corpus.noises, [0.0],
                    ["si_sdr", "pesq"])
    assert list(recs[0].noisy) == ["si_sdr"]


def test_checkpoint_enhancer_labels_and_steps(corpus):
    cfg = small_cfg("SB", max_epochs=2, patience=1)
    ck = run_strategy(StrategySpec("scratch"), corpus.clips[:8], corpus.noises, cfg,
                      corpus.clips[8:12])
    enh = training.Enhancer(ck, steps=4)
    noisy = corpus.clips[0].load()
    out = enh(noisy, seed=3)
    assert len(out) == len(noisy) and enh.last_nfe == 4
    assert np.array_equal(out.samples, enh(noisy, seed=3).samples)
    recs = evaluate(ck, corpus.clips[:1], corpus.noises, [0.0], ["si_sdr"])
    assert recs[0].labels == {"family": "SB", "strategy": "scratch"}


# -- cross-validation ---------------------------------------------------------------

def test_cross_validation_is_speaker_independent(corpus, tmp_path, monkeypatch):
    cfg = small_cfg(max_epochs=2, patience=1)
    speakers = {c.speaker_id: c.group for c in corpus.clips}
    plan = plan_folds(speakers, k=3, rng_seed=0)
    results = run_cross_validation(plan, StrategySpec("scratch"), corpus.clips, corpus.noises,
                                   cfg, tmp_path / "cv")
    assert [r.status for r in results] == ["ok"] * 3
    for fold, res in zip(plan.folds, results):
        assert {r.speaker_id for r in res.records} == set(fold.test)
        assert not set(res.checkpoint.provenance.trained_on.split(",")) & set(fold.test)
    summary = json.loads((tmp_path / "cv" / "summary.json").read_text())
    assert [s["status"] for s in summary] == ["ok"] * 3

    real = training.run_strategy

    def fail_first(spec, clips, *a, tag="", **kw):
        if tag == "fold0":
            raise RuntimeError("boom")
        return real(spec, clips, *a, tag=tag, **kw)

    monkeypatch.setattr(training, "run_strategy", fail_first)
    results = run_cross_validation(plan, StrategySpec("scratch"), corpus.clips, corpus.noises,
                                   cfg, tmp_path / "cv2")
    assert [r.status for r in results] == ["failed", "ok", "ok"]
    assert "boom" in results[0].error
    summary = json.loads((tmp_path / "cv2" / "summary.json").read_text())
    assert summary[0]["status"] == "failed" and summary[1]["records"] > 0
    assert (tmp_path / "cv2" / "fold00" / training.INCOMPLETE_MARKER).exists()
    assert not (tmp_path / "cv2" / "fold01" / training.INCOMPLETE_MARKER).exists()
