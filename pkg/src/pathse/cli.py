"""Command-line entry point: ``pathse <verb> [options]``.

Every verb accepts ``--config``, ``--seed``, ``--jobs``, ``--out``,
``--set key.path=value`` and ``--print-config``. Settings resolve as
defaults < config file < flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import dataio, metrics, training
from .config import RunConfig, derive_seed, dump_config, load_run_config
from .models import Checkpoint, FamilyMismatch

log = logging.getLogger("pathse")


class CliError(Exception):
    """User-facing failure; printed without a traceback, exit status 1."""


# -- helpers ---------------------------------------------------------------------

def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise CliError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides.setdefault("metrics", {})["pesq_jobs"] = args.jobs
    try:
        return load_run_config(args.config, overrides)
    except ValidationError as exc:
        raise CliError(f"invalid configuration:\n{exc}") from exc
    except (OSError, yaml.YAMLError, ValueError) as exc:
        raise CliError(f"cannot read configuration: {exc}") from exc


def _require_out(args) -> Path:
    if args.out is None:
        raise CliError(f"{args.verb} needs --out")
    return Path(args.out)


def _clips(path) -> list:
    try:
        return dataio.load_manifest(path)
    except (dataio.ManifestError, OSError) as exc:
        raise CliError(str(exc)) from exc


def _noises(path) -> list:
    try:
        return dataio.load_noise_manifest(path)
    except (dataio.ManifestError, OSError) as exc:
        raise CliError(str(exc)) from exc


def _checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _write_eval(out: Path, records, name: str = "records.csv") -> None:
    names = training.metric_names(records)
    metrics.write_records_csv(out / name, records, names)
    for by, stem in ((("group",), "aggregate_group"), (("group", "snr_db"), "aggregate")):
        table_csv, text = metrics.aggregate_table(metrics.aggregate_deltas(records, by=by),
                                                  by, names)
        (out / f"{stem}.csv").write_text(table_csv, encoding="utf-8")
        (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    print((out / "aggregate_group.txt").read_text(encoding="utf-8"), end="")


def _split_validation(clips, seed: int, val_speakers: str | None):
    speakers = sorted({c.speaker_id for c in clips})
    if val_speakers:
        val = set(val_speakers.split(","))
        unknown = val - set(speakers)
        if unknown:
            raise CliError(f"unknown validation speakers {sorted(unknown)}")
    else:
        rng = np.random.default_rng(derive_seed(seed, "val-speakers"))
        val = set(rng.choice(speakers, max(1, len(speakers) // 10), replace=False).tolist())
    if len(val) >= len(speakers):
        raise CliError("need at least one training speaker besides the validation speakers")
    return ([c for c in clips if c.speaker_id not in val],
            [c for c in clips if c.speaker_id in val])


# -- verbs -------------------------------------------------------------------------

def cmd_toy_corpus(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    corpus = dataio.generate_toy_corpus(
        out, n_speakers=args.speakers, utterances_per_speaker=args.utterances,
        rng_seed=cfg.seed, sample_rate=args.rate, min_duration=args.min_duration,
        max_duration=args.max_duration, noise_duration=args.noise_duration)
    print(f"wrote {len(corpus.clips)} clips and {len(corpus.noises)} noise files to {out}")
    return 0


def cmd_prepare(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    rate = cfg.data.sample_rate
    failures: list[str] = []
    for kind, path in (("clean", args.manifest), ("noise", args.noise_manifest)):
        if path is None:
            continue
        loader = dataio.load_manifest if kind == "clean" else dataio.load_noise_manifest
        try:
            items = loader(path, check_audio=False)
        except (dataio.ManifestError, OSError) as exc:
            failures.append(f"{path}: {exc}")
            continue
        prepared = []
        for item in items:
            target = out / kind / f"{item.id}.wav"
            try:
                w = dataio.resample(item.load(), rate)
            except Exception as exc:  # noqa: BLE001 - collect per-file failures
                failures.append(f"{item.id} ({item.path}): {type(exc).__name__}: {exc}")
                continue
            dataio.write_wav(target, w)
            prepared.append(type(item)(**{**item.record(), "path": target,
                                          "sample_rate": rate, "duration": w.duration}))
        dataio.save_manifest(out / f"{kind}.jsonl", prepared)
        print(f"{kind}: prepared {len(prepared)} of {len(items)} files at {rate} Hz")
    report = out / "failures.txt"
    if failures:
        report.write_text("\n".join(failures) + "\n", encoding="utf-8")
        print(f"{len(failures)} failure(s), see {report}", file=sys.stderr)
        return 1
    report.unlink(missing_ok=True)
    return 0


def cmd_mix(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    clips, noises = _clips(args.manifest), _noises(args.noise_manifest)
    rates = {c.sample_rate for c in clips} | {n.sample_rate for n in noises}
    if len(rates) != 1:
        raise CliError(f"clean and noise rates differ: {sorted(rates)}; run prepare first")
    specs = []
    for clip in clips:
        n = int(round(clip.duration * clip.sample_rate))
        snrs = cfg.data.test_snrs if args.mode == "test" else [None]
        for snr in snrs:
            seed = derive_seed(cfg.seed, args.mode, clip.id, "" if snr is None else snr)
            try:
                specs.append(dataio.draw_mixture_spec(clip.id, n, noises, seed, snr))
            except dataio.MixtureError as exc:
                raise CliError(str(exc)) from exc
    dataio.save_mixture_specs(out, specs)
    if args.materialize:
        audio = {c.id: c for c in clips}
        bank = {n.id: n for n in noises}
        target = Path(args.materialize)
        for spec in specs:
            noisy, _, _ = dataio.make_mixture(spec, audio, bank)
            dataio.write_wav(target / f"{spec.clean_ref}_{spec.snr_db:+05.1f}dB.wav", noisy)
    print(f"wrote {len(specs)} mixture specs to {out}")
    return 0


def cmd_folds(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    clips = _clips(args.manifest)
    speakers = {c.speaker_id: c.group for c in clips}
    try:
        plan = dataio.plan_folds(speakers, args.k, derive_seed(cfg.seed, "folds"))
    except dataio.FoldPlanError as exc:
        raise CliError(str(exc)) from exc
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(plan.to_json() + "\n", encoding="utf-8")
    print(f"wrote {plan.k}-fold plan over {len(speakers)} speakers to {out}")
    return 0


def _train_like(args, cfg: RunConfig, spec: training.StrategySpec) -> int:
    out = _require_out(args)
    clips, noises = _clips(args.manifest), _noises(args.noise_manifest)
    if args.cv:
        plan = dataio.FoldPlan.from_json(Path(args.cv).read_text(encoding="utf-8"))
        missing = set(plan.labels) - {c.speaker_id for c in clips}
        if missing:
            raise CliError(f"fold plan speakers missing from manifest: {sorted(missing)}")
        run = training.RunDir(out, cfg)
        results = training.run_cross_validation(plan, spec, clips, noises, cfg, out)
        records = [r for res in results for r in res.records]
        if records:
            _write_eval(out, records)
        failed = [r.fold for r in results if r.status != "ok"]
        for r in results:
            if r.checkpoint is not None:
                p = r.checkpoint.provenance
                print(f"fold {r.fold}: best epoch {p.epoch} val loss {p.val_loss:.6g} "
                      f"checkpoint {r.checkpoint.id}")
            else:
                print(f"fold {r.fold}: FAILED {r.error}")
        if failed:
            return 1
        run.finish()
        return 0
    train_clips, val_clips = _split_validation(clips, cfg.seed, args.val_speakers)
    run = training.RunDir(out, cfg)
    ckpt = training.run_strategy(spec, train_clips, noises, cfg, val_clips, run)
    run.finish()
    p = ckpt.provenance
    print(f"best epoch {p.epoch} val loss {p.val_loss:.6g} checkpoint {ckpt.id}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    return _train_like(args, cfg, training.StrategySpec("scratch"))


def cmd_finetune(args, cfg: RunConfig) -> int:
    base = _checkpoint(args.base)
    if base.family != cfg.model.family:
        raise CliError(f"base checkpoint is {base.family}, config asks for {cfg.model.family}")
    return _train_like(args, cfg, training.StrategySpec("finetune", base))


def cmd_personalize(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    base = _checkpoint(args.base)
    if base.family != cfg.model.family:
        raise CliError(f"base checkpoint is {base.family}, config asks for {cfg.model.family}")
    clips, noises = _clips(args.manifest), _noises(args.noise_manifest)
    own = [c for c in clips if c.speaker_id == args.speaker]
    try:
        dataio.plan_personalization_split(own)
    except dataio.ManifestError as exc:
        raise CliError(f"cannot personalize {args.speaker}: {exc}") from exc
    run = training.RunDir(out, cfg)
    result = training.run_personalization(args.speaker, clips, base, noises, cfg, out)
    _write_eval(out, result.records)
    for ck in result.checkpoints:
        p = ck.provenance
        print(f"best epoch {p.epoch} val loss {p.val_loss:.6g} checkpoint {ck.id}")
    run.finish()
    return 0


def cmd_enhance(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    ckpt = _checkpoint(args.checkpoint)
    src = Path(args.input)
    files = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    if not files:
        raise CliError(f"no WAV files in {src}")
    enhancer = training.Enhancer(ckpt, steps=args.steps)
    rate = cfg.data.sample_rate
    for f in files:
        noisy = dataio.read_wav(f)
        if noisy.sample_rate != rate:
            raise CliError(f"{f}: sample rate {noisy.sample_rate} Hz, expected {rate} Hz")
    for f in files:
        noisy = dataio.read_wav(f)
        est = enhancer(noisy, seed=derive_seed(cfg.seed, "enhance", f.name), name=f.name)
        dataio.write_wav(out / f.name, est)
    print(f"enhanced {len(files)} file(s) into {out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    if args.identity == (args.checkpoint is not None):
        raise CliError("give exactly one of --checkpoint or --identity")
    clips, noises = _clips(args.manifest), _noises(args.noise_manifest)
    if not clips:
        raise CliError(f"{args.manifest}: no test clips")
    if args.identity:
        enhancer, labels = training.identity_enhancer, {"family": "identity", "strategy": "none"}
    else:
        enhancer, labels = _checkpoint(args.checkpoint), {}
    if args.strategy:
        labels["strategy"] = args.strategy
    records = training.evaluate(enhancer, clips, noises, cfg.data.test_snrs, cfg.metrics.names,
                                cfg.seed, labels, cfg.metrics.pesq_executable,
                                cfg.metrics.pesq_mode, cfg.metrics.pesq_jobs)
    out.mkdir(parents=True, exist_ok=True)
    _write_eval(out, records)
    return 0


def report_tables(paths) -> tuple[str, str]:
    """Model x group x metric delta table as (csv, text with best values in bold)."""
    records, names = [], None
    for p in paths:
        try:
            recs, ms = metrics.read_records_csv(p)
        except (metrics.MetricError, OSError, KeyError, ValueError) as exc:
            raise CliError(f"{p}: {exc}") from exc
        if names is not None and ms != names:
            raise CliError(f"{p}: metric columns {ms} differ from {names}")
        names = ms
        records += recs
    if not records:
        raise CliError("no records in the given CSVs")
    by = ("family", "strategy", "group")
    rows = metrics.aggregate_deltas(records, by=by)
    table_csv, _ = metrics.aggregate_table(rows, by, names)
    best = {}
    for row in rows:
        for m, s in row.stats.items():
            k = (row.key[2], m)
            best[k] = max(best.get(k, -np.inf), s.mean)
    text = [["model", "strategy", "group", *(f"d{metrics.METRIC_NAMES.get(m, m)}"
                                             for m in names), "n"]]
    for row in rows:
        cells = []
        for m in names:
            s = row.stats.get(m)
            if s is None:
                cells.append("-")
                continue
            cell = f"{s.mean:.2f} ± {s.se:.2f}"
            cells.append(f"**{cell}**" if s.mean == best[(row.key[2], m)] else cell)
        n = max((s.n for s in row.stats.values()), default=0)
        text.append([*map(str, row.key), *cells, str(n)])
    return table_csv, metrics.format_aligned(text)


def cmd_report(args, cfg: RunConfig) -> int:
    table_csv, text = report_tables(args.csv)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(table_csv, encoding="utf-8")
        (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="YAML or JSON run configuration")
    g.add_argument("--seed", type=int, help="root seed (overrides the config)")
    g.add_argument("--jobs", type=int, help="worker limit for evaluation")
    g.add_argument("--out", help="output path")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. train.lr=3e-4")
    g.add_argument("--print-config", action="store_true",
                   help="print the effective configuration and exit")
    g.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(
        prog="pathse", description="Speech enhancement experiments: data preparation, "
        "training, enhancement and evaluation.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = verb("toy-corpus", cmd_toy_corpus, "write a synthetic corpus and noise bank")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utterances", type=int, default=12)
    p.add_argument("--rate", type=int, default=16000)
    p.add_argument("--min-duration", type=float, default=1.0)
    p.add_argument("--max-duration", type=float, default=2.0)
    p.add_argument("--noise-duration", type=float, default=8.0)

    p = verb("prepare", cmd_prepare, "resample a corpus to the canonical rate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise-manifest")

    p = verb("mix", cmd_mix, "draw reproducible mixture specs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise-manifest", required=True)
    p.add_argument("--mode", choices=("train", "test"), default="test")
    p.add_argument("--materialize", metavar="DIR", help="also write the noisy audio")

    p = verb("folds", cmd_folds, "write a speaker-independent fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=10)

    for name, fn, help_ in (("train", cmd_train, "train from scratch"),
                            ("finetune", cmd_finetune, "fine-tune a base checkpoint")):
        p = verb(name, fn, help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--noise-manifest", required=True)
        p.add_argument("--cv", metavar="PLAN", help="run cross-validation over a fold plan")
        p.add_argument("--val-speakers", help="comma-separated validation speakers")
        if name == "finetune":
            p.add_argument("--base", required=True, help="base checkpoint directory")

    p = verb("personalize", cmd_personalize, "adapt a base checkpoint to one speaker")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise-manifest", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--speaker", required=True)

    p = verb("enhance", cmd_enhance, "enhance WAV files with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="WAV file or directory")
    p.add_argument("--steps", type=int, help="sampler steps for generative models")

    p = verb("evaluate", cmd_evaluate, "score a checkpoint on the test SNR grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise-manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true", help="debug: output = noisy input")
    p.add_argument("--strategy", help="strategy label written to the CSV")

    p = verb("report", cmd_report, "compare evaluation CSVs")
    p.add_argument("csv", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(dump_config(cfg), end="")
            return 0
        return args.func(args, cfg)
    except (CliError, FamilyMismatch, dataio.ManifestError, metrics.MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
