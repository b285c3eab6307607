"""Command-line entry point: ``framealign <subcommand> [options]``.

Every subcommand accepts ``--seed``, ``--config`` (YAML/JSON) and ``--out``.
Values resolve as command-line flag > config file > built-in default; the
config file may hold top-level sections ``audio``, ``train``, ``encoder``,
``eval`` and ``captions``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

from . import __version__

logger = logging.getLogger("framealign")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    import yaml

    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping")
    return data


def _pick(args, config: dict, section: str, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(section, {}).get(key, default)


def _section(args, config: dict, section: str, keys: Sequence[str]) -> dict:
    out = dict(config.get(section, {}))
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _audio_config(args, config):
    from .audio import AudioConfig

    return AudioConfig.from_dict(_section(args, config, "audio", ["hop", "mel_bins"]))


def _load_clips(path: str, any_duration: bool = False):
    from .dataset import PROCESSED_DURATION, load_manifest

    return load_manifest(path, None if any_duration else PROCESSED_DURATION)


def _select(clips, split_path: Optional[str], part: str):
    if not split_path:
        return list(clips)
    from .dataset import DatasetSplit

    split = DatasetSplit.from_dict(json.loads(Path(split_path).read_text(encoding="utf-8")))
    wanted = set(split.train_ids if part == "train" else split.test_ids)
    return [c for c in clips if c.clip_id in wanted]


def _mels(clips, manifest: str, audio_cfg):
    from .audio import read_wav, resample
    from .pipeline import compute_mels

    root = Path(manifest).parent

    def load(i):
        clip = clips[i]
        if not clip.audio_path:
            raise ValueError(f"clip {clip.clip_id!r} has no audio_path")
        w = read_wav(root / clip.audio_path)
        return w if w.sample_rate == audio_cfg.target_rate else resample(w, audio_cfg.target_rate)

    return compute_mels(clips, load, audio_cfg)


def _out_dir(args) -> Path:
    if not args.out:
        raise ValueError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, config) -> int:
    from .synth import SynthSpec, synth_generate, write_corpus

    sec = _section(args, config, "synth", ["classes", "clips_per_class", "noise_floor_db",
                                           "sample_rate"])
    for key in ("clip_duration", "event_duration", "events_per_clip"):
        if key in sec:
            sec[key] = tuple(sec[key])
    spec = SynthSpec(seed=args.seed if args.seed is not None else config.get("seed", 7), **sec)
    out = write_corpus(synth_generate(spec), _out_dir(args))
    print(f"wrote {spec.classes * spec.clips_per_class} clips to {out}")
    return EXIT_OK


def cmd_preprocess(args, config) -> int:
    from .audio import AudioConfig, preprocess, read_wav, write_wav

    cfg = AudioConfig.from_dict(_section(args, config, "audio", ["threshold_db"]))
    out = _out_dir(args)
    src = Path(args.input)
    files = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    seed = args.seed or 0
    report = {"kept": [], "discarded": [], "config": cfg.to_dict()}
    for i, path in enumerate(files):
        w = preprocess(read_wav(path), cfg, rng_seed=seed + i)
        if w is None:
            report["discarded"].append(path.name)
            continue
        write_wav(out / path.name, w)
        report["kept"].append({"file": path.name, "duration_s": round(w.duration, 6)})
    (out / "preprocess_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"kept {len(report['kept'])}, discarded {len(report['discarded'])}")
    return EXIT_OK


def cmd_stats(args, config) -> int:
    from .dataset import dataset_stats

    clips = _load_clips(args.manifest, args.any_duration)
    report = dataset_stats(clips, remove_stop_words=args.remove_stop_words)
    print(report.to_table())
    if args.out:
        out = _out_dir(args)
        (out / "stats.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "stats.txt").write_text(report.to_table() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_split(args, config) -> int:
    from .dataset import stratified_split

    clips = _load_clips(args.manifest, args.any_duration)
    fraction = _pick(args, config, "split", "test_fraction", 0.2)
    split = stratified_split(clips, fraction, args.seed or 0)
    for w in split.warnings:
        logger.warning(w)
    out = _out_dir(args)
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2) + "\n")
    print(f"train {len(split.train_ids)}, test {len(split.test_ids)}")
    return EXIT_OK


def cmd_train(args, config) -> int:
    from .dataset import stratified_split
    from .encoders import EncoderConfig
    from .pipeline import training_examples
    from .training import TEMPERATURE_GRID, TrainConfig, sweep_temperature, train

    sec = _section(args, config, "train", ["batch_size", "epochs", "peak_lr", "final_lr",
                                           "warmup_epochs", "tau", "loss_kind"])
    sec["seed"] = args.seed if args.seed is not None else sec.get("seed", 0)
    cfg = TrainConfig.from_dict(sec)
    audio_cfg = _audio_config(args, config)
    enc = _section(args, config, "encoder", ["dim", "hidden", "mixer_window"])
    enc_cfg = EncoderConfig(mel_bins=audio_cfg.mel_bins, hop=audio_cfg.hop, seed=cfg.seed, **enc)

    clips = _select(_load_clips(args.manifest, args.any_duration), args.split, "train")
    val_fraction = _pick(args, config, "data", "val_fraction", 0.1)
    val_clips = []
    if val_fraction > 0:
        part = stratified_split(clips, val_fraction, cfg.seed)
        held = set(part.test_ids)
        val_clips = [c for c in clips if c.clip_id in held]
        clips = [c for c in clips if c.clip_id not in held]
    mels = _mels(clips + val_clips, args.manifest, audio_cfg)
    train_ex = training_examples(clips, mels)
    val_ex = training_examples(val_clips, mels) if len(val_clips) >= 2 else None
    out = _out_dir(args)
    if args.sweep_tau:
        results = sweep_temperature(train_ex, cfg, TEMPERATURE_GRID, encoder_config=enc_cfg,
                                    val_examples=val_ex, out_dir=out)
        summary = {f"{tau:g}": r.best_loss for tau, r in results.items()}
        (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    result = train(train_ex, cfg, encoder_config=enc_cfg, val_examples=val_ex, out_dir=out)
    print(f"best epoch {result.best_epoch} (loss {result.best_loss:.6f}); "
          f"checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args, config) -> int:
    from .encoders import load_checkpoint
    from .evaluation import default_thresholds, read_class_descriptions, read_events, write_report
    from .pipeline import detection_report

    params, meta = load_checkpoint(args.checkpoint)
    audio_cfg = _audio_config(args, config)
    clips = _select(_load_clips(args.manifest, args.any_duration), args.split, "test")
    mels = _mels(clips, args.manifest, audio_cfg)
    truth = read_events(args.ground_truth)
    descriptions = read_class_descriptions(args.classes)
    n_thresholds = _pick(args, config, "eval", "thresholds", 50)
    report = detection_report(
        params, mels, truth, descriptions, {c.clip_id: c.duration for c in clips},
        thresholds=default_thresholds(n_thresholds),
        max_fpr=_pick(args, config, "eval", "max_fpr", 0.1),
        segment=_pick(args, config, "eval", "segment", 1.0),
        dtc=_pick(args, config, "eval", "dtc", 0.7), gtc=_pick(args, config, "eval", "gtc", 0.7),
        max_efpr=_pick(args, config, "eval", "max_efpr", 100.0))
    report["checkpoint"] = {"path": str(args.checkpoint), **meta}
    out = _out_dir(args)
    write_report(out / "detection_report.json", report)
    print(f"pAUROC {report['pauroc']['macro']:.4f}  PSDS1 {report['psds1']:.4f}")
    return EXIT_OK


def cmd_retrieve(args, config) -> int:
    from .encoders import load_checkpoint
    from .evaluation import write_report
    from .pipeline import retrieval_report, training_examples

    params, _ = load_checkpoint(args.checkpoint)
    audio_cfg = _audio_config(args, config)
    clips = _select(_load_clips(args.manifest, args.any_duration), args.split, "test")
    report = retrieval_report(params, training_examples(clips, _mels(clips, args.manifest,
                                                                      audio_cfg)))
    write_report(_out_dir(args) / "retrieval_report.json", report)
    print("  ".join(f"{k} {v:.4f}" for k, v in report.items()))
    return EXIT_OK


def cmd_clean_captions(args, config) -> int:
    from .captions import (HTTPCompletionClient, MockCompletionClient, RateLimiter,
                           clean_manifest, load_template)
    from .dataset import save_manifest

    sec = _section(args, config, "captions", ["endpoint", "model", "mock_responses",
                                              "parallelism", "rate"])
    limiter = RateLimiter(sec["rate"]) if sec.get("rate") else None
    if sec.get("mock_responses"):
        client = MockCompletionClient.from_file(sec["mock_responses"])
        client.rate_limiter = limiter
    elif sec.get("endpoint"):
        if not sec.get("model"):
            raise ValueError("--model is required with --endpoint")
        client = HTTPCompletionClient(sec["endpoint"], sec["model"], rate_limiter=limiter)
    else:
        raise ValueError("either --mock-responses or --endpoint is required")
    clips = _load_clips(args.manifest, args.any_duration)
    report = clean_manifest(
        clips, client, load_template(args.clean_prompt or "clean_caption"),
        load_template(args.summary_prompt or "summarize_weak") if args.summarize else None,
        parallelism=sec.get("parallelism", 1))
    out = _out_dir(args)
    save_manifest(report.clips, out / "manifest.cleaned.jsonl")
    (out / "cleaning_flags.json").write_text(json.dumps(report.flagged, indent=2) + "\n")
    print(f"cleaned {len(clips)} clips, {len(report.flagged)} flagged")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framealign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--config", help="YAML/JSON config file (flags take precedence)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    manifest = argparse.ArgumentParser(add_help=False)
    manifest.add_argument("--manifest", required=True, help="JSON-lines clip manifest")
    manifest.add_argument("--any-duration", action="store_true",
                          help="skip the 15-30 s processed-clip duration check")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--classes", type=int)
    p.add_argument("--clips-per-class", type=int)
    p.add_argument("--noise-floor-db", type=float)
    p.add_argument("--sample-rate", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="normalize/trim/resample/segment WAVs")
    p.add_argument("--input", required=True, help="WAV file or directory of WAVs")
    p.add_argument("--threshold-db", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("stats", parents=[common, manifest], help="dataset statistics")
    p.add_argument("--remove-stop-words", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", parents=[common, manifest], help="stratified train/test split")
    p.add_argument("--test-fraction", type=float)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common, manifest], help="train the toy dual encoder")
    p.add_argument("--split", help="split.json; trains on its train ids")
    p.add_argument("--loss", dest="loss_kind", choices=["global", "frame_wise"])
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--final-lr", type=float)
    p.add_argument("--warmup-epochs", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--mixer-window", type=int)
    p.add_argument("--hop", type=float)
    p.add_argument("--mel-bins", type=int)
    p.add_argument("--sweep-tau", action="store_true",
                   help="train once per temperature in 0.01 0.05 0.1 0.2 0.3 0.4")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, manifest], help="text-based SED metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split.json; evaluates its test ids")
    p.add_argument("--ground-truth", required=True, help="TSV clip_id, onset, offset, class")
    p.add_argument("--classes", required=True, help="TSV class_id, description")
    p.add_argument("--thresholds", type=int, help="number of PSDS thresholds over [-1, 1]")
    p.add_argument("--max-fpr", type=float)
    p.add_argument("--segment", type=float)
    p.add_argument("--dtc", type=float)
    p.add_argument("--gtc", type=float)
    p.add_argument("--max-efpr", type=float)
    p.add_argument("--hop", type=float)
    p.add_argument("--mel-bins", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve", parents=[common, manifest], help="text-to-audio retrieval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split.json; evaluates its test ids")
    p.add_argument("--hop", type=float)
    p.add_argument("--mel-bins", type=int)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("clean-captions", parents=[common, manifest],
                       help="LLM caption cleaning / weak caption generation")
    p.add_argument("--mock-responses", help="JSON response table (offline, deterministic)")
    p.add_argument("--endpoint", help="chat-completion URL")
    p.add_argument("--model")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--rate", type=float, help="max requests per second")
    p.add_argument("--summarize", action="store_true", help="regenerate weak captions")
    p.add_argument("--clean-prompt", help="prompt template name or JSON file")
    p.add_argument("--summary-prompt", help="prompt template name or JSON file")
    p.set_defaults(func=cmd_clean_captions)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args.config)
        threads = args.threads if args.threads is not None else config.get("threads")
        if threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=threads)
        else:
            limit = nullcontext()
        with limit:
            return args.func(args, config)
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
