"""``hieraudio`` command line: train, eval, infer, synth-data, complexity.

Data goes to stdout, diagnostics to stderr. Any failure exits nonzero.
``HTS_NUM_THREADS`` caps the BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, load_config
from .dsp import WavError, load_wav, log_mel, repeat_clip, resample
from .encoder import ComplexityQuery, complexity, measure_attention_macs
from .head import write_presence_csv
from .manifest import ClipDataset, DatasetError, load_manifest
from .metrics import compute_map, decode_events, event_f1, write_events_csv, write_metrics_csv
from .model import predict
from .synth import make_dataset
from .train import evaluate_clips, train

log = logging.getLogger("hieraudio")


def resolve_config(name: str) -> Config:
    """A config file path, or the name of a shipped one (tiny, default, overfit, localize)."""
    path = Path(name)
    if path.is_file():
        return load_config(path)
    shipped = resources.files("hieraudio") / "configs" / f"{name}.cfg"
    if shipped.is_file():
        with resources.as_file(shipped) as p:
            return load_config(p)
    raise ConfigError(f"config not found: {name}")


def _step_seconds(mc) -> float:
    return mc.hop_size / mc.sample_rate * mc.downsample * mc.P


def cmd_synth(args) -> int:
    cfg = resolve_config(args.config) if args.config else None
    seconds = args.seconds or (cfg.model.clip_seconds if cfg else 10.0)
    rate = cfg.model.sample_rate if cfg else 32000
    manifest = make_dataset(args.out, args.n_clips, args.n_classes, args.seed, seconds, rate)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    if args.seed is not None:
        cfg = Config(cfg.model, type(cfg.train)(**{**vars(cfg.train), "seed": args.seed}))
    dataset = ClipDataset(load_manifest(args.manifest, cfg.model.C), cfg.model)
    val = ClipDataset(load_manifest(args.val_manifest, cfg.model.C), cfg.model) if args.val_manifest else None
    result = train(cfg, dataset, args.out, val)
    out = csv.writer(sys.stdout, lineterminator="\n")
    final_epoch = cfg.train.epochs
    for row in result.metrics:
        if row[0] == final_epoch:
            out.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])
    log.info("wrote %s", Path(args.out) / "final.htsc")
    return 0


def cmd_eval(args) -> int:
    cfg, params = load_checkpoint(args.checkpoint)
    mc = cfg.model
    manifest = load_manifest(args.manifest, mc.C)
    dataset = ClipDataset(manifest, mc)
    ev = evaluate_clips(params, mc, dataset)
    rows = [("final", "eval", "bce", ev["bce"]), ("final", "eval", "accuracy", ev["accuracy"])]
    targets = dataset.targets()
    if targets.any():
        rows.append(("final", "eval", "mAP", compute_map(ev["probs"], targets)[1]))
    events = []
    if args.task == "event":
        gold = manifest.events()
        if not gold:
            raise DatasetError(f"{args.manifest}: event evaluation needs onset/offset annotations")
        threshold = cfg.train.threshold if args.threshold is None else args.threshold
        collar = cfg.train.collar if args.collar is None else args.collar
        for i, clip in enumerate(manifest.clips):
            events += decode_events(ev["presence"][i], threshold, cfg.train.min_duration, _step_seconds(mc),
                                    clip.clip_id)
        f1 = event_f1(events, gold, collar)
        rows += [("final", "eval", f"event_f1_class_{c}", v["f1"]) for c, v in f1["per_class"].items()]
        rows.append(("final", "eval", "event_f1", f1["average"]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", rows)
        if args.task == "event":
            write_events_csv(out / "events.csv", events)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["epoch", "split", "metric", "value"])
    for row in rows:
        writer.writerow([*row[:3], f"{row[3]:.6f}"])
    return 0


def cmd_infer(args) -> int:
    cfg, params = load_checkpoint(args.checkpoint)
    mc = cfg.model
    wave = load_wav(args.wav)
    if wave.sample_rate != mc.sample_rate:
        wave = resample(wave, mc.sample_rate)
    if wave.seconds < mc.clip_seconds:
        reps = int(mc.clip_seconds * mc.sample_rate) // len(wave.samples)
        log.info("clip of %.2f s repeated %d times to reach %.2f s", wave.seconds, reps, mc.clip_seconds)
        wave = repeat_clip(wave, mc.clip_seconds)
    presence, clip = predict(params, mc, log_mel(wave, mc.features()).frames[None])
    top = np.argsort(-clip[0], kind="stable")[:args.top_k]
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["class_id", "prob"])
    for c in top:
        writer.writerow([int(c), f"{clip[0, c]:.6f}"])
    if args.out:
        write_presence_csv(args.out, presence[0])
    return 0


def cmd_complexity(args) -> int:
    q = ComplexityQuery(args.f, args.t, args.D, args.M)
    terms = complexity(q)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["attention", "term", "analytic", "measured"])
    measured = None
    if q.f % q.M == 0 and q.t % q.M == 0:
        measured = measure_attention_macs(q, heads=args.heads)
    for kind, key in (("global", "ga_terms"), ("windowed", "wa_terms")):
        for i, term in enumerate(("first", "second")):
            got = measured[kind][term] if measured else ""
            writer.writerow([kind, term, terms[key][i], got])
    writer.writerow(["ratio", "second", terms["ratio"], ""])
    if measured is None:
        log.warning("M does not divide f and t; measured counts skipped")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hieraudio", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write synthetic tone-burst clips and a strong-label manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=64)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seconds", type=float, default=None, help="clip length (default: the config's)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes per-epoch, averaged checkpoints and metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-manifest", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clip metrics, or event F1 with decoded events")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("clip", "event"), default="clip")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--collar", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="clip probabilities and presence map for one WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("wav")
    p.add_argument("--out", default=None, help="presence-map CSV path")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("complexity", help="analytic and measured attention cost terms")
    p.add_argument("--f", type=int, default=64)
    p.add_argument("--t", type=int, default=64)
    p.add_argument("--D", type=int, default=96)
    p.add_argument("--M", type=int, default=8)
    p.add_argument("--heads", type=int, default=1)
    p.set_defaults(func=cmd_complexity)
    return parser


def _thread_limit():
    raw = os.environ.get("HTS_NUM_THREADS")
    if raw is None:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"HTS_NUM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"HTS_NUM_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s: %(message)s", force=True)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, WavError, ValueError, OSError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
