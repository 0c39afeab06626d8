"""Command line front end: corpus synthesis, augmentation preview, training,
metric evaluation, and boundary/attention dumps.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from .audio import load_wav, save_wav
from .augment import AugmentConfig, augment_utterance
from .encoder import ModelConfig, encode_frames
from .errors import DataError, NumericError, SspoolError
from .evaluation import (
    ProbeConfig,
    abx_error,
    aggregate_segmentation_scores,
    parse_phn,
    speaker_probe,
)
from .pooling import (
    AttentionConfig,
    boundary_times,
    extract_hard_boundaries,
    log_kernels,
    n_heads,
    predict_boundaries,
)
from .synth import (
    CorpusConfig,
    generate_abx_triples,
    generate_corpus,
    load_manifest,
    read_labels,
)
from .training import TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


@dataclass
class CommandResult:
    exit_code: int
    outputs: list


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_text_atomic(path, text):
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _resolve_threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SSPOOL_THREADS", "").strip()
    if env:
        try:
            value = int(env)
        except ValueError:
            raise DataError(f"SSPOOL_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise DataError(f"SSPOOL_THREADS must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


def _load_model(ckpt):
    model, step, train_config, _ = load_checkpoint(ckpt)
    return model, step, train_config


# ---- subcommands ---------------------------------------------------------------


def cmd_synth(args):
    cfg = CorpusConfig(
        minutes=args.minutes,
        n_speakers=args.speakers,
        n_units=args.units,
        seed=args.seed,
    )
    manifest = generate_corpus(cfg, args.out)
    _print_json({"manifest": manifest, "minutes": args.minutes,
                 "speakers": args.speakers, "units": args.units, "seed": args.seed})
    return [manifest]


def cmd_augment(args):
    buf = load_wav(getattr(args, "in"))
    cfg = AugmentConfig(
        n_segments=args.segments,
        stretch_min=args.stretch_min,
        stretch_max=args.stretch_max,
        pitch_semitones=args.pitch_semitones,
    )
    aug, amap = augment_utterance(buf, cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    wav_path = os.path.join(args.out, "augmented.wav")
    csv_path = os.path.join(args.out, "alignment.csv")
    save_wav(wav_path, aug)
    rows = ["original_seconds,augmented_seconds"]
    rows += [f"{a:.6f},{b:.6f}" for a, b in amap.knots]
    _write_text_atomic(csv_path, "\n".join(rows) + "\n")
    _print_json({
        "wav": wav_path,
        "alignment": csv_path,
        "original_seconds": amap.original_duration,
        "augmented_seconds": amap.augmented_duration,
        "seed": args.seed,
    })
    return [wav_path, csv_path]


def _load_train_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise DataError(f"{path}: config must be a JSON object")
    raw = dict(raw)
    model_section = raw.pop("model", None)
    try:
        train_cfg = TrainConfig.from_jsonable(raw)
    except TypeError as e:
        raise DataError(f"{path}: bad training config: {e}") from None
    model_cfg = None
    if model_section is not None:
        if not isinstance(model_section, dict):
            raise DataError(f"{path}: 'model' must be a JSON object")
        try:
            model_cfg = ModelConfig.from_json(json.dumps(model_section))
        except TypeError as e:
            raise DataError(f"{path}: bad model config: {e}") from None
    return train_cfg, model_cfg


def cmd_train(args):
    train_cfg, model_cfg = _load_train_config(args.config)
    if args.seed is not None:
        train_cfg = TrainConfig.from_jsonable({**train_cfg.to_jsonable(), "seed": args.seed})
    if args.steps is not None:
        train_cfg = TrainConfig.from_jsonable({**train_cfg.to_jsonable(), "steps": args.steps})
    summary = train(train_cfg, args.data, args.out, model_config=model_cfg)
    _print_json(summary)
    return [summary["checkpoint"], summary["metrics"]]


def _reference_boundaries(entry, phn_dir):
    """Interior reference boundary times for one utterance (the 0.0 utterance
    start is not a detectable event, so it is excluded on both sides)."""
    if phn_dir:
        stem = os.path.splitext(os.path.basename(entry["audio"]))[0]
        for ext in (".phn", ".PHN"):
            path = os.path.join(phn_dir, stem + ext)
            if os.path.exists(path):
                times, _ = parse_phn(path)
                return [t for t in times if t > 0.0]
        raise DataError(f"no .phn file for {stem!r} under {phn_dir}")
    labels = read_labels(entry["labels"])
    return [t for t, _ in labels if t > 0.0]


def cmd_eval_seg(args):
    model, _, _ = _load_model(args.ckpt)
    entries = load_manifest(args.data)
    pairs = []
    for entry in entries:
        ref = _reference_boundaries(entry, args.phn_dir)
        if args.oracle:
            pred = list(ref)
        else:
            z = encode_frames(load_wav(entry["audio"]), model)
            probs = predict_boundaries(z, model).probs
            idx = extract_hard_boundaries(probs, args.threshold, args.min_gap)
            pred = [t for t in boundary_times(idx, z.frame_rate) if t > 0.0]
        pairs.append((pred, ref))
    score = aggregate_segmentation_scores(pairs, tolerance=args.tolerance)
    out = score.to_jsonable()
    out.update({
        "n_utterances": len(pairs),
        "tolerance": args.tolerance,
        "threshold": args.threshold,
        "min_gap": args.min_gap,
        "oracle": bool(args.oracle),
        "ckpt": args.ckpt,
    })
    _print_json(out)
    return []


def cmd_eval_abx(args):
    model, _, _ = _load_model(args.ckpt)
    data = args.data
    corpus_dir = os.path.dirname(os.path.abspath(data)) if os.path.isfile(data) else data
    triples = generate_abx_triples(corpus_dir, args.triples, args.seed)
    result = abx_error(model, triples, representation=args.representation,
                       threads=_resolve_threads(args))
    out = result.to_jsonable()
    out.update({
        "representation": args.representation,
        "n_triples": args.triples,
        "seed": args.seed,
        "ckpt": args.ckpt,
    })
    _print_json(out)
    return []


def cmd_eval_probe(args):
    model, _, _ = _load_model(args.ckpt)
    cfg = ProbeConfig(
        train_fraction=args.train_fraction,
        representation=args.representation,
    )
    accuracy = speaker_probe(model, args.data, cfg)
    entries = load_manifest(args.data)
    _print_json({
        "accuracy": accuracy,
        "n_utterances": len(entries),
        "n_speakers": len({e["speaker"] for e in entries}),
        "train_fraction": args.train_fraction,
        "representation": args.representation,
        "ckpt": args.ckpt,
    })
    return []


def cmd_dump_pooling(args):
    model, _, _ = _load_model(args.ckpt)
    buf = load_wav(getattr(args, "in"))
    z = encode_frames(buf, model)
    bnd = predict_boundaries(z, model)
    att = AttentionConfig()
    m = n_heads(bnd.probs.shape[0], att)
    unnorm = np.exp(log_kernels(bnd.cum, m, att.sigma))
    os.makedirs(args.out, exist_ok=True)
    bnd_path = os.path.join(args.out, "boundaries.csv")
    att_path = os.path.join(args.out, "attention.csv")
    rows = ["frame,prob"]
    rows += [f"{i},{p:.8f}" for i, p in enumerate(bnd.probs)]
    _write_text_atomic(bnd_path, "\n".join(rows) + "\n")
    rows = ["head,frame,value"]
    for h in range(m):
        rows += [f"{h},{i},{unnorm[h, i]:.8e}" for i in range(unnorm.shape[1])]
    _write_text_atomic(att_path, "\n".join(rows) + "\n")
    _print_json({
        "boundaries": bnd_path,
        "attention": att_path,
        "frames": int(bnd.probs.shape[0]),
        "heads": int(m),
        "ckpt": args.ckpt,
    })
    return [bnd_path, att_path]


# ---- parser --------------------------------------------------------------------


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="sspool", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic corpus with known boundaries",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--minutes", type=float, default=30.0, help="total audio minutes")
    p.add_argument("--speakers", type=int, default=4, help="number of speakers")
    p.add_argument("--units", type=int, default=20, help="unit inventory size")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="augment one wav and dump the time alignment",
                       formatter_class=fmt)
    p.add_argument("--in", required=True, help="input wav path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    p.add_argument("--segments", type=int, default=3, help="segments to stretch")
    p.add_argument("--stretch-min", type=float, default=0.8, help="slowest rate")
    p.add_argument("--stretch-max", type=float, default=1.25, help="fastest rate")
    p.add_argument("--pitch-semitones", type=float, default=2.0,
                   help="max absolute pitch shift")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="run the training loop", formatter_class=fmt)
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--steps", type=int, default=None, help="override config steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-seg", help="score predicted boundaries", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--phn-dir", default=None, help="directory of TIMIT .phn files")
    p.add_argument("--tolerance", type=float, default=0.02, help="match window, seconds")
    p.add_argument("--threshold", type=float, default=0.5, help="boundary peak threshold")
    p.add_argument("--min-gap", type=int, default=4, help="min frames between boundaries")
    p.add_argument("--oracle", action="store_true",
                   help="score the reference against itself (pipeline check)")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("eval-abx", help="frame-DTW cosine ABX error", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="corpus dir or manifest path")
    p.add_argument("--triples", type=int, default=200, help="number of ABX triples")
    p.add_argument("--seed", type=int, default=0, help="triple sampling seed")
    p.add_argument("--representation", choices=("z", "c", "pooled"), default="z",
                   help="which representation to compare")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: SSPOOL_THREADS or all cores)")
    p.set_defaults(func=cmd_eval_abx)

    p = sub.add_parser("eval-probe", help="linear speaker probe accuracy",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--train-fraction", type=float, default=0.7,
                   help="per-speaker train split")
    p.add_argument("--representation", choices=("z", "c", "pooled"), default="z",
                   help="which representation to probe")
    p.set_defaults(func=cmd_eval_probe)

    p = sub.add_parser("dump-pooling", help="dump boundary probs and attention",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--in", required=True, help="input wav path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dump_pooling)

    return parser


def run_cli(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return CommandResult(int(e.code or 0), [])
    try:
        outputs = args.func(args)
    except DataError as e:
        print(f"sspool: data error: {e}", file=sys.stderr)
        return CommandResult(EXIT_DATA, [])
    except NumericError as e:
        print(f"sspool: numeric error: {e}", file=sys.stderr)
        return CommandResult(EXIT_NUMERIC, [])
    except SspoolError as e:
        print(f"sspool: error: {e}", file=sys.stderr)
        return CommandResult(EXIT_USAGE, [])
    except OSError as e:
        print(f"sspool: io error: {e}", file=sys.stderr)
        return CommandResult(EXIT_DATA, [])
    return CommandResult(EXIT_OK, outputs or [])


def main(argv=None):
    sys.exit(run_cli(argv).exit_code)


if __name__ == "__main__":
    main()
