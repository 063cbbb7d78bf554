"""``afsn`` command line: gen, train, track, eval, analyze.

Exit codes: 0 success, 2 configuration/validation, 3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import backbone as bb
from .metrics import evaluate_ope
from .model import SiameseModel, build_model, param_shapes
from .synth import (
    ConfigError,
    SequenceFormatError,
    config_from_kv,
    generate_sequence,
    parse_kv,
    read_groundtruth,
    read_sequence,
    write_sequence,
)
from .tensor import CheckpointError, load_checkpoint, save_checkpoint
from .tracker import DEFAULT_GAMMA, OracleModel, TrackerConfig, read_results, track_sequence, write_results
from .train import TrainConfig, TrainingError, train, write_history

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_text(path: str | Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None


def _load_backbone(path: str | None) -> bb.BackboneSpec:
    if path is None:
        return bb.reference_spec()
    try:
        return bb.parse_backbone_spec(_read_text(path))
    except bb.BackboneError as exc:
        raise CommandError(EXIT_CONFIG, f"{path}: {exc}") from None


def _load_sequence(path: str | Path):
    try:
        return read_sequence(path)
    except FileNotFoundError as exc:
        raise CommandError(EXIT_IO, str(exc)) from None
    except SequenceFormatError as exc:
        raise CommandError(EXIT_IO, str(exc)) from None
    except OSError as exc:
        raise CommandError(EXIT_IO, f"{path}: {exc}") from None


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "groundtruth.txt").is_file():
        return [root]
    if not root.is_dir():
        raise CommandError(EXIT_IO, f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").is_file())
    if not dirs:
        raise CommandError(EXIT_IO, f"no sequences (directories with groundtruth.txt) under {root}")
    return dirs


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    kv = parse_kv(_read_text(args.config), args.config)
    try:
        count = int(kv.get("sequences", "1"))
        if count < 1:
            raise ValueError
    except ValueError:
        raise CommandError(EXIT_CONFIG, f"sequences must be a positive integer, got {kv.get('sequences')!r}") from None
    base = config_from_kv(kv, extra_keys=("sequences",))
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    out = Path(args.out)
    try:
        for i in range(count):
            cfg = replace(base, seed=base.seed + i)
            name = f"seq_{i:03d}"
            write_sequence(generate_sequence(cfg), out / name)
            print(f"{name} seed={cfg.seed}")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write under {out}: {exc}") from None
    return EXIT_OK


_TRAIN_KEYS = {
    "epochs": int,
    "pairs_per_epoch": int,
    "lr_start": float,
    "lr_end": float,
    "lambda_off": float,
    "lambda_scl": float,
    "offset_cutoff": float,
    "seed": int,
}


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        for key, raw in parse_kv(_read_text(args.config), args.config).items():
            if key not in _TRAIN_KEYS:
                raise CommandError(EXIT_CONFIG, f"unknown config key {key!r}")
            try:
                values[key] = _TRAIN_KEYS[key](raw)
            except ValueError:
                raise CommandError(EXIT_CONFIG, f"bad value for {key!r}: {raw!r}") from None
    for key, flag in (("epochs", args.epochs), ("pairs_per_epoch", args.pairs), ("seed", args.seed)):
        if flag is not None:
            values[key] = flag
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None


def cmd_train(args) -> int:
    spec = _load_backbone(args.backbone)
    try:
        bb.check_geometry(spec)
    except bb.BackboneError as exc:
        raise CommandError(EXIT_CONFIG, f"{args.backbone}: {exc}") from None
    config = _train_config(args)
    dataset = [_load_sequence(d) for d in _sequence_dirs(Path(args.data))]
    model = build_model(spec, config.seed)

    def progress(epoch, lr, mean):
        if not args.quiet:
            print(f"epoch={epoch} lr={lr:.3e} mean_loss={mean:.6f}", flush=True)

    try:
        params, history = train(model, dataset, config, progress)
    except TrainingError as exc:
        raise CommandError(EXIT_NUMERIC, str(exc)) from None
    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".loss.csv")
    try:
        save_checkpoint(out, params)
        write_history(history_path, history)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {out}: {exc}") from None
    print(f"final_loss={history[-1]:.6f}")
    return EXIT_OK


def _load_model(checkpoint: str, backbone: str | None) -> SiameseModel:
    spec = _load_backbone(backbone)
    try:
        params = load_checkpoint(checkpoint)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read {checkpoint}: {exc.strerror or exc}") from None
    except CheckpointError as exc:
        raise CommandError(EXIT_IO, str(exc)) from None
    expected = param_shapes(spec)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        bad = sorted(set(expected) ^ set(got)) or sorted(k for k in expected if expected[k] != got[k])
        raise CommandError(EXIT_CONFIG, f"checkpoint does not match backbone (first mismatches: {', '.join(bad[:3])})")
    for p in params.values():
        p.requires_grad = True
    return SiameseModel(spec, params)


def cmd_track(args) -> int:
    seq = _load_sequence(args.sequence)
    try:
        config = TrackerConfig(args.gamma)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    if args.oracle:
        model = OracleModel(seq.truth)
    elif args.checkpoint:
        model = _load_model(args.checkpoint, args.backbone)
    else:
        raise CommandError(EXIT_CONFIG, "track needs --checkpoint or --oracle")
    start = time.perf_counter()
    boxes = track_sequence(seq.frames, seq.truth[0], model, config)
    elapsed = time.perf_counter() - start
    try:
        write_results(args.out, boxes)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    fps = (len(boxes) - 1) / elapsed if elapsed > 0 and len(boxes) > 1 else float("inf")
    print(f"frames={len(boxes)} fps={fps:.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        pred = read_results(args.result)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read {args.result}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    seq_dir = Path(args.sequence)
    gt_path = seq_dir / "groundtruth.txt"
    if not gt_path.is_file():
        raise CommandError(EXIT_IO, f"{gt_path} not found")
    try:
        truth = read_groundtruth(gt_path)
    except SequenceFormatError as exc:
        raise CommandError(EXIT_IO, str(exc)) from None
    if not pred:
        raise CommandError(EXIT_CONFIG, f"{args.result} is empty")
    if len(pred) != len(truth):
        raise CommandError(EXIT_CONFIG, f"{len(pred)} results for {len(truth)} groundtruth frames")
    report = evaluate_ope(pred, truth)
    prefix = Path(args.out) if args.out else Path(args.result).with_suffix("")
    try:
        report.write(prefix)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write curves at {prefix}: {exc}") from None
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_analyze(args) -> int:
    spec = _load_backbone(args.backbone)
    a = bb.analyze(spec)
    sys.stdout.write(a.to_text())
    implied = bb.stride_score_map(a.total_stride)
    print(f"implied_score_map={implied:g}")
    for finding in bb.check_design_rules(a):
        print(f"finding={finding}")
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afsn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic sequences")
    p.add_argument("--config", required=True, help="key=value SequenceConfig file (plus sequences=N)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("data", help="dataset directory (sequence dirs) or a single sequence")
    p.add_argument("backbone", help="backbone description file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="key=value TrainConfig file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pairs", type=int, help="pairs per epoch")
    p.add_argument("--seed", type=int)
    p.add_argument("--history", help="loss-history CSV path (default: <out>.loss.csv)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one sequence")
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--checkpoint")
    p.add_argument("--backbone", help="backbone file the checkpoint was trained with (default: reference)")
    p.add_argument("--oracle", action="store_true", help="fabricate head outputs from groundtruth")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA, help="hanning window weight")
    p.add_argument("--out", required=True, help="result log path")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="one-pass evaluation of a result log")
    p.add_argument("result")
    p.add_argument("sequence")
    p.add_argument("--out", help="prefix for curve CSVs (default: result path without suffix)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="stride / receptive field analysis")
    p.add_argument("backbone")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"afsn {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"afsn {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
