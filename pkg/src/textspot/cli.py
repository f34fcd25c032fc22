"""Command-line entry point: ``textspot gen|train|infer|eval``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .evaluation import (EvalDataError, end_to_end_score, format_prediction_line, read_ground_truth,
                         read_lexicon, read_predictions)
from .synth import DatasetError, read_dataset, read_index, read_ppm, write_dataset
from .trainer import TrainingAborted, infer, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textspot", description="Irregular scene text detection and recognition.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="render a synthetic dataset")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out")
    tr.add_argument("--resume")

    inf = sub.add_parser("infer", help="detect and read text")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    src = inf.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--dataset")
    inf.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--lexicon")
    ev.add_argument("--report", help="key=value output path (default: <pred>.report)")
    return parser


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    write_dataset(cfg.data, args.count, args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.train.out = args.out
    state = train(cfg, resume=args.resume)
    print(f"trained {state.step} steps; checkpoint in {cfg.train.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = args.config or ckpt.parent / "config.txt"
    cfg = load_config(cfg_path if Path(cfg_path).exists() else None)
    model = load_model(ckpt, cfg)
    if args.image:
        items = [(Path(args.image).stem, read_ppm(args.image))]
    else:
        names = [name for name, _ in read_index(args.dataset)]
        items = [(Path(n).stem, s.image) for n, s in zip(names, read_dataset(args.dataset))]
    with open(args.out, "w", encoding="utf-8") as fh:
        for image_id, image in items:
            dets = infer(model, image, cfg)
            fh.write(format_prediction_line(image_id, [(d.quad, d.text) for d in dets]))
    print(f"wrote predictions for {len(items)} image(s) to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_predictions(args.pred)
    gt = read_ground_truth(args.gt)
    lexicon = read_lexicon(args.lexicon) if args.lexicon else None
    report = end_to_end_score(pred, gt, lexicon)
    sys.stdout.write(report.to_text())
    out = Path(args.report) if args.report else Path(str(args.pred) + ".report")
    out.write_text(report.to_keyvalue(), encoding="utf-8")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"textspot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"textspot: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, EvalDataError, CheckpointError, TrainingAborted, FileNotFoundError, KeyError) as exc:
        print(f"textspot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
