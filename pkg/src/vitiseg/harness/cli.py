"""Command-line entry point: ``vitiseg <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(including partial batch failures), 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import DataError, UsageError, VitisegError
from ..models import load_model, save_model
from .config import PRESETS, load_config, preset
from .data import Manifest, split_dataset, synth_dataset
from .pipeline import evaluate, predict, refine_predictions, write_overlays
from .search import SearchSpace, random_search
from .training import train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ratios(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError("expected three ratios")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global random seed")
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key = value training config file")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads for per-image work")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="vitiseg", description="Desk-scale lesion segmentation pipeline.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--kind", choices=("lesions", "disks"), default="lesions")
    p.add_argument("--out", type=Path, required=True, help="output directory (manifest.csv is written there)")

    p = sub.add_parser("split", parents=[common], help="assign train/val/test splits")
    p.add_argument("manifest", type=Path)
    p.add_argument("--ratios", type=_ratios, default=(0.6, 0.2, 0.2))
    p.add_argument("--out", type=Path, help="output manifest (default: overwrite input)")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--combine", action="store_true", help="train on train+val")
    p.add_argument("--history", type=Path, help="write per-epoch history CSV here")

    p = sub.add_parser("predict", parents=[common], help="write confidence maps")
    p.add_argument("model", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("refine", parents=[common], help="watershed-refine confidence maps")
    p.add_argument("manifest", type=Path)
    p.add_argument("--conf", type=Path, required=True, help="directory of confidence maps")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--surface", choices=("image", "confidence"), default="image")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions and write a report")
    p.add_argument("manifest", type=Path)
    p.add_argument("--pred", type=Path, required=True, help="directory of confidence maps or refined masks")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, default=0.65)
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("manifest", type=Path)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--epochs", type=int, help="override the configured epoch count per trial")
    p.add_argument("--out", type=Path, required=True, help="CSV of all trials")

    p = sub.add_parser("overlay", parents=[common], help="render TP/FP/FN overlays")
    p.add_argument("manifest", type=Path)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", type=Path, required=True)
    return parser


def _train_config(args):
    config = load_config(getattr(args, "config", None), preset(args.preset))
    overrides = {}
    if hasattr(args, "seed"):
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "combine", False):
        overrides["combine"] = True
    return config.replace(**overrides) if overrides else config


def _batch_exit(result, what: str) -> int:
    print(f"{what}: {len(result.written)} written, {len(result.failures)} failed")
    return EXIT_OK if result.ok else EXIT_DATA


def run(args) -> int:
    jobs = max(1, getattr(args, "jobs", 1))
    seed = getattr(args, "seed", 0)
    cmd = args.command
    if cmd == "synth":
        manifest = synth_dataset(args.n, args.size, seed, args.out, args.kind)
        print(f"wrote {len(manifest)} images to {args.out}")
    elif cmd == "split":
        manifest = split_dataset(Manifest.load(args.manifest), args.ratios, seed)
        manifest.save(args.out or args.manifest)
        counts = manifest.counts()
        print(f"train {counts['train']}, val {counts['val']}, test {counts['test']}")
    elif cmd == "train":
        config = _train_config(args)
        result = train(Manifest.load(args.manifest), config,
                       callback=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.4f} train_ji {r.train_ji:.4f}"
                                                + ("" if r.val_ji is None else f" val_ji {r.val_ji:.4f}")))
        args.out.parent.mkdir(parents=True, exist_ok=True)
        save_model(result.model, args.out)
        if args.history:
            args.history.parent.mkdir(parents=True, exist_ok=True)
            args.history.write_text(result.history.to_csv(), encoding="utf-8")
        print(f"saved epoch {result.history.best_epoch} checkpoint to {args.out}")
    elif cmd == "predict":
        model = load_model(args.model)
        return _batch_exit(predict(model, Manifest.load(args.manifest), args.split, args.out, jobs), "predict")
    elif cmd == "refine":
        result = refine_predictions(Manifest.load(args.manifest), args.split, args.conf, args.out, args.surface, jobs)
        return _batch_exit(result, "refine")
    elif cmd == "evaluate":
        result = evaluate(Manifest.load(args.manifest), args.split, args.pred, args.threshold, args.report, jobs)
        if result.report is None:
            raise DataError("no predictions could be scored")
        r = result.report
        print(f"mean JI {r.mean_ji:.4f}, mean thresholded JI {r.mean_thresholded_ji:.4f}, "
              f"{r.below_threshold} below threshold")
        return EXIT_OK if result.ok else EXIT_DATA
    elif cmd == "search":
        if args.budget < 1:
            raise UsageError("--budget must be at least 1")
        results = random_search(Manifest.load(args.manifest), args.budget, _train_config(args), seed,
                                SearchSpace(), args.out)
        best = results[0]
        print(f"best trial {best.trial}: thresholded JI {best.mean_thresholded_ji:.4f}, JI {best.mean_ji:.4f}, "
              f"lr {best.lr:.3g}")
    elif cmd == "overlay":
        return _batch_exit(write_overlays(Manifest.load(args.manifest), args.split, args.pred, args.out, jobs),
                           "overlay")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except VitisegError as exc:
        print(f"vitiseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vitiseg: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
