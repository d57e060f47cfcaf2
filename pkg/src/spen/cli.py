"""``spen`` command line: train, predict, eval, gradcheck, gen-data.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure,
3 a gradient check exceeded its tolerance.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import runner, serialization
from .config import load_config
from .errors import ConfigurationError, ContractError, DimensionError, FormatError, SpenError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("spen")


class Outputs:
    """Tracks files and directories a command creates so a failure can remove them."""

    def __init__(self):
        self.paths = []

    def new_dir(self, path):
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def add(self, paths):
        self.paths.extend(Path(p) for p in paths)

    def remove(self):
        for path in reversed(self.paths):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


def cmd_train(args, out):
    cfg = load_config(args.config)
    out_dir = out.new_dir(args.out or cfg.experiment.out_dir)
    out.add(p for p in (out_dir / n for n in runner.TRAIN_OUTPUTS) if not p.exists())
    result, _ = runner.run_train(cfg, out_dir)
    print(f"best dev score {result.best_score:.4f} at epoch {result.best_epoch}; checkpoint {out_dir / 'model.spnt'}")
    return EXIT_OK


def _model_and_split(args):
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint or Path(cfg.experiment.out_dir) / "model.spnt")
    model = runner.load_checkpoint(cfg, ckpt)
    examples = runner.get_data(cfg).split(args.split)
    return cfg, model, examples


def cmd_predict(args, out):
    cfg, model, examples = _model_and_split(args)
    if not examples:
        raise ConfigurationError(f"split {args.split!r} is empty")
    dump = out.new_dir(args.dump_trajectory) if args.dump_trajectory else None
    preds, written = runner.predict_split(model, examples, dump)
    out.add(written)
    target = Path(args.out)
    if not target.exists():
        out.add([target])
    serialization.save(target, {"predictions": np.stack(preds)})
    for key, value in runner.score_predictions(cfg, preds, examples).items():
        print(f"{key} {value:.4f}")
    return EXIT_OK


def cmd_eval(args, out):
    cfg = load_config(args.config)
    examples = runner.get_data(cfg).split(args.split)
    if args.predictions:
        tensors = serialization.load(args.predictions)
        if "predictions" not in tensors:
            raise FormatError(f"{args.predictions}: no 'predictions' tensor")
        preds = list(tensors["predictions"])
        if len(preds) != len(examples):
            raise DimensionError(f"{len(preds)} predictions for {len(examples)} examples")
    else:
        ckpt = Path(args.checkpoint or Path(cfg.experiment.out_dir) / "model.spnt")
        model = runner.load_checkpoint(cfg, ckpt)
        preds = [model.predict(e.pair()[0], store_grads=False).final for e in examples]
    for key, value in runner.score_predictions(cfg, preds, examples).items():
        print(f"{key} {value:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, out):
    cfg = load_config(args.config)
    report = runner.gradcheck(cfg)
    status = EXIT_OK
    for key, err in report.items():
        tol = runner.GRADCHECK_TOLERANCES[key]
        ok = err < tol
        print(f"{key:16s} worst rel. err {err:.3e}  (tol {tol:g})  {'ok' if ok else 'FAIL'}")
        if not ok:
            status = EXIT_CHECK
    return status


def cmd_gen_data(args, out):
    cfg = load_config(args.config)
    directory = out.new_dir(args.out)
    out.add(runner.save_data(cfg, runner.generate_data(cfg), directory))
    print(f"wrote {cfg.experiment.task} dataset to {directory}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="spen", description="Unrolled-optimization structured prediction energy networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus metrics.csv")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: experiment.out_dir)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write predictions for a split")
    p.add_argument("config")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=runner.SPLITS)
    p.add_argument("--out", default="predictions.spnt")
    p.add_argument("--dump-trajectory", metavar="DIR", help="write every iterate of every example")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="print the task metric for a checkpoint or a predictions file")
    p.add_argument("config")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--split", default="test", choices=runner.SPLITS)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks on a shrunken copy of the model")
    p.add_argument("config")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="generate and save the train/dev/test splits")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Outputs()
    try:
        return args.fn(args, out)
    except (ConfigurationError, ContractError, DimensionError, FormatError, FileNotFoundError) as exc:
        out.remove()
        print(f"spen: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SpenError, FloatingPointError, OSError) as exc:
        out.remove()
        print(f"spen: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
