"""The ``bfseg`` command line.

Subcommands: ``synth`` (write a synthetic dataset), ``train``, ``eval``
(Table-style report + CSV), ``predict`` (mask and overlay PNGs), and
``gradcheck`` (the finite-difference verification suite).

Exit codes: 0 success, 1 invalid flags or configuration, 2 I/O or file-format
error, 3 gradient check failure.  ``BFS_SEED`` overrides the default seed of
commands whose ``--seed`` was not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from bfseg import data as D
from bfseg import metrics as X
from bfseg import model as M
from bfseg import tensor as T
from bfseg import train as R
from bfseg import verify as V
from bfseg.tensor import Tensor

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_GRADCHECK = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _default_seed():
    raw = os.environ.get("BFS_SEED")
    try:
        return int(raw) if raw is not None else None
    except ValueError:
        raise T.ConfigError(f"BFS_SEED must be an integer, got {raw!r}")


def build_parser():
    parser = _Parser(prog="bfseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of image/mask pairs")
    p.add_argument("--size", type=int, required=True, help="image side length (multiple of 32)")
    p.add_argument("--seed", type=int, default=None, help="generator seed")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset root (images/ + masks/)")
    p.add_argument("--config", default=None, help="JSON config file (model + training fields)")
    p.add_argument("--out", required=True, help="run directory for checkpoint, log, configs")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")
    p.add_argument("--max-epochs", type=int, default=None, help="override the epoch cap")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True, help="checkpoint file (config.json beside it)")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="CSV path (default: eval_<split>.csv beside ckpt)")

    p = sub.add_parser("predict", help="segment one image, write mask + overlay PNGs")
    p.add_argument("--ckpt", required=True, help="checkpoint file (config.json beside it)")
    p.add_argument("--image", required=True, help="input RGB image")
    p.add_argument("--out", required=True, help="output directory")

    sub.add_parser("gradcheck", help="run the layer-by-layer gradient verification suite")
    return parser


def cmd_synth(args):
    seed = args.seed if args.seed is not None else _default_seed()
    if seed is None:
        raise T.ConfigError("synth needs --seed (or the BFS_SEED environment variable)")
    ids = D.synth_generate(args.n, args.size, seed, args.out)
    print(f"wrote {len(ids)} image/mask pairs under {args.out}")
    return EXIT_OK


def cmd_train(args):
    if args.config is not None:
        model_config, train_config = R.load_run_config(args.config)
    else:
        model_config, train_config = M.ModelConfig(), R.TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    elif args.config is None and _default_seed() is not None:
        overrides["seed"] = _default_seed()
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if overrides:
        train_config = dataclasses.replace(train_config, **overrides)

    def progress(row):
        print(
            "epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  "
            "f1 {f1:.3f}  js {js:.3f}  ({seconds:.1f}s)".format(**row)
        )

    result = R.train(model_config, train_config, args.data, args.out, progress=progress)
    print(
        f"done: {result.epochs_run} epochs"
        + (" (early stop)" if result.stopped_early else "")
        + f", best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    if result.descent_warning:
        print(f"warning: {result.descent_warning}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    result, rows, flags = R.evaluate(args.ckpt, args.data, args.split)
    print(X.format_report(rows, flags))
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}.csv"
    out.write_text(X.report_csv(rows), encoding="utf-8")
    print(f"csv: {out}")
    return EXIT_OK


def _load_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise D.DataError(f"cannot read image {path}: {e}") from e


def cmd_predict(args):
    ckpt = Path(args.ckpt)
    model_config, _ = R.load_run_config(ckpt.parent / "config.json")
    params = M.load_checkpoint(ckpt, model_config)
    rgb = _load_image(args.image)
    h, w = rgb.shape[:2]
    if h != model_config.image_size or w != model_config.image_size:
        raise T.ConfigError(
            f"{args.image} is {w}x{h}, model expects "
            f"{model_config.image_size}x{model_config.image_size}"
        )
    img = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0
    with T.no_grad():
        logits = M.forward(Tensor(img[None]), model_config, params)
    mask = np.argmax(logits.array[0], axis=0).astype(np.uint8)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    mask_rgb = D.encode_color_mask(mask)
    Image.fromarray(mask_rgb).save(out / f"{stem}_mask.png")
    # 50% alpha over the input on class pixels, input untouched elsewhere
    overlay = rgb.copy()
    classed = mask != D.CLASS_BACKGROUND
    overlay[classed] = (rgb[classed].astype(np.uint16) + mask_rgb[classed]) // 2
    Image.fromarray(overlay).save(out / f"{stem}_overlay.png")
    print(f"wrote {out / f'{stem}_mask.png'} and {out / f'{stem}_overlay.png'}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = V.gradient_suite()
    worst = 0.0
    for name, err in results:
        status = "ok" if err <= V.THRESHOLD else "FAIL"
        worst = max(worst, err)
        print(f"{name:<20} max relative error {err:.3e}  {status}")
    if worst > V.THRESHOLD:
        print(f"gradient check FAILED: worst {worst:.3e} > {V.THRESHOLD:.0e}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all layers pass (worst {worst:.3e} <= {V.THRESHOLD:.0e})")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (T.ConfigError, T.ShapeError, ValueError) as e:
        print(f"bfseg: invalid configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (D.DataError, M.CheckpointError, OSError) as e:
        print(f"bfseg: i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
