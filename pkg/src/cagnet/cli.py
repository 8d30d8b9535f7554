"""Command-line entry point: ``cagnet {train,infer,eval,params,gradcheck,synth}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import ImageBuffer, read_pnm, resize_bilinear, synth_dataset, write_pgm, load_dataset
from .gradsuite import run_checks, select
from .metrics import evaluate_dataset, resize_map
from .model import build, closed_form_params, count_params
from .tensor import Tensor
from .trainer import Checkpoint, CheckpointError, TrainingDiverged, restore, train

log = logging.getLogger("cagnet")


def workers() -> int:
    raw = os.environ.get("CAGNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"CAGNET_THREADS must be an integer, got {raw!r}") from None


def _run_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_train(args) -> int:
    run = _run_config(args.config)
    if args.seed is not None:
        run = run.with_seed(args.seed)
    if args.epochs is not None:
        run = run.with_epochs(args.epochs)
    dataset = [pair for _, pair in load_dataset(args.data, run.train.input_size)]
    model = build(run.model)
    log_path = args.log or str(args.out) + ".log"
    result = train(model, dataset, run.train, run.loss, out=args.out, log_path=log_path,
                   on_epoch=lambda _, line: print(line, flush=True))
    final = result.maes[-1] if result.maes else float("nan")
    print(f"saved {args.out} after {result.checkpoint.epoch} epochs (train mae {final:.4f})")
    return 0


def _input_images(root: Path) -> list[Path]:
    src = root / "images" if (root / "images").is_dir() else root
    files = sorted(src.glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm images in {src}")
    return files


def predict(model, img: ImageBuffer, size: int) -> np.ndarray:
    """Saliency map in [0, 1] at the image's own resolution."""
    x = resize_bilinear(img, size, size).pixels.transpose(2, 0, 1)[None] / 255.0 - 0.5
    s = model(Tensor(x)).data[0, 0]
    return np.clip(resize_map(s, img.h, img.w), 0.0, 1.0)


def cmd_infer(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = restore(ckpt).eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _input_images(Path(args.input))
    for path in files:
        img = read_pnm(path)
        if img.channels != 3:
            raise ValueError(f"{path.name}: expected a 3-channel P6 image")
        s = predict(model, img, ckpt.train_config.input_size)
        # lossy quantization to 8 bits
        write_pgm(out / f"{path.stem}.pgm", ImageBuffer(np.rint(255 * s).astype(np.uint8)))
    print(f"wrote {len(files)} saliency maps to {out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dataset(args.pred, args.gt, workers=workers())
    pr_path, f_path = report.write(args.report)
    print(report.table(), end="")
    print(f"curves: {pr_path} {f_path}")
    return 0


def cmd_params(args) -> int:
    config = _run_config(args.config).model
    live = count_params(build(config))
    closed = closed_form_params(config)
    print(f"{'component':<10}{'weights':>12}{'biases':>10}{'norm':>8}{'total':>12}")
    for name, w, b, n, total in live.rows():
        print(f"{name:<10}{w:>12,}{b:>10,}{n:>8,}{total:>12,}")
    print(f"{'total':<10}{live.total('weights'):>12,}{live.total('biases'):>10,}"
          f"{live.total('norm'):>8,}{live.total():>12,}")
    if live.breakdown != closed.breakdown:
        print("error: live count disagrees with the closed-form count", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    checks = select(args.module)
    t0 = time.perf_counter()
    results = run_checks(checks)
    print(f"{'check':<28}{'group':<12}{'max rel err':>12}{'tol':>9}  status")
    for check, err, ok in results:
        print(f"{check.name:<28}{check.group:<12}{err:>12.2e}{check.tol:>9.0e}  "
              f"{'pass' if ok else 'FAIL'}")
    failed = sum(not ok for _, _, ok in results)
    print(f"{len(results) - failed}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    out = synth_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {args.n} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset root with images/ and masks/")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="directory of .ppm images")
    p.add_argument("--out", required=True, help="output directory for .pgm maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="summary table path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="per-component parameter counts")
    p.add_argument("--config", help="key=value config file (default settings if omitted)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", help="a check name or group (primitives, blocks, losses, model)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
