"""Command-line entry point: ``hdcaseg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as cfgmod
from .gradcheck import format_report, run_suite
from .hdca import extract_region_maps
from .model import SegModel, StateMismatchError, model_forward, predict_labels
from .synthdata import (
    CLASS_NAMES,
    DatasetError,
    NetpbmError,
    SceneSpec,
    class_frequencies,
    load_dataset,
    read_ppm,
    write_corpus,
    write_pgm,
    write_ppm,
)
from .tensor import Tensor
from .training import (
    TrainingDiverged,
    evaluate,
    load_training_checkpoint,
    train,
)

log = logging.getLogger("hdcaseg")

RUN_CONFIG = "run_config.yaml"
DEFAULT_TTA_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)

# 16 well-separated colours; index n always maps to the same colour on every level
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [0, 0, 128],
], dtype=np.uint8)


class CliError(Exception):
    pass


def colorize(labels: np.ndarray) -> np.ndarray:
    """(H, W) indices -> (3, H, W) float image in [0, 1]; 255 (ignore) is black."""
    rgb = PALETTE[np.asarray(labels) % len(PALETTE)].astype(np.float32) / 255.0
    rgb[np.asarray(labels) == 255] = 0
    return rgb.transpose(2, 0, 1)


def parse_size(text: str) -> tuple[int, int]:
    try:
        parts = [int(t) for t in text.lower().split("x")]
    except ValueError:
        raise CliError(f"--size {text!r}: expected HxW, e.g. 64x64") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 8:
        raise CliError(f"--size {text!r}: expected HxW with both sides >= 8")
    h, w = parts
    if h % 8 or w % 8:
        raise CliError(f"--size {text}: height and width must be divisible by 8 "
                       f"(the network downsamples by 8)")
    return h, w


def parse_scales(text: str) -> list[float]:
    try:
        scales = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"--scales {text!r}: expected comma-separated numbers") from None
    if not scales or min(scales) <= 0:
        raise CliError(f"--scales {text!r}: need at least one positive scale")
    return scales


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    h, w = parse_size(args.size)
    if args.count < 0:
        raise CliError(f"--count {args.count}: must be >= 0")
    if args.classes != len(CLASS_NAMES):
        raise CliError(f"--classes {args.classes}: the scene generator draws exactly {len(CLASS_NAMES)} classes")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        samples = write_corpus(out, SceneSpec(size=h, width=w, classes=args.classes, seed=args.seed), args.count)
    except OSError as e:
        raise CliError(f"--out {args.out}: cannot write ({e.strerror})") from e
    if not samples:
        print(f"warning: --count 0, wrote an empty index to {out}", file=sys.stderr)
        return 0
    freq = class_frequencies(samples, args.classes)
    total = max(int(freq.sum()), 1)
    print(f"wrote {len(samples)} scenes ({h}x{w}) to {out}")
    for name, n in zip(CLASS_NAMES, freq):
        print(f"  {name:<8} {n:>10d} px  {n / total:6.2%}")
    return 0


def _overrides_from_args(args) -> dict:
    o = {}
    if getattr(args, "levels", None) is not None:
        o["hdca.region_schedule"] = cfgmod.parse_levels(args.levels)
    if getattr(args, "include_reduced", False):
        o["hdca.include_reduced"] = True
    for flag, key in [("iters", "training.iters"), ("batch_size", "training.batch_size"),
                      ("lr", "training.base_lr"), ("crop", "training.crop"),
                      ("checkpoint_every", "training.checkpoint_every")]:
        v = getattr(args, flag, None)
        if v is not None:
            o[key] = v
    if getattr(args, "seed", None) is not None:
        o["training.seed"] = args.seed
        o["model.seed"] = args.seed
    return o


def _load_config(path, overrides) -> cfgmod.RunConfig:
    if path is None:
        return cfgmod.from_dict({}, overrides)
    if not Path(path).exists():
        raise CliError(f"--config {path}: file not found")
    return cfgmod.load(path, overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, _overrides_from_args(args))
    data = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / RUN_CONFIG)
    model = SegModel(cfg.model_config(), seed=cfg.model.seed)
    state = None
    if args.resume:
        state = load_training_checkpoint(args.resume, model)
        if state is None:
            raise CliError(f"--resume {args.resume}: checkpoint has no optimizer state")
    t0 = time.perf_counter()
    try:
        result = train(model, data, cfg.training, out_dir=out, state=state)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 1
    last = result.loss_log[-1] if result.loss_log else None
    print(f"trained {len(result.loss_log)} iterations in {time.perf_counter() - t0:.1f}s"
          + (f", final loss {last[2]:.4f}" if last else ""))
    print(f"checkpoint: {result.checkpoints[-1]}")
    return 0


def _model_from_checkpoint(args) -> tuple[SegModel, cfgmod.RunConfig]:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"--checkpoint {ckpt}: file not found")
    cfg_path = args.config or (ckpt.parent / RUN_CONFIG)
    if not Path(cfg_path).exists():
        raise CliError(f"no run config found at {cfg_path}; pass --config")
    overrides = {}
    if getattr(args, "levels", None) is not None:
        overrides["hdca.region_schedule"] = cfgmod.parse_levels(args.levels)
    cfg = cfgmod.load(cfg_path, overrides)
    model = SegModel(cfg.model_config(), seed=cfg.model.seed)
    tensors, _ = checkpoint.load(ckpt)
    model.load_state_dict(tensors)
    return model, cfg


def cmd_eval(args) -> int:
    model, _ = _model_from_checkpoint(args)
    data = load_dataset(args.data)
    scales = parse_scales(args.scales) if args.scales else list(DEFAULT_TTA_SCALES)
    res = evaluate(model, data, tta=args.tta, scales=scales, flip=args.tta and not args.no_flip)
    names = list(CLASS_NAMES) if model.config.num_classes == len(CLASS_NAMES) else \
        [str(k) for k in range(model.config.num_classes)]
    print(f"{'class':<10} {'IoU':>8}")
    for name, v in zip(names, res.per_class_iou):
        print(f"{name:<10} {'n/a' if np.isnan(v) else f'{v:.4f}':>8}")
    print(f"mean IoU {res.mean_iou:.4f}   pixel accuracy {res.pixel_accuracy:.4f}")
    print(f"mIoU={res.mean_iou!r}")
    return 0


def _padded_input(path) -> tuple[np.ndarray, int, int]:
    img = read_ppm(path)
    _, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "symmetric"
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)
    return img, h, w


def cmd_infer(args) -> int:
    model, _ = _model_from_checkpoint(args)
    img, h, w = _padded_input(args.image)
    pred = predict_labels(model, img)[:h, :w]
    write_pgm(args.out, pred.astype(np.uint8))
    if args.color:
        write_ppm(args.color, colorize(pred))
    print(f"wrote {args.out} ({h}x{w})")
    return 0


def cmd_viz_hierarchy(args) -> int:
    model, _ = _model_from_checkpoint(args)
    img, h, w = _padded_input(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logits, maps = model_forward(model, Tensor(img[None]), training=False)
    if not maps:
        print("warning: baseline model has no hierarchy levels", file=sys.stderr)
    for n, idx in enumerate(extract_region_maps(maps), start=1):
        up = np.repeat(np.repeat(idx[0], 8, axis=0), 8, axis=1)[:h, :w].astype(np.uint8)
        write_pgm(out / f"level_{n}.pgm", up)
        write_ppm(out / f"level_{n}.ppm", colorize(up))
    pred = np.argmax(logits.data[0], axis=0)[:h, :w].astype(np.uint8)
    write_pgm(out / "prediction.pgm", pred)
    write_ppm(out / "prediction.ppm", colorize(pred))
    print(f"wrote {len(maps)} level maps and the prediction to {out}")
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(eps=args.eps)
    print(format_report(results))
    failed = [r.op for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdcaseg", description="Hierarchical context aggregation segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic scene corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--size", default="64x64")
    g.add_argument("--classes", type=int, default=len(CLASS_NAMES))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--levels", help="region schedule, e.g. 2,4,8,16; 'none' for the baseline")
    t.add_argument("--include-reduced", action="store_true", help="also feed X' to the classifier")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--crop", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--levels")
    e.add_argument("--tta", action="store_true", help="multi-scale + flip test-time augmentation")
    e.add_argument("--scales", help="comma-separated TTA scales (default 0.5,...,1.75)")
    e.add_argument("--no-flip", action="store_true", help="disable the flip half of TTA")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a label map for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--color", help="also write a colour-coded PPM here")
    i.add_argument("--config")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("viz-hierarchy", help="write per-level region maps for one image")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config")
    v.set_defaults(func=cmd_viz_hierarchy)

    c = sub.add_parser("grad-check", help="finite-difference audit of every kernel")
    c.add_argument("--eps", type=float, default=1e-5)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, cfgmod.ConfigError, DatasetError, NetpbmError, checkpoint.CheckpointError,
            StateMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
