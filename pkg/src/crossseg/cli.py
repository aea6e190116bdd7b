"""Command-line entry points: ``synthgen``, ``train``, ``evaluate`` and ``predict``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from crossseg import config as config_mod
from crossseg.data import (
    SIZE_MULTIPLE,
    LabeledSample,
    SyntheticConfig,
    check_size,
    generate_synthetic_dataset,
    load_split,
    num_threads,
    read_image,
    resize_sample,
)
from crossseg.metrics import evaluate_dataset
from crossseg.training import load_chosen_network, read_checkpoint, train

log = logging.getLogger("crossseg")

OVERLAY_COLORS = {1: (1.0, 0.0, 0.0), 2: (0.0, 0.0, 1.0)}
OVERLAY_ALPHA = 0.4


@dataclass
class CommandResult:
    exit_code: int
    summary: str
    artifact_paths: list[str] = field(default_factory=list)


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    try:
        check_size((h, w))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return h, w


# ---------------------------------------------------------------------------

def cmd_synthgen(args) -> CommandResult:
    cfg = SyntheticConfig(
        num_labeled=args.num_labeled,
        num_unlabeled=args.num_unlabeled,
        num_val=args.num_val,
        height=args.size[0],
        width=args.size[1],
        seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = generate_synthetic_dataset(cfg, args.out)
    out = Path(args.out)
    paths = sorted(str(p) for p in out.rglob("*.png")) if manifest.total else []
    if manifest.total:
        paths.append(str(out / "manifest.json"))
    summary = (f"wrote {manifest.total} images to {out} "
               f"(labeled={len(manifest.labeled)}, unlabeled={len(manifest.unlabeled)}, val={len(manifest.val)})")
    return CommandResult(0, summary, paths)


def cmd_train(args) -> CommandResult:
    try:
        cfg = config_mod.load_config(args.config)
        if args.max_iters is not None:
            cfg = replace(cfg, optimizer=replace(cfg.optimizer, max_iters=args.max_iters))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        cfg.validate()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}")
    if args.print_config:
        return CommandResult(0, config_mod.dump_config(cfg).rstrip())
    record = train(cfg, resume=args.resume)
    out = Path(cfg.out_dir)
    paths = [str(p) for p in (out / "best.pt", out / "last.pt", out / "loss_log.jsonl", out / "val_log.jsonl")
             if p.exists()]
    if record is None:
        summary = f"nothing to do: checkpoint already at max_iters; artifacts in {out}"
    else:
        summary = (f"finished: best val DSC net1={record.val_dsc1:.4f} net2={record.val_dsc2:.4f} "
                   f"chosen={record.chosen} at iter {record.iter}; checkpoint {record.path or out / 'last.pt'}")
    return CommandResult(0, summary, paths)


def _checkpoint_size(ckpt) -> tuple[int, int]:
    return tuple(ckpt["config"]["image_size"])


def cmd_evaluate(args) -> CommandResult:
    ckpt = read_checkpoint(args.checkpoint)
    model = load_chosen_network(ckpt)
    samples = load_split(args.data, args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} of {args.data} is empty")
    size = _checkpoint_size(ckpt)
    fitted = []
    for s in samples:
        image, mask = resize_sample(s.image, s.mask, size)
        fitted.append(LabeledSample(image, mask, s.id))
    result = evaluate_dataset(model, fitted, percentile=95 if args.hd95 else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.to_json() + "\n")
    paths = [str(out)]
    if args.csv:
        result.write_csv(args.csv)
        paths.append(str(args.csv))
    a = result.aggregate
    summary = (f"{ckpt['best_network']} on {len(fitted)} {args.split} samples: "
               f"DSC {a['mean_dsc']:.4f}  HD{'95' if args.hd95 else ''} {a['mean_hd']:.2f}  "
               f"time {a['mean_infer_ms']:.2f} ms")
    return CommandResult(0, summary, paths)


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rgb = np.transpose(image, (1, 2, 0)).astype(np.float64)
    for cls, color in OVERLAY_COLORS.items():
        sel = mask == cls
        rgb[sel] = (1 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * np.array(color)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def cmd_predict(args) -> CommandResult:
    ckpt = read_checkpoint(args.checkpoint)
    model = load_chosen_network(ckpt)
    size = _checkpoint_size(ckpt)
    src = Path(args.images)
    if not src.is_dir():
        raise FileNotFoundError(f"image directory {src} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths, failed = [], 0
    dtype = next(model.parameters()).dtype
    for path in sorted(p for p in src.iterdir() if p.is_file()):
        try:
            image = read_image(path)
        except Exception as exc:  # unreadable files are skipped, not fatal
            log.warning("skipping %s: %s", path, exc)
            failed += 1
            continue
        resized, _ = resize_sample(image, None, size)
        with torch.no_grad():
            logits, _ = model(torch.from_numpy(resized[None]).to(dtype))
        pred = logits.argmax(dim=1)[0].to(torch.float32)
        if pred.shape != image.shape[1:]:
            pred = torch.nn.functional.interpolate(pred[None, None], size=image.shape[1:], mode="nearest")[0, 0]
        mask = pred.numpy().astype(np.uint8)
        mask_path = out / f"{path.stem}.png"
        Image.fromarray(mask, mode="L").save(mask_path)
        paths.append(str(mask_path))
        if args.overlay:
            overlay_path = out / f"{path.stem}_overlay.png"
            Image.fromarray(overlay(image, mask), mode="RGB").save(overlay_path)
            paths.append(str(overlay_path))
    summary = f"wrote {len(paths)} files to {out}" + (f"; {failed} unreadable input(s) skipped" if failed else "")
    return CommandResult(1 if failed else 0, summary, paths)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="crossseg", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="generate a synthetic two-lip dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-labeled", type=int, default=4, help="labeled training images")
    p.add_argument("--num-unlabeled", type=int, default=16, help="unlabeled training images")
    p.add_argument("--num-val", type=int, default=4, help="labeled validation images")
    p.add_argument("--size", type=parse_size, default=(64, 64),
                   help=f"image size HxW, both divisible by {SIZE_MULTIPLE}")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--noise-sigma", type=float, default=0.1, help="std of additive background noise")
    p.set_defaults(func=cmd_synthgen)

    d = config_mod.TrainConfig()
    opt = d.optimizer
    p = sub.add_parser(
        "train", help="train the CNN / transformer pair", formatter_class=fmt,
        epilog=(f"config defaults: lr0={opt.lr0}, momentum={opt.momentum}, weight_decay={opt.weight_decay}, "
                f"max_iters={opt.max_iters}, poly_power={opt.poly_power}, batch={d.batch.labeled}+{d.batch.unlabeled}, "
                f"lambda_max={d.ramp.lambda_max}, ramp_iters={d.ramp.ramp_iters}, "
                f"temperature={d.contrastive.temperature}, eval_every={d.eval_every}. "
                "Use --print-config to see the full effective configuration."),
    )
    p.add_argument("--config", required=True, help="YAML file with TrainConfig fields")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-iters", type=int, default=None,
                   help=f"override optimizer.max_iters (config default {opt.max_iters})")
    p.add_argument("--seed", type=int, default=None, help=f"override seed (config default {d.seed})")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="DSC / HD / time of the chosen network", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=["val", "test"], default="val")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--csv", default=None, help="optional per-sample CSV path")
    p.add_argument("--hd95", action="store_true", help="report the 95th percentile HD instead of the maximum")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write predicted masks (and overlays)", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overlay", action="store_true",
                   help=f"also write RGB overlays (class 1 red, class 2 blue, alpha {OVERLAY_ALPHA})")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(num_threads())
    try:
        result = args.func(args)
    except UsageError as exc:
        print(f"crossseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"crossseg {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    print(result.summary)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
