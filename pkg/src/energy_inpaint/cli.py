"""Command-line entry points: train, infer, eval, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import IMAGE_SUFFIXES, load_image, load_images, make_masker, save_image
from .energy_net import EnergyNetConfig
from .grid import export_grid
from .inference import InferenceConfig, inpaint
from .metrics import evaluate
from .training import TrainConfig, train

log = logging.getLogger("energy_inpaint")

_ENERGY_KEYS = {f.name for f in fields(EnergyNetConfig)}
_INFER_KEYS = {f.name for f in fields(InferenceConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"inner", "lambda_"} | {"lambda"}


def parse_config(raw: dict) -> tuple[dict, dict, dict]:
    """Split a flat JSON config into energy / inference / train keyword dicts."""
    energy, infer, trn = {}, {}, {}
    for key, value in raw.items():
        if key in _ENERGY_KEYS:
            energy[key] = tuple(value) if key == "stride" and isinstance(value, list) else value
        elif key in _INFER_KEYS:
            infer[key] = value
        elif key in _TRAIN_KEYS:
            trn["lambda_" if key == "lambda" else key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return energy, infer, trn


def _load_pairs(data, mask, fraction, channels):
    images = load_images(data, channels)
    if not images:
        raise SystemExit(f"no images found in {data}")
    masker = make_masker(mask, fraction)
    return [masker(im) for im in images]


def cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    energy_kw, infer_kw, train_kw = parse_config(raw)
    channels = energy_kw.get("input_channels", 1)
    pairs = _load_pairs(args.data, args.mask, args.fraction, channels)
    energy_kw.setdefault("image_side", pairs[0].y.shape[-1])
    net = EnergyNetConfig(**energy_kw)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    cfg = TrainConfig(inner=InferenceConfig(**{**infer_kw, "track_graph": True}), **train_kw)
    log.info("training on %d images, %d outer steps", len(pairs), cfg.M)
    report = train(pairs, cfg, net)
    infer_cfg = InferenceConfig(**{**infer_kw, "track_graph": False, "backtracking": False})
    ckpt = Checkpoint(
        config=net, params=report.params, mean_image=report.mean_image, inference=infer_cfg, adam=report.adam
    )
    save_checkpoint(args.out, ckpt)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss_sum", "loss_per_pixel"])
            for i, (a, b) in enumerate(zip(report.loss_sum, report.loss_per_pixel)):
                w.writerow([i, repr(a), repr(b)])
    print(f"final_loss={np.mean(report.loss_sum[-100:]):.6f}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    src = Path(args.input)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if src.is_dir() else [src]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        x = load_image(f, ckpt.config.input_channels)
        y_hat = inpaint(x, ckpt.params, ckpt.mean_image, ckpt.inference)
        save_image(out / f.name, y_hat)
    print(f"wrote {len(files)} image(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    pairs = _load_pairs(args.data, args.mask, args.fraction, ckpt.config.input_channels)
    report = evaluate(ckpt, pairs, use_composite=args.composite)
    rows = [(p.y, p.x, o) for p, o in list(zip(pairs, report.outputs))[: args.grid_rows]]
    export_grid(rows, args.grid)
    if report.n_perfect:
        log.warning("%d perfect reconstructions left out of the PSNR mean", report.n_perfect)
    print(f"PSNR={report.mean_psnr:.6f}")
    print(f"MSE={report.mean_mse:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    if args.order == 1:
        errs = gc.first_order_suite(args.seed)
    else:
        errs = gc.second_order_checks(args.seed)
        errs.update({f"unrolled.T{T}": gc.unrolled_check(T, args.seed) for T in (1, 2)})
    failed = 0
    for name, err in errs.items():
        if args.order == 1:
            limit = gc.FIRST_ORDER_TOL
        else:
            limit = gc.UNROLLED_TOL if name.startswith("unrolled") else gc.SECOND_ORDER_TOL
        ok = err < limit
        failed += not ok
        print(f"{name}: {err:.3e}{'' if ok else '  FAIL (limit %.0e)' % limit}")
    print(f"max_rel_error={max(errs.values()):.3e}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="energy-inpaint", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="learn energy parameters")
    t.add_argument("--config", help="JSON file of config keys")
    t.add_argument("--data", required=True, help="image directory or IDX file")
    t.add_argument("--mask", choices=["center", "half-left"], default="center")
    t.add_argument("--fraction", type=float, default=0.25)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--report", help="CSV loss curve")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="inpaint images (no mask needed)")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True, help="image file or directory")
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="mean PSNR / MSE on a test set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mask", choices=["center", "half-left"], default="center")
    e.add_argument("--fraction", type=float, default=0.25)
    e.add_argument("--composite", action="store_true", help="paste known pixels back before scoring")
    e.add_argument("--grid", required=True, help="write a ground truth | occluded | result grid here")
    e.add_argument("--grid-rows", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--order", type=int, choices=[1, 2], default=1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
