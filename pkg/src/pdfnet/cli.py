"""Command-line entry point: train, eval, predict, analyze-prior, selftest, make-synthetic."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data, losses, metrics
from .config import RunConfig, field_types, resolve
from .errors import EmptyInput, NotFound, PdfnetError, ShapeError
from .train import (
    model_from_checkpoint,
    predict_dataset,
    resize_map,
    to_uint8,
    to_uint16,
    train,
)

log = logging.getLogger("pdfnet")

EXIT_UNPAIRED = 2


# --------------------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig):
    trainer = train(cfg)
    return trainer


def write_predictions(model, root, out_dir, cfg: RunConfig) -> Path:
    """Run the model over ``root`` and write 8-bit masks at each ground truth's native size."""
    pred_dir = Path(out_dir) / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    ds = data.TripletDataset(root, tuple(cfg.resolution), cfg.patch_grid, augment=False)
    for sid, pred, _, _ in predict_dataset(model, ds):
        native = data.read_mask_png(Path(root) / "masks" / f"{sid}.png").shape
        Image.fromarray(to_uint8(resize_map(pred, native))).save(pred_dir / f"{sid}.png")
    return pred_dir


def cmd_eval(cfg: RunConfig, checkpoint=None, split_dir=None, pred_dir=None, out_dir=None,
             normalize: bool = True, binarize: bool = False) -> metrics.MetricReport:
    """Score a checkpoint on ``split_dir``, or score existing PNGs in ``pred_dir``."""
    split = Path(split_dir or cfg.val_root or cfg.data_root)
    out = Path(out_dir or Path(cfg.out_dir) / "eval")
    gt_dir = split / "masks" if (split / "masks").is_dir() else split
    if pred_dir is None:
        if checkpoint is None:
            raise NotFound("eval needs --checkpoint or --pred-dir")
        model, saved = model_from_checkpoint(checkpoint, cfg)
        pred_dir = write_predictions(model, split, out, saved)
    depth_dir = split / "depths" if (split / "depths").is_dir() else None
    return metrics.evaluate_directory(pred_dir, gt_dir, depth_dir, out, normalize, binarize)


def _load_input(image_path, depth_path, resolution):
    """Return resized image and depth, the native size, and the image and depth read times."""
    t0 = time.perf_counter()
    img = torch.from_numpy(data.read_image_png(Path(image_path))).permute(2, 0, 1)[None].float()
    t1 = time.perf_counter()
    dep = torch.from_numpy(data.read_depth_png(Path(depth_path)))[None, None].float()
    t2 = time.perf_counter()
    native = tuple(img.shape[-2:])
    if tuple(dep.shape[-2:]) != native:
        raise ShapeError(f"image {native} and depth {tuple(dep.shape[-2:])} differ")
    img, dep = data._resize(img, resolution, "bilinear"), data._resize(dep, resolution, "bilinear")
    return img, dep, native, t1 - t0, t2 - t1


def cmd_predict(cfg: RunConfig, checkpoint, image, depth, out_dir=None, repeats: int = 10, warmup: int = 3) -> dict:
    """Single-sample inference; timing is the median over ``repeats`` runs after ``warmup`` runs."""
    model, saved = model_from_checkpoint(checkpoint, cfg)
    res = tuple(saved.resolution)
    data.check_divisible(res, saved.patch_grid)
    img, dep, native, image_time, depth_time = _load_input(image, depth, res)
    times = []
    with torch.no_grad():
        for k in range(warmup + repeats):
            t0 = time.perf_counter()
            out = model(img, dep)
            if k >= warmup:
                times.append(time.perf_counter() - t0)
    mask = resize_map(out.final_prediction[0, 0].double().numpy(), native)
    refined = resize_map(out.final_depth[0, 0].double().numpy(), native)
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image).stem
    mask_path, depth_path = out_dir / f"{stem}_mask.png", out_dir / f"{stem}_depth.png"
    Image.fromarray(to_uint8(mask)).save(mask_path)
    Image.fromarray(to_uint16(refined)).save(depth_path)
    result = {
        "mask": str(mask_path),
        "depth": str(depth_path),
        "image_load_seconds": image_time,
        "depth_load_seconds": depth_time,
        "network_seconds_median": statistics.median(times) if times else float("nan"),
        "repeats": repeats,
        "warmup": warmup,
    }
    result["total_seconds"] = image_time + depth_time + result["network_seconds_median"]
    return result


def _weight_image(x: np.ndarray) -> np.ndarray:
    peak = x.max()
    return to_uint16(x / peak if peak > 0 else np.zeros_like(x))


def cmd_analyze_prior(root, out_dir=None, dump_terms: bool = False, checkpoint=None,
                      cfg: RunConfig | None = None) -> metrics.DepthVarianceReport:
    """Depth variance inside and outside each mask; optionally dump the integrity-prior weight maps.

    Weight maps use ``P = M`` unless a checkpoint is given, in which case its predictions are used.
    """
    root = Path(root)
    ids = data.list_samples(root)
    if not ids:
        raise EmptyInput(f"no samples in {root}")
    depths, masks = [], []
    for sid in ids:
        depths.append(data.read_depth_png(root / "depths" / f"{sid}.png"))
        masks.append(data.read_mask_png(root / "masks" / f"{sid}.png") > 0.5)
    report = metrics.depth_variance_report(depths, masks, ids)
    if out_dir is None:
        return report
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "depth_variance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "var_fg", "var_bg", "var_all"])
        for i, sid in enumerate(ids):
            w.writerow([sid, repr(report.var_fg[i]), repr(report.var_bg[i]), repr(report.var_all[i])])
    (out / "depth_variance.json").write_text(json.dumps(report.summary(), indent=2))
    if dump_terms:
        _dump_terms(root, ids, depths, masks, out / "terms", checkpoint, cfg)
    return report


def _dump_terms(root, ids, depths, masks, out: Path, checkpoint, cfg) -> None:
    out.mkdir(parents=True, exist_ok=True)
    preds = None
    if checkpoint is not None:
        model, saved = model_from_checkpoint(checkpoint, cfg)
        ds = data.TripletDataset(root, tuple(saved.resolution), saved.patch_grid, augment=False)
        preds = {sid: p for sid, p, _, _ in predict_dataset(model, ds)}
    with open(out / "terms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "l_v", "l_g", "l_inte", "max_stability_map", "max_continuity_map"])
        for sid, d, m in zip(ids, depths, masks):
            mt = torch.from_numpy(m.astype(np.float64))[None, None]
            dt = torch.from_numpy(d)[None, None]
            pt = mt if preds is None else torch.from_numpy(resize_map(preds[sid], m.shape))[None, None]
            l_inte, terms = losses.integrity_prior_loss(pt, mt, dt)
            stab = terms.stability_map[0, 0].numpy()
            cont = terms.continuity_map[0, 0].numpy()
            Image.fromarray(_weight_image(stab)).save(out / f"{sid}_stability.png")
            Image.fromarray(_weight_image(cont)).save(out / f"{sid}_continuity.png")
            l_v = float(stab.mean()) if m.any() else 0.0
            l_g = float(cont.mean())
            w.writerow([sid, repr(l_v), repr(l_g), repr(float(l_inte)), repr(float(stab.max())), repr(float(cont.max()))])


def cmd_make_synthetic(out_dir, n: int, resolution, fg_depth_sigma: float, bg_mode: str, seed: int) -> Path:
    return data.make_synthetic_dataset(out_dir, n, tuple(resolution), fg_depth_sigma, bg_mode, seed)


def cmd_selftest(seeds: int = 100) -> bool:
    from .selftest import run_all

    return run_all(seeds)


# --------------------------------------------------------------------------- argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for name in field_types():
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE", default=None)


def _config_from_args(args) -> RunConfig:
    flags = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig)}
    return resolve(args.config, flags)


def _resolution(text: str) -> tuple[int, int]:
    parts = text.replace("x", ",").split(",")
    if len(parts) == 1:
        parts = parts * 2
    return int(parts[0]), int(parts[1])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdfnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a directory of predictions")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split-dir")
    p.add_argument("--pred-dir", help="score existing prediction PNGs instead of running a model")
    p.add_argument("--eval-dir", help="where predictions and reports are written")
    p.add_argument("--no-normalize", action="store_true", help="skip min-max scaling of predictions")
    p.add_argument("--binarize", action="store_true", help="threshold predictions at 0.5 before scoring")

    p = sub.add_parser("predict", help="segment one image")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--output", help="output directory")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("analyze-prior", help="depth variance statistics of a dataset")
    p.add_argument("root")
    p.add_argument("--output")
    p.add_argument("--dump-terms", action="store_true")
    p.add_argument("--checkpoint")

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--seeds", type=int, default=100)

    p = sub.add_parser("make-synthetic", help="write a synthetic dataset")
    p.add_argument("output")
    p.add_argument("-n", "--count", type=int, default=10)
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.add_argument("--fg-depth-sigma", type=float, default=0.02)
    p.add_argument("--bg-mode", choices=data.BG_MODES, default="gradient")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _print_report(report: metrics.MetricReport) -> None:
    print(json.dumps(report.summary(), indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            st = cmd_train(_config_from_args(args)).state
            print(json.dumps({"step": st.step, "epoch": st.epoch, "best_val_mae": st.best_metric}))
        elif args.command == "eval":
            report = cmd_eval(_config_from_args(args), args.checkpoint, args.split_dir, args.pred_dir,
                              args.eval_dir, not args.no_normalize, args.binarize)
            _print_report(report)
            if report.unpaired:
                log.error("unpaired files: %s", ", ".join(report.unpaired))
                return EXIT_UNPAIRED
        elif args.command == "predict":
            print(json.dumps(cmd_predict(_config_from_args(args), args.checkpoint, args.image, args.depth,
                                         args.output, args.repeats, args.warmup), indent=2))
        elif args.command == "analyze-prior":
            report = cmd_analyze_prior(args.root, args.output, args.dump_terms, args.checkpoint)
            print(json.dumps(report.summary(), indent=2))
        elif args.command == "selftest":
            return 0 if cmd_selftest(args.seeds) else 1
        elif args.command == "make-synthetic":
            path = cmd_make_synthetic(args.output, args.count, args.resolution, args.fg_depth_sigma,
                                      args.bg_mode, args.seed)
            print(path)
    except PdfnetError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
