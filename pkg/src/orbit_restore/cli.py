"""Command-line entry point: ``orbit-restore <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from .architecture import build_model, forward, load_weights
from .config import RunConfig, load_run_config, write_resolved
from .degradation import build_dataset
from .errors import ConfigError, OrbitRestoreError
from .evaluation import comparison_cells, evaluate, make_grid, save_grid
from .imaging import ensure_dir, is_image_file, list_images, load_image, save_image
from .training import fit
from .weights import convert_torch_checkpoint

log = logging.getLogger("orbit_restore")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def _identity(img):
    return img


def cmd_degrade(args) -> int:
    cfg = _config(args)
    clean = args.clean_dir or cfg.paths.clean_dir
    out = args.out_dir or cfg.paths.out_dir
    if not clean or not out:
        raise UsageError("--clean-dir and --out-dir are required (or paths.clean_dir/out_dir in the config)")
    manifest = build_dataset(clean, out, cfg.degrade, workers=args.workers)
    write_resolved(cfg, out)
    print(f"wrote {len(manifest['pairs'])} pairs to {Path(out) / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = args.manifest or cfg.paths.manifest
    out = args.out_dir or cfg.paths.out_dir
    if not manifest or not out:
        raise UsageError("--manifest and --out-dir are required")
    out = ensure_dir(out)
    write_resolved(cfg, out)
    history, best = [], math.inf
    if args.resume:
        model = load_weights(args.resume, build_model_no_pretrain(cfg))
        best = float(model.archive_metadata.get("val_loss", math.inf))
        hist_path = out / "history.json"
        if hist_path.is_file():
            history = json.loads(hist_path.read_text())
    else:
        model = build_model(cfg.model)
    state, path = fit(model, manifest, cfg.train, out_dir=out, history=history, best_val_loss=best)
    print(f"trained {len(state.history)} epochs; best val loss {state.best_val_loss:.6f}; weights in {path}")
    return 0


def build_model_no_pretrain(cfg: RunConfig):
    # resumed weights replace the encoder, so the pretrained archive is not needed
    return build_model(dataclasses.replace(cfg.model, pretrained=False))


def _load_enhancer(args):
    if args.identity:
        return _identity
    if not args.weights:
        raise UsageError("--weights is required (or --identity)")
    return load_weights(args.weights)


def cmd_enhance(args) -> int:
    model = _load_enhancer(args)
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        files = list_images(src)
        ensure_dir(dst)
        targets = [dst / (f.stem + ".png") for f in files]
    else:
        files = [src]
        targets = [dst / (src.stem + ".png")] if dst.is_dir() or not is_image_file(dst) else [dst]
        ensure_dir(targets[0].parent)
    for f, t in zip(files, targets):
        img = load_image(f)
        out = img if model is _identity else forward(model, img)
        save_image(out, t)
    print(f"enhanced {len(files)} image(s)")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_enhancer(args)
    report = evaluate(model, args.manifest, args.out_dir)
    agg = report["aggregates"]
    print(f"{report['count']} pairs; mean psnr in {agg['psnr_in']['mean']} out {agg['psnr_out']['mean']}")
    return 0


def cmd_grid(args) -> int:
    if args.methods_dir:
        if not args.image or not args.methods:
            raise UsageError("--methods-dir needs --image and --methods")
        cells = comparison_cells(args.methods_dir, args.image, args.methods.split(","))
        labels = args.methods.split(",")
    else:
        cells = [Path(c) for c in args.cells or []]
        labels = args.labels.split(",") if args.labels else None
    if args.rows < 1 or args.cols < 1 or len(cells) != args.rows * args.cols:
        raise UsageError(f"{len(cells)} cells do not fill a {args.rows}x{args.cols} grid")
    imgs = [load_image(c) for c in cells]
    rows = [imgs[r * args.cols:(r + 1) * args.cols] for r in range(args.rows)]
    ensure_dir(Path(args.out).parent)
    grid = make_grid(rows, labels, (args.cell_size, args.cell_size))
    save_grid(grid, args.out, labels, args.rows, args.cols)
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} grid to {args.out}")
    return 0


def cmd_import_weights(args) -> int:
    path = convert_torch_checkpoint(args.checkpoint, args.out, args.kind)
    print(f"wrote {args.kind} archive to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orbit-restore", description="Space image enhancement pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("degrade", help="build a degraded/target dataset")
    s.add_argument("--config")
    s.add_argument("--clean-dir")
    s.add_argument("--out-dir")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train on a dataset manifest")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--out-dir")
    s.add_argument("--resume", help="weight archive to start from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="enhance an image or a directory of images")
    s.add_argument("--weights")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--identity", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", help="PSNR/SSIM report over a manifest")
    s.add_argument("--weights")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--identity", action="store_true", help="score an identity model (test hook)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grid", help="tile images into a comparison figure")
    s.add_argument("--cells", nargs="*", help="image files, row-major")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cell-size", type=int, default=128)
    s.add_argument("--labels", help="comma-separated labels for the legend sidecar")
    s.add_argument("--methods-dir", help="directory holding one subdirectory per method")
    s.add_argument("--methods", help="comma-separated method subdirectories, in grid order")
    s.add_argument("--image", help="file name to pick from each method directory")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("import-weights", help="convert a torchvision checkpoint into the archive format")
    s.add_argument("checkpoint")
    s.add_argument("--kind", choices=("resnet34", "vgg16"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OrbitRestoreError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
