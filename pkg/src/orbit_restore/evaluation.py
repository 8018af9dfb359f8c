"""PSNR/SSIM reports over a dataset manifest and figure-style image grids."""
from __future__ import annotations

import csv
import json
import math
import statistics
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .architecture import URes34P, forward
from .degradation import read_manifest
from .errors import EmptyDatasetError, NotFound, ShapeError
from .imaging import as_image, ensure_dir, load_image, psnr, save_image, ssim

METRIC_COLUMNS = ("psnr_in", "ssim_in", "psnr_out", "ssim_out")
GRID_BACKGROUND = 0.0


def _enhancer(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, URes34P):
        return lambda img: forward(model, img, mode="eval")
    if callable(model):
        return model
    raise TypeError(f"cannot enhance with {type(model).__name__}")


def aggregate(rows: list[dict]) -> dict:
    """Means/medians per metric column; infinite PSNRs are counted, not averaged."""
    out = {}
    for col in METRIC_COLUMNS:
        vals = [r[col] for r in rows if math.isfinite(r[col])]
        out[col] = {
            "mean": float(np.mean(vals)) if vals else None,
            "median": float(statistics.median(vals)) if vals else None,
            "excluded_infinite": len(rows) - len(vals),
        }
    return out


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def evaluate(model, manifest_path, out_dir=None, save_enhanced: bool = True) -> dict:
    """Score inputs and model outputs against their targets.

    ``model`` is a :class:`URes34P` (run in eval mode) or any callable mapping
    an image to an image. Writes ``report.json``/``report.csv`` (and the
    enhanced images under ``enhanced/``) when ``out_dir`` is given.
    """
    manifest = read_manifest(manifest_path)
    pairs = manifest["pairs"]
    if not pairs:
        raise EmptyDatasetError(f"{manifest_path} lists no pairs")
    root = Path(manifest_path).parent
    enhance = _enhancer(model)
    if out_dir is not None:
        out_dir = ensure_dir(out_dir)
        if save_enhanced:
            ensure_dir(out_dir / "enhanced")

    rows = []
    for p in pairs:
        degraded = load_image(root / p["degraded"])
        target = load_image(root / p["target"])
        enhanced = as_image(enhance(degraded))
        rows.append({
            "pair": p["degraded"],
            "psnr_in": psnr(degraded, target),
            "ssim_in": ssim(degraded, target),
            "psnr_out": psnr(enhanced, target),
            "ssim_out": ssim(enhanced, target),
        })
        if out_dir is not None and save_enhanced:
            save_image(enhanced, out_dir / "enhanced" / Path(p["degraded"]).name)

    report = {"per_pair": rows, "aggregates": aggregate(rows), "count": len(rows)}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    doc = {
        "count": report["count"],
        "aggregates": report["aggregates"],
        "per_pair": [{k: _jsonable(v) for k, v in r.items()} for r in report["per_pair"]],
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("pair",) + METRIC_COLUMNS)
        for r in report["per_pair"]:
            w.writerow([r["pair"]] + [repr(r[c]) for c in METRIC_COLUMNS])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"pair": r["pair"], **{c: float(r[c]) for c in METRIC_COLUMNS}}
            for r in csv.DictReader(fh)
        ]


# --------------------------------------------------------------------------- #
# grids
# --------------------------------------------------------------------------- #


def letterbox(img, cell_size: tuple[int, int]) -> np.ndarray:
    """Fit ``img`` inside a black ``cell_size`` cell, preserving aspect ratio."""
    img = as_image(img)
    ch, cw = cell_size
    h, w = img.shape[:2]
    scale = min(ch / h, cw / w)
    nh, nw = max(1, min(ch, int(round(h * scale)))), max(1, min(cw, int(round(w * scale))))
    if (nh, nw) == (h, w):
        resized = img
    else:
        t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
        t = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False, antialias=nh < h or nw < w)
        resized = t[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0)
    cell = np.full((ch, cw, 3), GRID_BACKGROUND)
    y0, x0 = (ch - nh) // 2, (cw - nw) // 2
    cell[y0:y0 + nh, x0:x0 + nw] = resized
    return cell


def make_grid(rows: list[list], labels: list[str] | None = None,
              cell_size: int | tuple[int, int] = 128) -> np.ndarray:
    """Tile ``rows`` (lists of images, all the same length) into one image.

    ``labels`` are not drawn; :func:`save_grid` writes them to a sidecar
    legend file instead.
    """
    if isinstance(cell_size, int):
        cell_size = (cell_size, cell_size)
    if not rows or not rows[0]:
        raise ShapeError("grid needs at least one row and one column")
    n_cols = len(rows[0])
    if any(len(r) != n_cols for r in rows):
        raise ShapeError(f"ragged rows: lengths {[len(r) for r in rows]}")
    if labels is not None and len(labels) not in (n_cols, n_cols * len(rows)):
        raise ShapeError(f"{len(labels)} labels for a {len(rows)}x{n_cols} grid")
    return np.concatenate(
        [np.concatenate([letterbox(img, cell_size) for img in row], axis=1) for row in rows], axis=0
    )


def save_grid(grid: np.ndarray, path, labels: list[str] | None = None, n_rows: int | None = None,
              n_cols: int | None = None) -> Path:
    path = Path(path)
    save_image(grid, path)
    if labels is not None:
        legend = {"rows": n_rows, "cols": n_cols, "labels": list(labels),
                  "order": "row-major, top-left to bottom-right"}
        path.with_suffix(".legend.json").write_text(json.dumps(legend, indent=2) + "\n")
    return path


def figure_rows(manifest_path, model, limit: int | None = None) -> list[list[np.ndarray]]:
    """``[input, target, enhanced]`` rows for the first ``limit`` pairs."""
    manifest = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    enhance = _enhancer(model)
    rows = []
    for p in manifest["pairs"][:limit]:
        x = load_image(root / p["degraded"])
        rows.append([x, load_image(root / p["target"]), enhance(x)])
    return rows


def comparison_cells(methods_dir, image_name: str, methods: list[str]) -> list[Path]:
    """Paths ``methods_dir/<method>/<image_name>`` for externally produced outputs."""
    paths = [Path(methods_dir) / m / image_name for m in methods]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise NotFound(f"missing method outputs: {missing}")
    return paths
