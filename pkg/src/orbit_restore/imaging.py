"""Image I/O and reference fidelity metrics.

Images live in memory as ``float64`` numpy arrays of shape ``(H, W, 3)``
with values in ``[0, 1]``.
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DecodeError, IoError, NotFound, ShapeError, SizeError

PSNR_INF = math.inf

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def as_image(arr) -> np.ndarray:
    """Validate and coerce ``arr`` into the canonical image layout."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"empty image of shape {img.shape}")
    return img


def from_uint8(data: np.ndarray) -> np.ndarray:
    return as_image(np.asarray(data, dtype=np.float64) / 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1"):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            data = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return from_uint8(data)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as an 8-bit PNG (or whatever the suffix selects)."""
    path = Path(path)
    if not path.parent.is_dir():
        raise IoError(f"parent directory does not exist: {path.parent}")
    data = to_uint8(as_image(img))
    try:
        Image.fromarray(data, mode="RGB").save(path, format=_format_for(path))
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _format_for(path: Path) -> str:
    ext = path.suffix.lower()
    if ext in (".jpg", ".jpeg"):
        return "JPEG"
    return "PNG"


def is_image_file(path) -> bool:
    return Path(path).suffix.lower() in (".png", ".jpg", ".jpeg")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFound(f"no such directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and is_image_file(p))


def _check_pair(a, b):
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio with peak 1.0; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)


def to_luma(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def ssim(a, b) -> float:
    """Mean SSIM over the luminance channel.

    Uses an 11x11 Gaussian window (sigma 1.5), ``valid`` windows only.
    """
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise SizeError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}px SSIM window")
    x = to_luma(a)
    y = to_luma(b)
    w = _gaussian_window()

    def filt(z):
        z = ndimage.correlate1d(z, w, axis=0, mode="constant")
        z = ndimage.correlate1d(z, w, axis=1, mode="constant")
        r = SSIM_WINDOW // 2
        return z[r:-r, r:-r]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create directory {path}: {exc}") from exc
    return path
