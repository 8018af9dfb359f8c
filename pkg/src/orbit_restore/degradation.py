"""Synthetic degradation of clean images into supervised training pairs.

Every clean image yields ``variants_per_image`` degraded copies, all paired
with the same target. Randomness comes from numpy's counter-based Philox
bit generator, seeded per variant with :func:`variant_seed`, so each
variant is reproducible on its own and independent of iteration order.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyDatasetError, NotFound, ParamError
from .imaging import as_image, ensure_dir, list_images, load_image, save_image

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Fixed application order: optics first, then sensor response, then sensor noise.
DEGRADATION_ORDER = ("motion_blur", "gaussian_blur", "exposure", "noise")

# half-sample symmetric reflection (c b a | a b c); an impulse at the center of a
# (2r+1)-wide image never folds back into the kernel support
PAD_MODE = "reflect"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def variant_seed(seed: int, source_index: int, variant_index: int) -> int:
    """64-bit sub-seed: first 8 bytes (little-endian) of BLAKE2b("seed:i:j")."""
    digest = hashlib.blake2b(f"{seed}:{source_index}:{variant_index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# --------------------------------------------------------------------------- #
# primitive degradations
# --------------------------------------------------------------------------- #


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian of size ``2*ceil(3*sigma)+1``."""
    if sigma < 0:
        raise ParamError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones((1, 1))
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x[None, :] ** 2 + x[:, None] ** 2) / (2 * sigma**2))
    return g / g.sum()


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if kernel.shape == (1, 1):
        return img.copy()
    out = np.empty_like(img)
    # flip so this is a true convolution; all kernels here are symmetric anyway
    k = kernel[::-1, ::-1]
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.correlate(img[:, :, c], k, mode=PAD_MODE)
    return np.clip(out, 0.0, 1.0)


def gaussian_blur(img, sigma: float) -> np.ndarray:
    img = as_image(img)
    return _convolve(img, gaussian_kernel(sigma))


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Rasterized, normalized line segment of ``length`` pixels at ``angle`` degrees.

    The segment passes through the kernel center; angle 0 is horizontal and
    angles grow counter-clockwise.
    """
    if length < 1:
        raise ParamError(f"motion blur length must be >= 1, got {length}")
    length = int(round(length))
    half = (length - 1) / 2.0
    r = int(math.ceil(half))
    size = 2 * r + 1
    k = np.zeros((size, size))
    theta = math.radians(angle)
    ts = np.linspace(-half, half, 8 * length + 1)
    cols = np.rint(r + ts * math.cos(theta)).astype(int)
    rows = np.rint(r - ts * math.sin(theta)).astype(int)
    k[rows, cols] = 1.0
    return k / k.sum()


def motion_blur(img, length: int, angle: float) -> np.ndarray:
    img = as_image(img)
    return _convolve(img, motion_kernel(length, angle))


def adjust_exposure(img, gain: float, gamma: float) -> np.ndarray:
    """``clamp(gain * img**gamma)``; gain > 1 overexposes, gain < 1 underexposes."""
    if gain <= 0 or gamma <= 0:
        raise ParamError(f"gain and gamma must be positive, got gain={gain} gamma={gamma}")
    img = as_image(img)
    return np.clip(gain * np.power(img, gamma), 0.0, 1.0)


def add_gaussian_noise(img, sigma: float, seed: int) -> np.ndarray:
    """Additive i.i.d. Gaussian noise drawn from ``Philox(seed)``, then clamped."""
    if sigma < 0:
        raise ParamError(f"noise sigma must be >= 0, got {sigma}")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    noise = make_rng(seed).normal(0.0, sigma, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


# --------------------------------------------------------------------------- #
# recipes
# --------------------------------------------------------------------------- #


@dataclass
class GaussianBlurSpec:
    probability: float = 0.5
    sigma_range: tuple[float, float] = (0.5, 3.0)


@dataclass
class MotionBlurSpec:
    probability: float = 0.5
    length_range: tuple[float, float] = (3, 15)
    angle_range: tuple[float, float] = (0.0, 180.0)


@dataclass
class ExposureSpec:
    probability: float = 0.5
    gain_range: tuple[float, float] = (0.3, 2.5)
    gamma_range: tuple[float, float] = (0.6, 1.6)


@dataclass
class NoiseSpec:
    probability: float = 0.5
    sigma_range: tuple[float, float] = (0.01, 0.08)


@dataclass
class DegradationRecipe:
    seed: int = 0
    gaussian_blur: GaussianBlurSpec = field(default_factory=GaussianBlurSpec)
    motion_blur: MotionBlurSpec = field(default_factory=MotionBlurSpec)
    exposure: ExposureSpec = field(default_factory=ExposureSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    variants_per_image: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        specs = {
            "gaussian_blur": self.gaussian_blur,
            "motion_blur": self.motion_blur,
            "exposure": self.exposure,
            "noise": self.noise,
        }
        for name, spec in specs.items():
            if not 0.0 <= spec.probability <= 1.0:
                raise ParamError(f"{name}.probability must be in [0, 1]")
            for f in dataclasses.fields(spec):
                if f.name.endswith("_range"):
                    lo, hi = getattr(spec, f.name)
                    if lo > hi:
                        raise ParamError(f"{name}.{f.name}: low {lo} exceeds high {hi}")
        if self.gaussian_blur.sigma_range[0] < 0:
            raise ParamError("gaussian_blur.sigma_range must be >= 0")
        if self.motion_blur.length_range[0] < 1:
            raise ParamError("motion_blur.length_range must be >= 1")
        a_lo, a_hi = self.motion_blur.angle_range
        if a_lo < 0 or a_hi > 180:
            raise ParamError("motion_blur.angle_range must lie within [0, 180]")
        if self.exposure.gain_range[0] <= 0 or self.exposure.gamma_range[0] <= 0:
            raise ParamError("exposure gain/gamma ranges must be positive")
        if self.noise.sigma_range[0] < 0:
            raise ParamError("noise.sigma_range must be >= 0")
        if self.variants_per_image < 1:
            raise ParamError("variants_per_image must be >= 1")
        if all(s.probability == 0 for s in specs.values()):
            raise ParamError("at least one degradation needs a nonzero probability")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self, dict_factory=lambda kv: {k: list(v) if isinstance(v, tuple) else v
                                                                  for k, v in kv})


@dataclass
class DegradationRecord:
    source_image: str
    variant_index: int
    sub_seed: int
    applied: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "source_image": self.source_image,
            "variant_index": self.variant_index,
            "sub_seed": self.sub_seed,
            "applied": [dict(a) for a in self.applied],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecord":
        return cls(
            source_image=d["source_image"],
            variant_index=int(d["variant_index"]),
            sub_seed=int(d["sub_seed"]),
            applied=[dict(a) for a in d["applied"]],
        )


def _apply_one(img: np.ndarray, step: dict) -> np.ndarray:
    kind = step["kind"]
    if kind == "motion_blur":
        return motion_blur(img, step["length"], step["angle"])
    if kind == "gaussian_blur":
        return gaussian_blur(img, step["sigma"])
    if kind == "exposure":
        return adjust_exposure(img, step["gain"], step["gamma"])
    if kind == "noise":
        return add_gaussian_noise(img, step["sigma"], step["seed"])
    raise ParamError(f"unknown degradation kind {kind!r}")


def replay(img, record: DegradationRecord) -> np.ndarray:
    """Re-apply the exact parameters stored in ``record``."""
    out = as_image(img)
    for step in record.applied:
        out = _apply_one(out, step)
    return out


def sample_degradations(recipe: DegradationRecipe, rng: np.random.Generator) -> list[dict]:
    specs = {
        "motion_blur": recipe.motion_blur,
        "gaussian_blur": recipe.gaussian_blur,
        "exposure": recipe.exposure,
        "noise": recipe.noise,
    }
    # resample until at least one degradation is picked
    while True:
        chosen = [k for k in DEGRADATION_ORDER if rng.random() < specs[k].probability]
        if chosen:
            break

    steps = []
    for kind in chosen:
        spec = specs[kind]
        if kind == "motion_blur":
            length = int(round(rng.uniform(*spec.length_range)))
            angle = float(rng.uniform(*spec.angle_range))
            steps.append({"kind": kind, "length": max(length, 1), "angle": angle})
        elif kind == "gaussian_blur":
            steps.append({"kind": kind, "sigma": float(rng.uniform(*spec.sigma_range))})
        elif kind == "exposure":
            steps.append({
                "kind": kind,
                "gain": float(rng.uniform(*spec.gain_range)),
                "gamma": float(rng.uniform(*spec.gamma_range)),
            })
        else:
            steps.append({
                "kind": kind,
                "sigma": float(rng.uniform(*spec.sigma_range)),
                "seed": int(rng.integers(0, 2**63)),
            })
    return steps


def apply_recipe(img, recipe: DegradationRecipe, sub_seed: int, *, source_image: str = "",
                 variant_index: int = 0) -> tuple[np.ndarray, DegradationRecord]:
    rng = make_rng(sub_seed)
    record = DegradationRecord(
        source_image=source_image,
        variant_index=variant_index,
        sub_seed=int(sub_seed),
        applied=sample_degradations(recipe, rng),
    )
    return replay(img, record), record


# --------------------------------------------------------------------------- #
# dataset build
# --------------------------------------------------------------------------- #


def build_dataset(clean_dir, out_dir, recipe: DegradationRecipe, workers: int = 1) -> dict:
    """Write degraded/target pairs plus ``manifest.json`` into ``out_dir``.

    Targets are re-encoded as PNG under ``targets/``; degraded variants go to
    ``degraded/<stem>_v<j>.png``. Paths in the manifest are relative to
    ``out_dir``. The manifest is assembled in sorted source order whatever
    the worker count.
    """
    sources = list_images(clean_dir)
    if not sources:
        raise EmptyDatasetError(f"no decodable images in {clean_dir}")
    out_dir = ensure_dir(out_dir)
    ensure_dir(out_dir / "targets")
    ensure_dir(out_dir / "degraded")

    def work(item):
        i, src = item
        img = load_image(src)
        target_rel = f"targets/{src.stem}.png"
        save_image(img, out_dir / target_rel)
        pairs = []
        for j in range(recipe.variants_per_image):
            degraded, record = apply_recipe(
                img, recipe, variant_seed(recipe.seed, i, j),
                source_image=target_rel, variant_index=j,
            )
            degraded_rel = f"degraded/{src.stem}_v{j}.png"
            save_image(degraded, out_dir / degraded_rel)
            pairs.append({"degraded": degraded_rel, "target": target_rel, "record": record.to_dict()})
        return pairs

    stems = [s.stem for s in sources]
    if len(set(stems)) != len(stems):
        raise ParamError("clean_dir contains images whose names differ only by extension")

    items = list(enumerate(sources))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]

    manifest = {
        "version": MANIFEST_VERSION,
        "recipe": recipe.to_dict(),
        "pairs": [p for group in results for p in group],
    }
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such manifest: {path}")
    manifest = json.loads(path.read_text())
    if "pairs" not in manifest:
        raise ParamError(f"{path} is not a dataset manifest")
    return manifest
