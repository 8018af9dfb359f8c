"""UNet with a 34-layer residual encoder and ICNR pixel-shuffle decoder."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigMismatch, NotFound, ParamError, ShapeError, SizeError, WeightsUnavailable
from .imaging import as_image
from .weights import assign_tensors, module_tensors, read_archive, write_archive

ALIGNMENT = 32
CACHE_ENV = "ORBIT_RESTORE_WEIGHTS_CACHE"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# (stride, channels) of the five encoder activation stages at width 1.
ENCODER_STAGES = ((2, 64), (4, 64), (8, 128), (16, 256), (32, 512))
RESNET34_BLOCKS = (3, 4, 6, 3)


@dataclass
class ModelConfig:
    pretrained: bool = True
    # channel multiplier for encoder and decoder; pretrained weights need 1.0
    width: float = 1.0
    decoder_widths: tuple[int, ...] = (256, 128, 64, 32)
    input_mean: tuple[float, float, float] = IMAGENET_MEAN
    input_std: tuple[float, float, float] = IMAGENET_STD
    init_seed: int = 0

    def __post_init__(self):
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.input_mean = tuple(float(v) for v in self.input_mean)
        self.input_std = tuple(float(v) for v in self.input_std)
        if len(self.decoder_widths) != 4:
            raise ParamError("decoder needs exactly 4 up-blocks, one per skip stage")
        if self.width <= 0:
            raise ParamError("width must be positive")
        if self.pretrained and self.width != 1.0:
            raise ParamError("pretrained encoder weights exist only for width 1.0")
        if len(self.input_mean) != 3 or len(self.input_std) != 3 or min(self.input_std) <= 0:
            raise ParamError("input_mean/input_std need three entries with positive std")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def architecture_hash(self) -> str:
        """Hash of the fields that decide parameter names and shapes."""
        arch = {k: v for k, v in self.to_dict().items() if k not in ("pretrained", "init_seed")}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width)))


# --------------------------------------------------------------------------- #
# sub-pixel convolution
# --------------------------------------------------------------------------- #


def pixel_shuffle(feat: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange ``(N, C*r*r, H, W)`` into ``(N, C, r*H, r*W)``.

    ``out[c, r*y+dy, r*x+dx] = in[c*r*r + dy*r + dx, y, x]``.
    """
    n, c, h, w = feat.shape
    if c % (r * r):
        raise ShapeError(f"{c} channels are not divisible by r^2 = {r * r}")
    out_c = c // (r * r)
    x = feat.reshape(n, out_c, r, r, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, out_c, h * r, w * r)


def icnr_init(weight: torch.Tensor, r: int, base_init=nn.init.kaiming_normal_) -> torch.Tensor:
    """ICNR: every group of r^2 output channels is a copy of one base kernel.

    After a pixel shuffle this makes the layer behave like nearest-neighbour
    upsampling of the base convolution, which removes checkerboard artefacts
    at initialization. ``weight`` is filled in place and returned.
    """
    out_c = weight.shape[0]
    if out_c % (r * r):
        raise ShapeError(f"{out_c} output channels are not divisible by r^2 = {r * r}")
    base = torch.empty((out_c // (r * r),) + tuple(weight.shape[1:]), dtype=weight.dtype)
    base_init(base)
    with torch.no_grad():
        weight.copy_(base.repeat_interleave(r * r, dim=0))
    return weight


class PixelShuffleICNR(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, scale: int = 2):
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv2d(in_ch, out_ch * scale * scale, kernel_size=1)
        icnr_init(self.conv.weight, scale)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return pixel_shuffle(self.conv(x), self.scale)


# --------------------------------------------------------------------------- #
# encoder (parameter names follow torchvision's resnet34)
# --------------------------------------------------------------------------- #


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet34Encoder(nn.Module):
    """Returns the five activation stages listed in ``ENCODER_STAGES``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = [cfg.scaled(c) for _, c in ENCODER_STAGES[1:]]
        self.stage_channels = [cfg.scaled(ENCODER_STAGES[0][1])] + widths
        stem = self.stage_channels[0]
        self.conv1 = nn.Conv2d(3, stem, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        in_ch = stem
        for i, (n_blocks, out_ch) in enumerate(zip(RESNET34_BLOCKS, widths)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, out_ch, stride)]
            blocks += [BasicBlock(out_ch, out_ch) for _ in range(n_blocks - 1)]
            setattr(self, f"layer{i + 1}", nn.Sequential(*blocks))
            in_ch = out_ch
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        s1 = self.relu(self.bn1(self.conv1(x)))
        s2 = self.layer1(self.maxpool(s1))
        s3 = self.layer2(s2)
        s4 = self.layer3(s3)
        s5 = self.layer4(s4)
        return [s1, s2, s3, s4, s5]


# --------------------------------------------------------------------------- #
# decoder
# --------------------------------------------------------------------------- #


def conv_bn_relu(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.in_channels = out_ch + skip_ch
        self.shuf = PixelShuffleICNR(in_ch, out_ch)
        self.conv1 = conv_bn_relu(out_ch + skip_ch, out_ch)
        self.conv2 = conv_bn_relu(out_ch, out_ch)

    def forward(self, x, skip):
        x = self.shuf(x)
        x = torch.cat([x, skip], dim=1)
        return self.conv2(self.conv1(x))


class URes34P(nn.Module):
    """Residual-encoder UNet producing a sigmoid image in [0, 1].

    Accepts ``(N, 3, H, W)`` tensors with values in [0, 1] and H, W >= 32;
    sizes that are not multiples of 32 are reflect-padded and cropped back.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = ResNet34Encoder(cfg)
        self.register_buffer("mean", torch.tensor(cfg.input_mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(cfg.input_std).view(1, 3, 1, 1), persistent=False)
        skips = self.encoder.stage_channels[:4][::-1]
        in_ch = self.encoder.stage_channels[4]
        widths = [cfg.scaled(w) for w in cfg.decoder_widths]
        blocks = []
        for skip_ch, out_ch in zip(skips, widths):
            blocks.append(UpBlock(in_ch, skip_ch, out_ch))
            in_ch = out_ch
        self.decoder = nn.ModuleList(blocks)
        self.final_up = PixelShuffleICNR(in_ch, in_ch)
        self.head = nn.Conv2d(in_ch, 3, 3, padding=1)
        self.encoder_frozen = False
        # test hook: multiplies every skip tensor (0 disables skips)
        self.skip_scale = 1.0

    def forward(self, x):
        h, w = x.shape[-2:]
        if h < ALIGNMENT or w < ALIGNMENT:
            raise SizeError(f"input {h}x{w} is smaller than the {ALIGNMENT}px minimum")
        ph, pw = (-h) % ALIGNMENT, (-w) % ALIGNMENT
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        stages = self.encoder((x - self.mean) / self.std)
        y = stages[4]
        for block, skip in zip(self.decoder, stages[3::-1]):
            y = block(y, skip * self.skip_scale)
        y = torch.sigmoid(self.head(self.final_up(y)))
        return y[..., :h, :w]

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and self.encoder_frozen:
            self.encoder.eval()
        return self

    def encoder_parameters(self):
        return list(self.encoder.parameters())


# --------------------------------------------------------------------------- #
# public operations
# --------------------------------------------------------------------------- #


def weights_cache_dir() -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def load_pretrained_encoder(model: URes34P) -> None:
    cache = weights_cache_dir()
    if cache is None:
        raise WeightsUnavailable(f"pretrained=true but ${CACHE_ENV} is not set")
    try:
        tensors, _ = read_archive(cache / "resnet34")
    except NotFound as exc:
        raise WeightsUnavailable(f"no resnet34 archive under {cache}") from exc
    assign_tensors(model.encoder, tensors)


def build_model(config: ModelConfig | None = None) -> URes34P:
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed)
        model = URes34P(config)
    if config.pretrained:
        load_pretrained_encoder(model)
    return model


def freeze_encoder(model: URes34P, frozen: bool) -> None:
    """Exclude (or re-include) encoder weights and running statistics from training."""
    model.encoder_frozen = bool(frozen)
    for p in model.encoder.parameters():
        p.requires_grad_(not frozen)
    if frozen:
        model.encoder.eval()
    elif model.training:
        model.encoder.train()


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def image_to_tensor(img) -> torch.Tensor:
    img = as_image(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().double().squeeze(0).numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


def forward(model: URes34P, img, mode: str = "eval") -> np.ndarray:
    """Enhance one ``(H, W, 3)`` image and return it in the same layout."""
    if mode not in ("train", "eval"):
        raise ParamError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.set_grad_enabled(mode == "train"):
            out = model(image_to_tensor(img).to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)
    return tensor_to_image(out)


def save_weights(model: URes34P, path, metadata: dict | None = None) -> Path:
    meta = {"model_config": model.config.to_dict()}
    meta.update(metadata or {})
    return write_archive(path, module_tensors(model), model.config.architecture_hash(), meta)


def load_weights(path, model: URes34P | None = None) -> URes34P:
    """Load an archive into ``model``, or into a fresh model built from its metadata."""
    tensors, header = read_archive(path)
    if model is None:
        cfg_dict = header.get("metadata", {}).get("model_config")
        if cfg_dict is None:
            raise ConfigMismatch(f"archive {path} carries no model_config")
        cfg_dict = dict(cfg_dict, pretrained=False)
        model = URes34P(ModelConfig(**cfg_dict))
    if header["config_hash"] != model.config.architecture_hash():
        raise ConfigMismatch(
            f"archive config hash {header['config_hash']} != model {model.config.architecture_hash()}"
        )
    assign_tensors(model, tensors)
    model.archive_metadata = header.get("metadata", {})
    return model
