"""Feature-reconstruction loss on a frozen 16-layer VGG plus an L1 pixel term.

    loss = pixel_weight * mean|pred - target|
         + sum_i layer_weight_i * mean((phi_i(pred) - phi_i(target))**2)
         [+ sum_j style_weight_j * mean((G_j(pred) - G_j(target))**2)]

``phi_i`` are named ReLU activations of the extractor, ``G_j`` their Gram
matrices (off by default).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .architecture import IMAGENET_MEAN, IMAGENET_STD, weights_cache_dir
from .errors import ConfigError, NotFound, ShapeError, WeightsUnavailable
from .weights import assign_tensors, read_archive

VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def _relu_names() -> dict[str, int]:
    """Map ``relu<block>_<conv>`` to its index in the ``features`` sequence."""
    names, idx, block, conv = {}, 0, 1, 0
    for item in VGG16_LAYOUT:
        if item == "M":
            block, conv = block + 1, 0
            idx += 1
        else:
            conv += 1
            names[f"relu{block}_{conv}"] = idx + 1
            idx += 2
    return names


RELU_INDEX = _relu_names()


@dataclass
class LossConfig:
    feature_layers: tuple[str, ...] = ("relu2_2", "relu3_3", "relu4_3")
    layer_weights: tuple[float, ...] = (0.2, 0.7, 0.1)
    pixel_weight: float = 1.0
    pixel_norm: str = "l1"
    style_layers: tuple[str, ...] = ()
    style_weights: tuple[float, ...] = ()
    # "pretrained" reads $ORBIT_RESTORE_WEIGHTS_CACHE/vgg16; "random" is a seeded frozen init
    extractor_weights: str = "pretrained"
    extractor_seed: int = 0
    extractor_width: float = 1.0

    def __post_init__(self):
        self.feature_layers = tuple(self.feature_layers)
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        self.style_layers = tuple(self.style_layers)
        self.style_weights = tuple(float(w) for w in self.style_weights)
        self.validate()

    def validate(self) -> None:
        if len(self.feature_layers) != len(self.layer_weights):
            raise ConfigError("feature_layers and layer_weights differ in length")
        if len(self.style_layers) != len(self.style_weights):
            raise ConfigError("style_layers and style_weights differ in length")
        for name in self.feature_layers + self.style_layers:
            if name not in RELU_INDEX:
                raise ConfigError(f"unknown extractor layer {name!r}")
        weights = (self.pixel_weight,) + self.layer_weights + self.style_weights
        if any(not math.isfinite(w) or w < 0 for w in weights):
            raise ConfigError("loss weights must be finite and nonnegative")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one loss term needs a positive weight")
        if self.pixel_norm != "l1":
            raise ConfigError(f"unsupported pixel_norm {self.pixel_norm!r}")
        if self.extractor_weights not in ("pretrained", "random"):
            raise ConfigError("extractor_weights must be 'pretrained' or 'random'")
        if self.extractor_weights == "pretrained" and self.extractor_width != 1.0:
            raise ConfigError("pretrained extractor weights exist only for width 1.0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def uses_extractor(self) -> bool:
        return any(w > 0 for w in self.layer_weights + self.style_weights)


class VGGFeatures(nn.Module):
    """VGG16 ``features`` stack truncated after the deepest requested ReLU."""

    def __init__(self, depth: int, width: float = 1.0):
        super().__init__()
        layers, in_ch = [], 3
        for item in VGG16_LAYOUT:
            if len(layers) > depth:
                break
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                out_ch = max(1, int(round(item * width)))
                layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=False)]
                in_ch = out_ch
        self.features = nn.Sequential(*layers[: depth + 1])
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x, taps: set[int]) -> dict[int, torch.Tensor]:
        out = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in taps:
                out[i] = x
        return out


def build_extractor(cfg: LossConfig) -> VGGFeatures:
    depth = max(RELU_INDEX[n] for n in cfg.feature_layers + cfg.style_layers) if cfg.uses_extractor() else 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.extractor_seed)
        net = VGGFeatures(depth, cfg.extractor_width)
    if cfg.extractor_weights == "pretrained":
        cache = weights_cache_dir()
        if cache is None:
            raise WeightsUnavailable("pretrained extractor requested but $ORBIT_RESTORE_WEIGHTS_CACHE is not set")
        try:
            tensors, _ = read_archive(cache / "vgg16")
        except NotFound as exc:
            raise WeightsUnavailable(f"no vgg16 archive under {cache}") from exc
        assign_tensors(net, tensors, strict=False)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def gram(feat: torch.Tensor) -> torch.Tensor:
    n, c, h, w = feat.shape
    f = feat.reshape(n, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


class PerceptualLoss(nn.Module):
    """Callable loss module; the extractor is frozen and always in eval mode."""

    def __init__(self, cfg: LossConfig | None = None):
        super().__init__()
        self.cfg = cfg or LossConfig()
        self.extractor = build_extractor(self.cfg) if self.cfg.uses_extractor() else None
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.extractor is not None:
            self.extractor.eval()
        return self

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if pred.shape != target.shape:
            raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
        cfg = self.cfg
        loss = pred.new_zeros(())
        if cfg.pixel_weight > 0:
            loss = loss + cfg.pixel_weight * (pred - target).abs().mean()
        if self.extractor is None:
            return loss

        taps = {RELU_INDEX[n] for n in cfg.feature_layers + cfg.style_layers}
        mean, std = self.mean.to(pred.dtype), self.std.to(pred.dtype)
        fp = self.extractor((pred - mean) / std, taps)
        with torch.no_grad():
            ft = self.extractor((target - mean) / std, taps)
        for name, w in zip(cfg.feature_layers, cfg.layer_weights):
            if w > 0:
                i = RELU_INDEX[name]
                loss = loss + w * F.mse_loss(fp[i], ft[i])
        for name, w in zip(cfg.style_layers, cfg.style_weights):
            if w > 0:
                i = RELU_INDEX[name]
                loss = loss + w * F.mse_loss(gram(fp[i]), gram(ft[i]))
        return loss


def feature_loss(pred, target, cfg: LossConfig | None = None, loss_fn: PerceptualLoss | None = None) -> float:
    """Evaluate the loss on numpy images/batches (``(H, W, 3)`` or ``(N, H, W, 3)``)."""
    loss_fn = loss_fn or PerceptualLoss(cfg)
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} vs target {t.shape}")
    if p.ndim == 3:
        p, t = p[None], t[None]
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).float()
    with torch.no_grad():
        return float(loss_fn(to_t(p), to_t(t)))


def calibrate_batchnorm(model: nn.Module, x: torch.Tensor) -> None:
    """Set every batch-norm running statistic to the exact statistics of ``x``."""
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        model(x)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


class _KinkProbe:
    """Records ReLU on/off masks and max-pool argmax choices during a forward pass."""

    def __init__(self, modules):
        self.patterns: list[torch.Tensor] = []
        self.handles = []
        for m in modules:
            if isinstance(m, nn.ReLU):
                self.handles.append(m.register_forward_hook(self._relu))
            elif isinstance(m, nn.MaxPool2d):
                self.handles.append(m.register_forward_hook(self._pool))

    def _relu(self, module, inputs, output):
        self.patterns.append(output > 0)

    def _pool(self, module, inputs, output):
        _, idx = F.max_pool2d(inputs[0], module.kernel_size, module.stride, module.padding,
                              module.dilation, ceil_mode=module.ceil_mode, return_indices=True)
        self.patterns.append(idx)

    def take(self) -> list[torch.Tensor]:
        out, self.patterns = self.patterns, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def loss_gradient_check(cfg: LossConfig, size: int = 32, n_params: int = 50, step: float = 1e-4,
                        seed: int = 0, width: float = 0.0625, batch: int = 2) -> float:
    """Max relative error between autograd and central-difference gradients.

    Builds a width-reduced restoration network in float64 and perturbs
    ``n_params`` randomly sampled scalar parameters by ``+-step``. Inputs of
    at least 32px go through the full UNet (batch norm calibrated on the
    check batch, then frozen); smaller inputs use a two-layer smooth conv net.

    A sample whose ``+step`` and ``-step`` evaluations switch any ReLU or
    max-pool decision (or the sign of ``pred - target``) straddles a point where the loss is not differentiable;
    it is discarded and another parameter drawn. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    from .architecture import ModelConfig, build_model

    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, 3, size, size, generator=gen, dtype=torch.float64)
    y = torch.rand(batch, 3, size, size, generator=gen, dtype=torch.float64)

    if size >= 32:
        model = build_model(ModelConfig(pretrained=False, width=width, init_seed=seed)).double()
        calibrate_batchnorm(model, x)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = nn.Sequential(
                nn.Conv2d(3, 4, 3, padding=1), nn.Tanh(), nn.Conv2d(4, 3, 3, padding=1), nn.Sigmoid()
            ).double()
        model.eval()

    loss_fn = PerceptualLoss(cfg).double()
    params = [p for p in model.parameters() if p.requires_grad]
    modules = list(model.modules()) + (list(loss_fn.extractor.modules()) if loss_fn.extractor else [])
    probe = _KinkProbe(modules)

    def objective():
        pred = model(x)
        # |pred - target| is the one kink outside the network modules
        probe.patterns.append(torch.sign(pred - y))
        return loss_fn(pred, y)

    model.zero_grad()
    objective().backward()
    probe.take()
    grads = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    bounds = np.cumsum(sizes)
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(int(sizes.sum()))

    worst, checked = 0.0, 0
    try:
        with torch.no_grad():
            for k in order:
                if checked == n_params:
                    break
                pi = int(np.searchsorted(bounds, k, side="right"))
                off = int(k - (bounds[pi - 1] if pi else 0))
                view = params[pi].view(-1)
                orig = view[off].item()
                view[off] = orig + step
                f_plus = objective().item()
                pat_plus = probe.take()
                view[off] = orig - step
                f_minus = objective().item()
                pat_minus = probe.take()
                view[off] = orig
                if any(not torch.equal(a, b) for a, b in zip(pat_plus, pat_minus)):
                    continue
                numeric = (f_plus - f_minus) / (2 * step)
                analytic = grads[pi].view(-1)[off].item()
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, rel)
                checked += 1
    finally:
        probe.close()
    return worst
