"""Training protocol: frozen/unfrozen transfer learning, progressive resizing,
one-cycle learning rate, reduce-on-plateau, best-model checkpointing and
early stopping, all driven by AdamW.

Determinism holds for a fixed seed with the single-process data path used
here.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .architecture import freeze_encoder, image_to_tensor, save_weights, trainable_parameters
from .degradation import read_manifest
from .errors import ConfigError, EmptyDatasetError, ParamError, SplitError
from .imaging import load_image
from .perceptual_loss import LossConfig, PerceptualLoss

log = logging.getLogger(__name__)


@dataclass
class Phase:
    image_size: int
    epochs: int
    batch_size: int = 8
    max_lr: float = 1e-3
    encoder_frozen: bool = False


@dataclass
class OneCycleConfig:
    pct_start: float = 0.25
    div_start: float = 25.0
    div_final: float = 1e4


@dataclass
class PlateauConfig:
    patience: int = 3
    factor: float = 0.5
    min_delta: float = 0.0


@dataclass
class EarlyStopConfig:
    patience: int = 6
    min_delta: float = 0.0


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-2


def default_phases() -> list[Phase]:
    return [
        Phase(image_size=64, epochs=10, batch_size=8, max_lr=1e-3, encoder_frozen=True),
        Phase(image_size=128, epochs=10, batch_size=8, max_lr=1e-4, encoder_frozen=False),
        Phase(image_size=256, epochs=10, batch_size=8, max_lr=1e-4, encoder_frozen=False),
    ]


@dataclass
class TrainConfig:
    phases: list[Phase] = field(default_factory=default_phases)
    one_cycle: OneCycleConfig = field(default_factory=OneCycleConfig)
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.phases:
            raise ConfigError("at least one training phase is required")
        prev = 0
        for i, ph in enumerate(self.phases):
            if ph.image_size % 32 or ph.image_size < 32:
                raise ConfigError(f"phases[{i}].image_size must be a positive multiple of 32")
            if ph.image_size < prev:
                raise ConfigError("phase image sizes must be nondecreasing")
            prev = ph.image_size
            if ph.epochs < 1 or ph.batch_size < 1:
                raise ConfigError(f"phases[{i}]: epochs and batch_size must be >= 1")
            if ph.max_lr <= 0:
                raise ConfigError(f"phases[{i}].max_lr must be positive")
        oc = self.one_cycle
        if not 0 < oc.pct_start < 1 or oc.div_start <= 1 or oc.div_final <= 1:
            raise ConfigError("one_cycle needs pct_start in (0,1) and divisors > 1")
        if not 0 < self.plateau.factor < 1 or self.plateau.patience < 1:
            raise ConfigError("plateau needs factor in (0,1) and patience >= 1")
        if self.early_stop.patience < 1:
            raise ConfigError("early_stop.patience must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0,1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    global_step: int = 0
    current_phase: int = 0
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    plateau_wait: int = 0
    lr_scale: float = 1.0
    # running minimum within the current phase; patience counters compare against it
    phase_best_val_loss: float = math.inf
    phase_val_losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def start_phase(self, index: int) -> None:
        self.current_phase = index
        self.phase_best_val_loss = math.inf
        self.phase_val_losses = []
        self.epochs_since_improvement = 0
        self.plateau_wait = 0


# --------------------------------------------------------------------------- #
# schedule and stopping rules
# --------------------------------------------------------------------------- #


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.25,
                 div_start: float = 25.0, div_final: float = 1e4) -> float:
    """Cosine warm-up from ``max_lr/div_start`` to ``max_lr``, then cosine
    annealing down to ``max_lr/div_final`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ParamError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(pct_start * total_steps))
    start, end = max_lr / div_start, max_lr / div_final
    if step <= warmup:
        if warmup == 0:
            return max_lr
        t = step / warmup
        return start + (max_lr - start) * (1 - math.cos(math.pi * t)) / 2
    t = (step - warmup) / (total_steps - warmup)
    return max_lr + (end - max_lr) * (1 - math.cos(math.pi * t)) / 2


def plateau_step(state: TrainState, val_loss: float, cfg: PlateauConfig) -> TrainState:
    """Record one epoch's validation loss; shrink ``lr_scale`` after ``patience``
    epochs without improving on the phase minimum by more than ``min_delta``."""
    improved = val_loss < state.phase_best_val_loss - cfg.min_delta
    if improved:
        state.plateau_wait = 0
    else:
        state.plateau_wait += 1
        if state.plateau_wait >= cfg.patience:
            state.lr_scale *= cfg.factor
            state.plateau_wait = 0
    state.phase_val_losses.append(float(val_loss))
    state.phase_best_val_loss = min(state.phase_best_val_loss, val_loss)
    state.best_val_loss = min(state.best_val_loss, val_loss)
    return state


def early_stop_check(state: TrainState, cfg: EarlyStopConfig) -> bool:
    best, since = math.inf, 0
    for v in state.phase_val_losses:
        if v < best - cfg.min_delta:
            since = 0
        else:
            since += 1
        best = min(best, v)
    state.epochs_since_improvement = since
    return since >= cfg.patience


def checkpoint_best(state: TrainState, model, val_loss: float, path, metadata: dict | None = None) -> bool:
    """Save ``model`` if ``val_loss`` beats every loss seen so far; returns whether it saved.

    Call before :func:`plateau_step`, which folds ``val_loss`` into the minimum.
    """
    if not val_loss < state.best_val_loss:
        return False
    meta = {"global_step": state.global_step, "val_loss": float(val_loss)}
    meta.update(metadata or {})
    save_weights(model, path, meta)
    return True


# --------------------------------------------------------------------------- #
# data
# --------------------------------------------------------------------------- #


def split_by_target(pairs: list[dict], fraction: float, seed: int) -> tuple[list[dict], list[dict]]:
    """Hold out whole targets so that all variants of a source stay on one side."""
    targets = sorted({p["target"] for p in pairs})
    if len(targets) < 2:
        raise SplitError(f"need at least 2 distinct targets to split, got {len(targets)}")
    n_val = min(max(1, int(round(fraction * len(targets)))), len(targets) - 1)
    rng = np.random.Generator(np.random.Philox(seed))
    val_targets = {targets[i] for i in rng.permutation(len(targets))[:n_val]}
    train = [p for p in pairs if p["target"] not in val_targets]
    val = [p for p in pairs if p["target"] in val_targets]
    if not val:
        raise SplitError("validation split is empty")
    return train, val


def load_pairs(pairs: list[dict], root) -> list[tuple[torch.Tensor, torch.Tensor]]:
    root = Path(root)
    return [
        (image_to_tensor(load_image(root / p["degraded"]))[0], image_to_tensor(load_image(root / p["target"]))[0])
        for p in pairs
    ]


def resize_batch(images: list[torch.Tensor], size: int) -> torch.Tensor:
    out = []
    for img in images:
        if img.shape[-2:] != (size, size):
            img = F.interpolate(img[None], size=(size, size), mode="bilinear", align_corners=False,
                                antialias=True)[0]
        out.append(img.clamp(0.0, 1.0))
    return torch.stack(out)


class PairSet:
    """In-memory degraded/target tensors, resized per phase."""

    def __init__(self, pairs: list[tuple[torch.Tensor, torch.Tensor]]):
        self.pairs = pairs
        self.size = None
        self.inputs = self.targets = None

    def __len__(self):
        return len(self.pairs)

    def resize(self, size: int) -> None:
        if size != self.size:
            self.inputs = resize_batch([p[0] for p in self.pairs], size)
            self.targets = resize_batch([p[1] for p in self.pairs], size)
            self.size = size


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield torch.from_numpy(np.asarray(idx[i:i + batch_size]))


@torch.no_grad()
def evaluate_loss(model, loss_fn, data: PairSet, batch_size: int) -> float:
    model.eval()
    total = 0.0
    for b in _batches(len(data), batch_size):
        total += float(loss_fn(model(data.inputs[b]), data.targets[b])) * len(b)
    return total / len(data)


# --------------------------------------------------------------------------- #
# fit
# --------------------------------------------------------------------------- #


def write_history(history: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    with open(out_dir / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])


def fit(model, manifest_path, config: TrainConfig, out_dir=None, checkpoint_path=None,
        history: list[dict] | None = None, best_val_loss: float = math.inf):
    """Run every phase of ``config`` on the pairs listed in ``manifest_path``.

    Returns ``(state, checkpoint_path)``. ``history``/``best_val_loss`` let a
    resumed run append to an earlier one. When ``out_dir`` is given,
    ``history.json``/``history.csv`` are rewritten after every epoch and the
    checkpoint defaults to ``out_dir/best``.
    """
    manifest = read_manifest(manifest_path)
    if not manifest["pairs"]:
        raise EmptyDatasetError(f"{manifest_path} lists no pairs")
    if checkpoint_path is None:
        if out_dir is None:
            raise ParamError("fit needs out_dir or checkpoint_path")
        checkpoint_path = Path(out_dir) / "best"
    checkpoint_path = Path(checkpoint_path)

    train_meta, val_meta = split_by_target(manifest["pairs"], config.validation_fraction, config.seed)
    root = Path(manifest_path).parent
    train_set, val_set = PairSet(load_pairs(train_meta, root)), PairSet(load_pairs(val_meta, root))
    loss_fn = PerceptualLoss(config.loss)
    rng = np.random.Generator(np.random.Philox(config.seed))
    torch.manual_seed(config.seed)

    state = TrainState(best_val_loss=best_val_loss, history=list(history or []))

    for pi, phase in enumerate(config.phases):
        state.start_phase(pi)
        train_set.resize(phase.image_size)
        val_set.resize(phase.image_size)
        freeze_encoder(model, phase.encoder_frozen)
        a = config.adam
        opt = torch.optim.AdamW(trainable_parameters(model), lr=phase.max_lr, betas=(a.beta1, a.beta2),
                                eps=a.epsilon, weight_decay=a.weight_decay)
        steps_per_epoch = math.ceil(len(train_set) / phase.batch_size)
        total_steps = phase.epochs * steps_per_epoch
        oc = config.one_cycle
        step = 0
        for ep in range(phase.epochs):
            model.train()
            lr_scale = state.lr_scale
            running, lr = 0.0, 0.0
            for b in _batches(len(train_set), phase.batch_size, rng.permutation(len(train_set))):
                lr = one_cycle_lr(step, total_steps, phase.max_lr, oc.pct_start, oc.div_start, oc.div_final) * lr_scale
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad(set_to_none=True)
                loss = loss_fn(model(train_set.inputs[b]), train_set.targets[b])
                loss.backward()
                opt.step()
                running += loss.item() * len(b)
                step += 1
                state.global_step += 1
            train_loss = running / len(train_set)
            val_loss = evaluate_loss(model, loss_fn, val_set, phase.batch_size)

            record = {
                "epoch": len(state.history) + 1,
                "phase": pi,
                "phase_epoch": ep + 1,
                "image_size": phase.image_size,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": lr,
                "lr_scale": lr_scale,
                "max_lr": phase.max_lr,
                # lr above is the value used at this phase-local step
                "step": step - 1,
                "total_steps": total_steps,
            }
            state.history.append(record)
            checkpoint_best(state, model, val_loss, checkpoint_path,
                            {"epoch": record["epoch"], "phase": pi, "image_size": phase.image_size})
            plateau_step(state, val_loss, config.plateau)
            stop = early_stop_check(state, config.early_stop)
            log.info("epoch %d phase %d size %d train %.5f val %.5f lr %.3g",
                     record["epoch"], pi, phase.image_size, train_loss, val_loss, lr)
            if out_dir is not None:
                write_history(state.history, out_dir)
            if stop:
                log.info("early stop in phase %d after %d epochs", pi, ep + 1)
                break
    return state, checkpoint_path
