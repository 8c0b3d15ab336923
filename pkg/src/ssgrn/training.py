"""Whole-image iterative training: masked cross entropy, SGD with momentum
and weight decay, polynomial learning-rate decay, validation monitoring.

One iteration is one full-image forward/backward; there is no batching.
Weight decay applies to conv and projection weights only, never to
normalization affines or biases.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import metrics
from .data import HsiCube, LabelMap, SplitSpec, standardize
from .losses import cross_entropy_masked  # re-export; canonical home
from .model import SSGRN, pad_to_even, total_loss
from .tensor import Tensor, no_grad

__all__ = [
    "TrainConfig", "TrainingDiverged", "cross_entropy_masked", "poly_lr",
    "sgd_step", "train", "save_history", "HistoryEntry", "prepare_inputs",
]


class TrainingDiverged(RuntimeError):
    """The loss left the finite range; training cannot continue."""


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_iter: int = 1000
    power: float = 0.9
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.base_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive, momentum/decay nonnegative")
        if self.max_iter < 0 or self.power <= 0 or self.eval_every <= 0:
            raise ValueError("max_iter must be >= 0, power and eval_every positive")


@dataclass
class HistoryEntry:
    iteration: int
    lr: float
    loss: float
    val_oa: float | None = None


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iter/max_iter) ** power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    no_decay: set[str] = frozenset(),
) -> None:
    """v <- momentum*v + (g + wd*w); w <- w - lr*v. Velocity persists in the
    caller-owned dict. Every parameter must have a gradient."""
    for name, p in params.items():
        if name not in grads or grads[name] is None:
            raise ValueError(f"parameter {name} has no gradient")
        g = grads[name]
        if weight_decay > 0 and name not in no_decay:
            g = g + weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        velocity[name] = v
        p.data = p.data - lr * v


def prepare_inputs(
    cube: HsiCube, labels: LabelMap | None, dtype=np.float32
) -> tuple[Tensor, np.ndarray | None, tuple[int, int]]:
    """Standardize, pad to even extents (pad pixels stay unlabeled), wrap."""
    std = standardize(cube)
    values = pad_to_even(std.values).astype(dtype)
    image = Tensor(values)
    padded_labels = None
    if labels is not None:
        padded_labels = pad_to_even(labels.labels)
    return image, padded_labels, (cube.height, cube.width)


def _pad_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    out[: mask.shape[0], : mask.shape[1]] = mask
    return out


def validation_oa(model: SSGRN, image: Tensor, labels: LabelMap, split: SplitSpec) -> float:
    from .model import predict_map

    pred = predict_map(model, image, out_hw=(labels.height, labels.width))
    cm = metrics.accumulate(pred, labels.labels, split.mask("val"), model.config.classes)
    return metrics.oa(cm)


def train(
    model: SSGRN,
    cube: HsiCube,
    labels: LabelMap,
    split: SplitSpec,
    config: TrainConfig,
) -> list[HistoryEntry]:
    """Run ``config.max_iter`` full-image steps and return the history.

    Every step: forward, per-branch masked cross entropy on the train subset,
    backward, momentum-SGD update at the poly-decayed rate. Validation OA is
    recorded every ``eval_every`` steps; it never influences the updates.
    """
    image, padded_labels, _ = prepare_inputs(cube, labels, dtype=model.dtype)
    train_mask = _pad_mask(split.mask("train"), padded_labels.shape)
    params = model.parameters()
    no_decay = model.no_decay_names()
    velocity: dict[str, np.ndarray] = {}
    history: list[HistoryEntry] = []
    variant = model.config.variant
    for it in range(config.max_iter):
        model.zero_grad()
        out = model.forward(image)
        losses = model.branch_losses(out, padded_labels, train_mask)
        loss = total_loss(variant, losses)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite loss {loss_value} at iteration {it}")
        loss.backward()
        lr = poly_lr(config.base_lr, it, config.max_iter, config.power)
        grads = {name: p.grad for name, p in params.items()}
        sgd_step(params, grads, velocity, lr, config.momentum, config.weight_decay, no_decay)
        model.iteration += 1
        entry = HistoryEntry(iteration=it, lr=lr, loss=loss_value)
        if (it + 1) % config.eval_every == 0 or it + 1 == config.max_iter:
            if split.mask("val").any():
                with no_grad():
                    entry.val_oa = validation_oa(model, image, labels, split)
        history.append(entry)
    return history


def save_history(path, history: list[HistoryEntry]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "loss", "val_oa"])
        for entry in history:
            val = "" if entry.val_oa is None else f"{entry.val_oa:.6f}"
            writer.writerow([entry.iteration, f"{entry.lr:.8g}", f"{entry.loss:.8g}", val])
