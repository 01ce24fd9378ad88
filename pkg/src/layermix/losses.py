"""Segmentation losses, their gradients w.r.t. probabilities, and scalar schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import ShapeError

DICE_EPS = 1e-5
PROB_FLOOR = 1e-12


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return (np.asarray(labels)[..., None] == np.arange(num_classes)).astype(np.float64)


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape[:-1] != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    if target.size and (target.max() >= pred.shape[-1] or target.min() < 0):
        bad = int(target.max()) if target.max() >= pred.shape[-1] else int(target.min())
        raise ShapeError(f"target class {bad} out of range for {pred.shape[-1]} classes")
    # class-major views keep the per-class voxel sums contiguous for forward() outputs
    return np.moveaxis(pred, -1, 0), target


def _flat(per_class, target):
    k = per_class.shape[0]
    return np.ascontiguousarray(per_class.reshape(k, -1)), np.ascontiguousarray(target, dtype=np.int64).reshape(-1)


def _dice_terms(flat, t, eps):
    inter, mass, count = _kernels.dice_terms(flat, t)
    return inter, mass + count + eps


def soft_dice_loss(pred, target, eps: float = DICE_EPS) -> float:
    """1 - class-mean soft Dice; sums run over every voxel of the batch, background included."""
    flat, t = _flat(*_check(pred, target))
    inter, denom = _dice_terms(flat, t, eps)
    return float(1.0 - np.mean((2.0 * inter + eps) / denom))


def _dice_fill(flat, t, eps, scale, out):
    """Write ``scale`` times the soft Dice gradient into ``out``; returns the loss."""
    inter, denom = _dice_terms(flat, t, eps)
    k = flat.shape[0]
    ratio = (2.0 * inter + eps) / denom
    _kernels.dice_grad(t, scale * ratio / denom / k, scale * 2.0 / denom / k, out)
    return float(1.0 - ratio.mean())


def _ce_loss(pt) -> float:
    return float(-np.log(np.maximum(pt, PROB_FLOOR)).mean())


def soft_dice_loss_grad(pred, target, eps: float = DICE_EPS):
    """Soft Dice loss together with its gradient w.r.t. ``pred``."""
    per_class, target = _check(pred, target)
    flat, t = _flat(per_class, target)
    grad = np.empty(flat.shape)
    loss = _dice_fill(flat, t, eps, 1.0, grad)
    return loss, np.moveaxis(grad.reshape(per_class.shape), 0, -1)


def soft_dice_grad(pred, target, eps: float = DICE_EPS) -> np.ndarray:
    return soft_dice_loss_grad(pred, target, eps)[1]


def cross_entropy_loss(pred, target) -> float:
    flat, t = _flat(*_check(pred, target))
    return _ce_loss(_kernels.target_probs(flat, t))


def cross_entropy_loss_grad(pred, target):
    """Mean CE with the probability floor; the gradient is zero where the floor is active."""
    per_class, target = _check(pred, target)
    flat, t = _flat(per_class, target)
    pt = _kernels.target_probs(flat, t)
    grad = np.zeros(flat.shape)
    _kernels.add_ce_grad(pt, t, PROB_FLOOR, 1.0, grad)
    return _ce_loss(pt), np.moveaxis(grad.reshape(per_class.shape), 0, -1)


def cross_entropy_grad(pred, target) -> np.ndarray:
    return cross_entropy_loss_grad(pred, target)[1]


def displacement_loss(pred, target) -> float:
    return 0.5 * cross_entropy_loss(pred, target) + 0.5 * soft_dice_loss(pred, target)


def displacement_loss_grad(pred, target):
    """Hybrid 0.5 CE + 0.5 Dice with its gradient, accumulated into one array."""
    per_class, target = _check(pred, target)
    flat, t = _flat(per_class, target)
    grad = np.empty(flat.shape)
    dice = _dice_fill(flat, t, DICE_EPS, 0.5, grad)
    pt = _kernels.target_probs(flat, t)
    _kernels.add_ce_grad(pt, t, PROB_FLOOR, 0.5, grad)
    return 0.5 * _ce_loss(pt) + 0.5 * dice, np.moveaxis(grad.reshape(per_class.shape), 0, -1)


def displacement_grad(pred, target) -> np.ndarray:
    return displacement_loss_grad(pred, target)[1]


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    lambda_disp: float = 0.25

    @property
    def beta(self) -> float:
        return self.alpha * self.lambda_disp


def total_loss(labeled: float, unlabeled: float, disp: float, weights: LossWeights) -> float:
    return labeled + weights.alpha * unlabeled + weights.beta * disp


@dataclass(frozen=True)
class ScheduleConfig:
    max_iters: int
    rampup_iters: int = 17000
    lambda_u_max: float = 1.0
    ema_decay: float = 0.99
    base_lr: float = 0.01
    lr_pow: float = 0.9

    def __post_init__(self):
        if self.max_iters < 1 or self.rampup_iters < 1 or self.base_lr <= 0 or self.lr_pow <= 0:
            raise ValueError("schedule constants must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.lambda_u_max < 0:
            raise ValueError("lambda_u_max must be nonnegative")


def consistency_rampup(iteration: int, cfg: ScheduleConfig) -> float:
    """Gaussian-shaped ramp exp(-5 (1 - t/T)^2) scaled to lambda_u_max, flat after T."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    phase = 1.0 - min(iteration / cfg.rampup_iters, 1.0)
    return cfg.lambda_u_max * math.exp(-5.0 * phase * phase)


def poly_lr(iteration: int, cfg: ScheduleConfig) -> float:
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iters) ** cfg.lr_pow


def ema_update(teacher: np.ndarray, student: np.ndarray, decay: float) -> np.ndarray:
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher shape {teacher.shape} does not match student shape {student.shape}")
    return decay * teacher + (1.0 - decay) * student
