"""Tversky-family objectives for slice-wise and volumetric segmentation.

All functions accept torch tensors and stay differentiable with respect to
the predictions, so they can sit directly in a training graph. Predictions
are probabilities in [0, 1]; ground truths are binary {0, 1} maps of the
same shape. Class-aware functions expect the class axis first: (C, *spatial).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the focal Tversky objective and the joint phase-2 loss.

    alpha weighs false negatives, beta false positives; they must sum to 1.
    gamma is the focal exponent (loss term is (1 - TI)^(1/gamma)).
    lambda_2d scales the slice-loss term inside the joint objective.
    include_background controls whether class 0 contributes to multi-class
    losses (excluded by default).
    """

    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 4.0 / 3.0
    epsilon: float = 1e-8
    lambda_2d: float = 0.2
    include_background: bool = False

    def __post_init__(self):
        if not math.isclose(self.alpha + self.beta, 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise ConfigError(f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
    with torch.no_grad():
        if pred.numel() and (pred.min() < 0 or pred.max() > 1):
            raise ValueError("predictions must lie in [0, 1]")
        if gt.numel() and not torch.all((gt == 0) | (gt == 1)):
            raise ValueError("ground truth must be binary {0, 1}")


def tversky_index(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Overlap index over all elements, treating the pair as a single class.

    TI = (sum p1*g1 + eps) / (sum p1*g1 + alpha*sum p0*g1 + beta*sum p1*g0 + eps)
    with p0 = 1 - p1, g0 = 1 - g1. Returns a scalar tensor in (0, 1].
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    _check_pair(pred, gt)
    tp = (pred * gt).sum()
    fn = ((1.0 - pred) * gt).sum()
    fp = (pred * (1.0 - gt)).sum()
    return (tp + cfg.epsilon) / (tp + cfg.alpha * fn + cfg.beta * fp + cfg.epsilon)


def _selected_classes(num_classes: int, cfg: LossConfig) -> range:
    if num_classes == 1 or cfg.include_background:
        return range(num_classes)
    return range(1, num_classes)


def focal_tversky_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Sum over classes of (1 - TI_c)^(1/gamma); zero iff every class is perfect.

    Inputs are (C, *spatial); C = 1 for the binary task. The index is clamped
    to [epsilon, 1] before the power so gradients stay finite.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    _check_pair(pred, gt)
    if pred.ndim < 2:
        raise ShapeError("expected a class axis: (C, *spatial)")
    total = pred.new_zeros(())
    for c in _selected_classes(pred.shape[0], cfg):
        ti = tversky_index(pred[c], gt[c], cfg).clamp(cfg.epsilon, 1.0)
        total = total + (1.0 - ti) ** (1.0 / cfg.gamma)
    return total


def _per_sample_mean(loss_fn, pred, gt, cfg, expected_ndim: int) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.ndim == expected_ndim + 1:  # leading batch axis
        if pred.shape[0] == 0:
            raise ShapeError("empty batch")
        terms = [loss_fn(pred[i], gt[i], cfg) for i in range(pred.shape[0])]
        return torch.stack(terms).mean()
    if pred.ndim != expected_ndim:
        raise ShapeError(f"expected {expected_ndim}D (C, *spatial) or batched input, got ndim={pred.ndim}")
    return loss_fn(pred, gt, cfg)


def loss_2d(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Focal Tversky over one slice (C, H, W) or a batch (N, C, H, W) of slices."""
    return _per_sample_mean(focal_tversky_loss, pred, gt, cfg, expected_ndim=3)


def loss_3d(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Focal Tversky over one volume (C, D, H, W) or a batch (N, C, D, H, W)."""
    return _per_sample_mean(focal_tversky_loss, pred, gt, cfg, expected_ndim=4)


def joint_objective(
    slice_losses: Sequence[torch.Tensor],
    volume_loss: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Phase-2 objective: lambda_2d * mean(slice losses) + volume loss."""
    if len(slice_losses) == 0:
        raise ContractError("joint objective requires at least one slice loss")
    mean_2d = torch.stack([torch.as_tensor(l) for l in slice_losses]).mean()
    return cfg.lambda_2d * mean_2d + torch.as_tensor(volume_loss)


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Soft Dice loss, kept as a comparison option for ablation runs."""
    half = LossConfig(alpha=0.5, beta=0.5, gamma=1.0, epsilon=cfg.epsilon,
                      lambda_2d=cfg.lambda_2d, include_background=cfg.include_background)
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    _check_pair(pred, gt)
    if pred.ndim < 2:
        raise ShapeError("expected a class axis: (C, *spatial)")
    total = pred.new_zeros(())
    for c in _selected_classes(pred.shape[0], half):
        total = total + (1.0 - tversky_index(pred[c], gt[c], half))
    return total


def dice_bce_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Dice plus binary cross-entropy, the other comparison option."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    bce = torch.nn.functional.binary_cross_entropy(pred.clamp(1e-7, 1 - 1e-7), gt)
    return dice_loss(pred, gt, cfg) + bce


LOSSES = {
    "focal_tversky": (loss_2d, loss_3d),
    "dice": (lambda p, g, c: _per_sample_mean(dice_loss, p, g, c, 3),
             lambda p, g, c: _per_sample_mean(dice_loss, p, g, c, 4)),
    "dice_bce": (lambda p, g, c: _per_sample_mean(dice_bce_loss, p, g, c, 3),
                 lambda p, g, c: _per_sample_mean(dice_bce_loss, p, g, c, 4)),
}
