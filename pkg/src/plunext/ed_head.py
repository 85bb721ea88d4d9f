"""Edge Detail booster head: seg-map projection, edge-space conversion and edge loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_ops import edge_stack
from .data import downsample_mask
from .errors import ConfigError, ContractError
from .losses import distribution_loss


@dataclass(frozen=True)
class EdLossWeights:
    alpha: float = 1.0
    beta: float = 0.4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("edge loss weights must be nonnegative")


class EdgeSpaceConverter(nn.Module):
    """Fixed edge kernels -> convex 1x1 fusion -> BatchNorm -> per-pixel softmax.

    Each output channel's three fusion weights are a softmax over raw logits,
    so the fused map is always a convex reweighting of the three edge maps.
    """

    def __init__(self, init_diag: float = 2.0):
        super().__init__()
        self.fusion_logits = nn.Parameter(init_diag * torch.eye(3))
        self.norm = nn.BatchNorm2d(3)

    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.fusion_logits, dim=1)

    def forward(self, x):
        stack = edge_stack(x)
        fused = F.conv2d(stack, self.fusion_weights().view(3, 3, 1, 1))
        return torch.softmax(self.norm(fused), dim=1)


def edge_space_convert(x: torch.Tensor, converter: EdgeSpaceConverter) -> torch.Tensor:
    return converter(x)


def ed_loss(pred_map: torch.Tensor, gt_mask: torch.Tensor, converter: EdgeSpaceConverter,
            weights: EdLossWeights = EdLossWeights()):
    """alpha * CE + beta * Dice between converted prediction and converted mask.

    Both sides go through the same converter; the mask itself carries no
    gradient. Returns (total, ce, dice).
    """
    if pred_map.dim() != 4 or pred_map.shape[1] != 1:
        raise ContractError(f"expected (B, 1, H, W) prediction, got {tuple(pred_map.shape)}")
    if gt_mask.shape != (pred_map.shape[0],) + tuple(pred_map.shape[2:]):
        raise ContractError(f"mask {tuple(gt_mask.shape)} does not match prediction {tuple(pred_map.shape)}")
    x_hat = converter(pred_map)
    y_hat = converter(gt_mask.to(pred_map.dtype).unsqueeze(1))
    return distribution_loss(x_hat, y_hat, weights.alpha, weights.beta)


class EDHead(nn.Module):
    """Booster head for encoder stage 1 or 2."""

    def __init__(self, in_channels: int, weights: EdLossWeights = EdLossWeights()):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, 1, 1)
        self.converter = EdgeSpaceConverter()
        self.weights = weights

    def project(self, feats):
        return torch.sigmoid(self.proj(feats))

    def forward(self, feats, gt_mask, weights: EdLossWeights | None = None):
        pred = self.project(feats)
        factor = gt_mask.shape[-1] // pred.shape[-1]
        target = downsample_mask(gt_mask, factor) if factor > 1 else gt_mask
        return ed_loss(pred, target, self.converter, weights or self.weights)


def ed_project(feats: torch.Tensor, head: EDHead) -> torch.Tensor:
    return head.project(feats)
