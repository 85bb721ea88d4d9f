"""Line Feature booster head built from bilateral dynamic line extractors."""
from __future__ import annotations

import torch
import torch.nn as nn

from .core_ops import DynamicConv2d
from .data import downsample_mask
from .errors import ConfigError
from .losses import seg_loss


class DynamicLineExtractor(nn.Module):
    """Parallel 1xN and Nx1 dynamic convs, concat, then 1x1 conv + BN + ReLU."""

    def __init__(self, in_channels: int, kernel_length: int, mid_channels: int | None = None,
                 out_channels: int | None = None, num_experts: int = 4, temperature: float = 30.0):
        super().__init__()
        if kernel_length < 1 or kernel_length % 2 == 0:
            raise ConfigError(f"line kernel length must be odd and positive, got {kernel_length}")
        mid = mid_channels or in_channels
        out = out_channels or in_channels
        self.kernel_length = kernel_length
        self.dyn_h = DynamicConv2d(in_channels, mid, (1, kernel_length), num_experts, temperature=temperature)
        self.dyn_v = DynamicConv2d(in_channels, mid, (kernel_length, 1), num_experts, temperature=temperature)
        self.fuse = nn.Conv2d(2 * mid, out, 1, bias=False)
        self.norm = nn.BatchNorm2d(out)

    def features(self, x):
        return torch.cat([self.dyn_h(x), self.dyn_v(x)], dim=1)

    def forward(self, x):
        return torch.relu(self.norm(self.fuse(self.features(x))))


def dle_forward(x: torch.Tensor, dle: DynamicLineExtractor) -> torch.Tensor:
    return dle(x)


class LFHead(nn.Module):
    """Three extractors -> 1x1 fusion -> concat with input -> 1x1 classifier to 2 logits."""

    def __init__(self, in_channels: int, dle_lengths=(3, 7, 11), num_experts: int = 4,
                 temperature: float = 30.0, alpha: float = 1.0, beta: float = 0.4):
        super().__init__()
        dle_lengths = tuple(dle_lengths)
        if len(dle_lengths) != 3:
            raise ConfigError(f"an LF head uses exactly three extractors, got lengths {dle_lengths}")
        self.dles = nn.ModuleList(
            DynamicLineExtractor(in_channels, n, num_experts=num_experts, temperature=temperature)
            for n in dle_lengths)
        self.fuse = nn.Conv2d(3 * in_channels, in_channels, 1, bias=False)
        self.classifier = nn.Conv2d(2 * in_channels, 2, 1)
        self.alpha = alpha
        self.beta = beta

    def logits(self, feats):
        lines = self.fuse(torch.cat([d(feats) for d in self.dles], dim=1))
        return self.classifier(torch.cat([lines, feats], dim=1))

    def forward(self, feats, gt_mask, alpha: float | None = None, beta: float | None = None):
        alpha = self.alpha if alpha is None else alpha
        beta = self.beta if beta is None else beta
        return lf_loss(self.logits(feats), gt_mask, alpha, beta)


def lf_head_forward(feats: torch.Tensor, head: LFHead) -> torch.Tensor:
    return head.logits(feats)


def lf_loss(aux_logits: torch.Tensor, gt_mask: torch.Tensor, alpha: float = 1.0, beta: float = 0.4):
    """Seg loss of auxiliary logits against the block-max downsampled mask. Returns (total, ce, dice)."""
    factor = gt_mask.shape[-1] // aux_logits.shape[-1]
    target = downsample_mask(gt_mask, factor) if factor > 1 else gt_mask
    return seg_loss(aux_logits, target, alpha, beta)
