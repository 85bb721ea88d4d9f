from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ContractError

EPS = 1e-6


def soft_dice(p: torch.Tensor, q: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Squared-denominator soft Dice loss, summed over every element."""
    inter = (p * q).sum()
    return 1.0 - (2.0 * inter + eps) / ((p * p).sum() + (q * q).sum() + eps)


def soft_cross_entropy(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over pixels of -sum_c target_c * log(pred_c + eps); channel dim is 1."""
    return -(target * torch.log(pred + eps)).sum(dim=1).mean()


def distribution_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 1.0, beta: float = 0.4):
    """alpha * CE + beta * Dice between two per-pixel distributions. Returns (total, ce, dice)."""
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    ce = soft_cross_entropy(pred, target)
    dice = soft_dice(pred, target)
    return alpha * ce + beta * dice, ce, dice


def seg_loss(logits: torch.Tensor, gt: torch.Tensor, alpha: float = 1.0, beta: float = 0.4):
    """CE on softmaxed logits plus soft Dice on the line channel. Returns (total, ce, dice).

    logits: (B, 2, H, W); gt: (B, H, W) integer labels in {0, 1}.
    """
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ContractError(f"expected (B, 2, H, W) logits, got {tuple(logits.shape)}")
    if gt.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ContractError(f"mask shape {tuple(gt.shape)} does not match logits {tuple(logits.shape)}")
    gt = gt.long()
    ce = F.cross_entropy(logits, gt)
    p_line = torch.softmax(logits, dim=1)[:, 1]
    dice = soft_dice(p_line, gt.to(logits.dtype))
    return alpha * ce + beta * dice, ce, dice


LOSS_NAMES = ("l_decode", "l_ed1", "l_ed2", "l_lf1", "l_lf2")


@dataclass
class LossBundle:
    """The five training losses, their weights (theta, iota, kappa, lambda, mu) and weighted total."""

    l_decode: torch.Tensor
    l_ed1: torch.Tensor
    l_ed2: torch.Tensor
    l_lf1: torch.Tensor
    l_lf2: torch.Tensor
    weights: tuple[float, float, float, float, float]
    total: torch.Tensor

    @classmethod
    def combine(cls, components: dict, weights) -> "LossBundle":
        ref = components["l_decode"]
        values = [components.get(n, ref.new_zeros(())) for n in LOSS_NAMES]
        total = sum(w * v for w, v in zip(weights, values))
        return cls(*values, weights=tuple(float(w) for w in weights), total=total)

    def components(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in LOSS_NAMES}

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.components().items()}
        out["total"] = float(self.total.detach())
        return out
