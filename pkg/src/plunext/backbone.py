"""U-shaped encoder-decoder and the full model with detachable booster heads."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import HEAD_NAMES, LossWeights, ModelConfig
from .ed_head import EDHead, EdLossWeights
from .errors import ContractError
from .lf_head import LFHead
from .losses import LossBundle, seg_loss


class StageFeatures(NamedTuple):
    s1: torch.Tensor  # H/2
    s2: torch.Tensor  # H/4
    s3: torch.Tensor  # H/8
    s4: torch.Tensor  # H/16
    bottleneck: torch.Tensor  # H/32


def conv_bn_relu(cin, cout, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(conv_bn_relu(cin, cout), conv_bn_relu(cout, cout))


class MixBlock(nn.Module):
    """Pointwise projection, depthwise spatial mixing and an expanded channel MLP.

    Light convolutional stand-in for a tokenized-MLP stage; both mixers are residual.
    """

    def __init__(self, cin, cout, mlp_ratio=4):
        super().__init__()
        hidden = cout * mlp_ratio
        self.proj = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))
        self.spatial = nn.Sequential(nn.Conv2d(cout, cout, 3, padding=1, groups=cout, bias=False),
                                     nn.BatchNorm2d(cout), nn.GELU())
        self.mlp = nn.Sequential(
            nn.Conv2d(cout, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden),
            nn.GELU(),
            nn.Conv2d(hidden, cout, 1),
            nn.BatchNorm2d(cout),
        )

    def forward(self, x):
        x = self.proj(x)
        x = x + self.spatial(x)
        return F.relu(x + self.mlp(x))


def _up(x, ref):
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class UNeXtBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        c1, c2, c3, c4 = cfg.stage_channels
        cb = cfg.bottleneck_channels
        r = cfg.mlp_ratio
        self.input_skip = cfg.input_skip
        self.enc1 = ConvBlock(cfg.in_channels, c1)
        self.enc2 = ConvBlock(c1, c2)
        self.enc3 = MixBlock(c2, c3, r)
        self.enc4 = MixBlock(c3, c4, r)
        self.enc5 = MixBlock(c4, cb, r)
        self.dec4 = MixBlock(cb + c4, c4, r)
        self.dec3 = MixBlock(c4 + c3, c3, r)
        self.dec2 = conv_bn_relu(c3 + c2, c2)
        self.dec1 = conv_bn_relu(c2 + c1, c1)
        self.dec0 = conv_bn_relu(c1 + (cfg.in_channels if cfg.input_skip else 0), c1)
        self.classifier = nn.Conv2d(c1, cfg.num_classes, 1)

    def encode(self, image) -> StageFeatures:
        if image.dim() != 4:
            raise ContractError(f"expected (B, C, H, W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ContractError(f"input size {h}x{w} must be divisible by 32")
        s1 = F.max_pool2d(self.enc1(image), 2)
        s2 = F.max_pool2d(self.enc2(s1), 2)
        s3 = F.max_pool2d(self.enc3(s2), 2)
        s4 = F.max_pool2d(self.enc4(s3), 2)
        b = F.max_pool2d(self.enc5(s4), 2)
        return StageFeatures(s1, s2, s3, s4, b)

    def decode(self, feats: StageFeatures, image=None):
        d = self.dec4(torch.cat([_up(feats.bottleneck, feats.s4), feats.s4], 1))
        d = self.dec3(torch.cat([_up(d, feats.s3), feats.s3], 1))
        d = self.dec2(torch.cat([_up(d, feats.s2), feats.s2], 1))
        d = self.dec1(torch.cat([_up(d, feats.s1), feats.s1], 1))
        size = (feats.s1.shape[-2] * 2, feats.s1.shape[-1] * 2)
        d = F.interpolate(d, size=size, mode="bilinear", align_corners=False)
        if self.input_skip:
            if image is None:
                raise ContractError("decoder configured with an input skip needs the image")
            d = torch.cat([d, image], 1)
        return self.classifier(self.dec0(d))

    def forward(self, image):
        return self.decode(self.encode(image), image)


def encoder_forward(image, backbone: UNeXtBackbone) -> StageFeatures:
    return backbone.encode(image)


def decoder_forward(feats: StageFeatures, backbone: UNeXtBackbone, image=None):
    return backbone.decode(feats, image)


class PLUNeXt(nn.Module):
    """Backbone plus the ED (stages 1-2) and LF (stages 3-4) boosters enabled in ``cfg.heads``.

    Disabled heads are ``None``. Inference only ever runs ``self.backbone``.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        # backbone first so its initialization does not depend on which heads exist
        self.backbone = UNeXtBackbone(cfg)
        c1, c2, c3, c4 = cfg.stage_channels
        self.ed1 = EDHead(c1) if "ed1" in cfg.heads else None
        self.ed2 = EDHead(c2) if "ed2" in cfg.heads else None
        lf_args = (cfg.dle_lengths, cfg.num_experts, cfg.gate_temperature)
        self.lf1 = LFHead(c3, *lf_args) if "lf1" in cfg.heads else None
        self.lf2 = LFHead(c4, *lf_args) if "lf2" in cfg.heads else None

    def heads(self) -> dict[str, nn.Module]:
        return {n: getattr(self, n) for n in HEAD_NAMES if getattr(self, n) is not None}

    def forward_train(self, image, gt_mask, weights: LossWeights = LossWeights()) -> LossBundle:
        if gt_mask.shape != (image.shape[0],) + tuple(image.shape[-2:]):
            raise ContractError(f"mask {tuple(gt_mask.shape)} does not match image {tuple(image.shape)}")
        feats = self.backbone.encode(image)
        logits = self.backbone.decode(feats, image)
        comps = {"l_decode": seg_loss(logits, gt_mask, weights.alpha, weights.beta)[0]}
        edw = EdLossWeights(weights.alpha, weights.beta)
        if self.ed1 is not None:
            comps["l_ed1"] = self.ed1(feats.s1, gt_mask, edw)[0]
        if self.ed2 is not None:
            comps["l_ed2"] = self.ed2(feats.s2, gt_mask, edw)[0]
        if self.lf1 is not None:
            comps["l_lf1"] = self.lf1(feats.s3, gt_mask, weights.alpha, weights.beta)[0]
        if self.lf2 is not None:
            comps["l_lf2"] = self.lf2(feats.s4, gt_mask, weights.alpha, weights.beta)[0]
        return LossBundle.combine(comps, weights.head_weights())

    @torch.no_grad()
    def forward_infer(self, image):
        """Returns (mask, probabilities) from the decode branch alone; model must be in eval mode."""
        if self.backbone.training:
            raise ContractError("forward_infer requires eval mode")
        probs = torch.softmax(self.backbone(image), dim=1)
        return probs.argmax(dim=1), probs

    def count_params(self, mode: str = "train") -> int:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        module = self if mode == "train" else self.backbone
        return sum(p.numel() for p in module.parameters())

    def component_params(self) -> dict[str, int]:
        out = {"backbone": sum(p.numel() for p in self.backbone.parameters())}
        for n, h in self.heads().items():
            out[n] = sum(p.numel() for p in h.parameters())
        return out
