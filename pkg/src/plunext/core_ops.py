"""Fixed edge kernels and the dynamic (expert-mixture) convolution primitive."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError


class KernelName(str, Enum):
    LAPLACIAN = "laplacian"
    SOBEL_X = "sobel_x"
    SOBEL_Y = "sobel_y"


@dataclass(frozen=True)
class FixedKernel:
    name: KernelName
    coefficients: tuple[tuple[float, ...], ...]

    def tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(self.coefficients, dtype=dtype, device=device)


LAPLACIAN = FixedKernel(KernelName.LAPLACIAN, ((-1.0, -1.0, -1.0), (-1.0, 8.0, -1.0), (-1.0, -1.0, -1.0)))
SOBEL_X = FixedKernel(KernelName.SOBEL_X, ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0)))
SOBEL_Y = FixedKernel(KernelName.SOBEL_Y, ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0)))

# channel order of every edge stack
EDGE_KERNELS = (LAPLACIAN, SOBEL_X, SOBEL_Y)


def _check_single_channel(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 1:
        raise ContractError(f"expected a (B, 1, H, W) map, got shape {tuple(x.shape)}")
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ContractError(f"spatial dims must be >= 3, got {tuple(x.shape[2:])}")
    if not torch.isfinite(x).all():
        raise ContractError("input map contains non-finite values")


def apply_fixed_kernel(x: torch.Tensor, kernel: FixedKernel) -> torch.Tensor:
    """Stride-1, zero-padded cross-correlation of a single-channel map."""
    _check_single_channel(x)
    w = kernel.tensor(x.dtype, x.device).view(1, 1, 3, 3)
    return F.conv2d(x, w, padding=1)


def edge_stack(x: torch.Tensor) -> torch.Tensor:
    """Concatenate Laplacian, Sobel-X and Sobel-Y responses -> (B, 3, H, W)."""
    _check_single_channel(x)
    w = torch.stack([k.tensor(x.dtype, x.device) for k in EDGE_KERNELS]).unsqueeze(1)
    return F.conv2d(x, w, padding=1)


def dynamic_conv_forward(x: torch.Tensor, experts: torch.Tensor, gate: torch.Tensor,
                         padding: tuple[int, int]) -> torch.Tensor:
    """Convolve each sample with its own gate-weighted sum of expert kernels.

    experts: (K, out, in, kh, kw); gate: (B, K). Aggregation happens before
    the convolution, which is then run as one grouped conv over the batch.
    A list of per-expert (out, in, kh, kw) tensors is accepted as well.
    """
    if isinstance(experts, (list, tuple)):
        if not experts:
            raise ConfigError("dynamic convolution needs at least one expert")
        shapes = {tuple(e.shape) for e in experts}
        if len(shapes) != 1:
            raise ConfigError(f"expert kernels differ in shape: {sorted(shapes)}")
        experts = torch.stack(list(experts))
    if experts.dim() != 5:
        raise ConfigError(f"experts must be (K, out, in, kh, kw), got {tuple(experts.shape)}")
    k, out_ch, in_ch, kh, kw = experts.shape
    if k == 0:
        raise ConfigError("dynamic convolution needs at least one expert")
    b, c, h, w = x.shape
    if c != in_ch:
        raise ContractError(f"input has {c} channels, experts expect {in_ch}")
    if gate.shape != (b, k):
        raise ContractError(f"gate shape {tuple(gate.shape)} != {(b, k)}")
    weight = torch.einsum("bk,koihw->boihw", gate, experts).reshape(b * out_ch, in_ch, kh, kw)
    out = F.conv2d(x.reshape(1, b * c, h, w), weight, padding=padding, groups=b)
    return out.view(b, out_ch, out.shape[-2], out.shape[-1])


class ExpertGate(nn.Module):
    """GAP -> linear -> ReLU -> linear -> softmax(z / temperature) over K experts."""

    def __init__(self, in_channels: int, num_experts: int, reduction: int = 4, temperature: float = 30.0):
        super().__init__()
        if temperature <= 0:
            raise ConfigError("gate temperature must be positive")
        hidden = max(1, in_channels // reduction)
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, num_experts)
        self.temperature = temperature

    def forward(self, x):
        z = self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3)))))
        return torch.softmax(z / self.temperature, dim=1)


class DynamicConv2d(nn.Module):
    """Bias-free dynamic convolution with K experts of one shape.

    ``kernel_size`` is (kh, kw); 1xN is the horizontal orientation, Nx1 the
    vertical one. Both dims must be odd so that padding preserves H and W.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size, num_experts: int = 4,
                 reduction: int = 4, temperature: float = 30.0):
        super().__init__()
        if num_experts < 1:
            raise ConfigError("dynamic convolution needs at least one expert")
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else tuple(kernel_size)
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {(kh, kw)}")
        self.kernel_size = (kh, kw)
        self.padding = (kh // 2, kw // 2)
        self.gate = ExpertGate(in_channels, num_experts, reduction, temperature)
        self.experts = nn.Parameter(torch.empty(num_experts, out_channels, in_channels, kh, kw))
        bound = 1.0 / math.sqrt(in_channels * kh * kw)
        nn.init.uniform_(self.experts, -math.sqrt(3.0) * bound, math.sqrt(3.0) * bound)

    @property
    def num_experts(self) -> int:
        return self.experts.shape[0]

    def forward(self, x, gate=None):
        if gate is None:
            gate = self.gate(x)
        return dynamic_conv_forward(x, self.experts, gate, self.padding)
