"""
Shared building blocks for the encoders, heads and the denoiser
"""
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def norm(channels: int) -> nn.GroupNorm:
    """Group normalization with up to 8 groups of at least 2 channels each"""
    limit = max(1, min(8, channels // 2))
    groups = next(g for g in range(limit, 0, -1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


def conv3x3(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)


class ResidualBlock(nn.Module):
    """conv-norm-GELU-conv-norm with a (projected) skip, GELU after the sum"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = conv3x3(in_channels, out_channels)
        self.norm1 = norm(out_channels)
        self.conv2 = conv3x3(out_channels, out_channels)
        self.norm2 = norm(out_channels)
        self.skip = (
            nn.Identity()
            if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, kernel_size=1)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.gelu(h + self.skip(x))


class UpsampleBlock(nn.Module):
    """2x bilinear upsample, 3x3 conv, norm, GELU"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = conv3x3(in_channels, out_channels)
        self.norm = norm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.gelu(self.norm(self.conv(x)))


class ProgressiveUpsampler(nn.Module):
    """
    Decoder from stride 32 to full resolution

    Three upsample blocks bring the map to stride 4, a 4x bilinear resize to
    full resolution, then one 1x1 logit branch per output.
    """

    def __init__(self, in_channels: int, hidden_channels: int, branches: int = 1):
        super().__init__()
        self.blocks = nn.Sequential(
            UpsampleBlock(in_channels, hidden_channels),
            UpsampleBlock(hidden_channels, hidden_channels),
            UpsampleBlock(hidden_channels, hidden_channels),
        )
        self.branches = nn.ModuleList(
            nn.Conv2d(hidden_channels, 1, kernel_size=1) for _ in range(branches)
        )
        for branch in self.branches:
            nn.init.zeros_(branch.bias)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        h = self.blocks(x)
        h = F.interpolate(h, scale_factor=4, mode="bilinear", align_corners=False)
        return tuple(branch(h)[:, 0] for branch in self.branches)


def area_downsample(probabilities: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Area-average a [N, H, W] map to [N, h, w]"""
    return F.adaptive_avg_pool2d(probabilities.unsqueeze(1), size).squeeze(1)
