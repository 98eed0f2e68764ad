"""
Per-frame hierarchical encoder, guidance encoder and auxiliary head
"""
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from src.models.layers import ProgressiveUpsampler, ResidualBlock, norm
from src.utils import get_logger
from src.utils.exceptions import ConfigurationError, ValidationError

logger = get_logger(__name__)


class GlobalAttention(nn.Module):
    """Pre-norm global self-attention over all spatial positions"""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        heads = heads if channels % heads == 0 else 1
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        normed = self.norm(tokens)
        attended, _ = self.attn(normed, normed, normed, need_weights=False)
        tokens = tokens + attended
        return tokens.transpose(1, 2).reshape(n, c, h, w)


class EncoderStage(nn.Module):
    """Strided patch projection followed by two residual blocks"""

    def __init__(self, in_channels: int, out_channels: int, stride: int, attention: bool):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=stride, stride=stride)
        self.proj_norm = norm(out_channels)
        self.block1 = ResidualBlock(out_channels, out_channels)
        self.block2 = ResidualBlock(out_channels, out_channels)
        self.attention = GlobalAttention(out_channels) if attention else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj_norm(self.proj(x))
        x = self.block2(self.block1(x))
        if self.attention is not None:
            x = self.attention(x)
        return x


class HierarchicalEncoder(nn.Module):
    """
    Convolution / attention hybrid producing a feature pyramid

    Stages are registered as ``stage1`` .. ``stageK`` so parameters are named
    ``<prefix>.stage3.block1.*``. Frames are encoded independently.
    """

    def __init__(
        self,
        in_channels: int = 3,
        channels: Sequence[int] = (32, 64, 96, 128),
        strides: Sequence[int] = (4, 2, 2, 2),
        attention_stages: Sequence[int] = (3, 4),
    ):
        super().__init__()
        if len(channels) != len(strides):
            raise ConfigurationError("channels and strides must have equal length")
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        self.total_stride = 1
        for s in strides:
            self.total_stride *= s

        previous = in_channels
        for i, (out_channels, stride) in enumerate(zip(channels, strides), start=1):
            self.add_module(
                f"stage{i}",
                EncoderStage(previous, out_channels, stride, i in attention_stages),
            )
            previous = out_channels

    @property
    def stages(self) -> List[EncoderStage]:
        return [getattr(self, f"stage{i}") for i in range(1, len(self.channels) + 1)]

    def check_size(self, height: int, width: int) -> None:
        if height % self.total_stride or width % self.total_stride:
            message = f"Input size {height}x{width} is not a multiple of {self.total_stride}"
            logger.error(message)
            raise ConfigurationError(message)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        """[N, C_in, H, W] -> one map per stage"""
        self.check_size(*x.shape[-2:])
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels

    def encode_frames(self, frames: torch.Tensor) -> List[torch.Tensor]:
        """[B, L, 3, H, W] -> pyramid levels shaped [B, L, C_k, H/s_k, W/s_k]"""
        b, length = frames.shape[:2]
        levels = self(frames.flatten(0, 1))
        return [level.reshape(b, length, *level.shape[1:]) for level in levels]


class GuidanceEncoder(nn.Module):
    """Lightweight encoder of (frame, mask) pairs to top-level features"""

    def __init__(self, channels: Sequence[int] = (32, 128), strides: Sequence[int] = (8, 4)):
        super().__init__()
        self.encoder = HierarchicalEncoder(
            in_channels=4, channels=channels, strides=strides, attention_stages=()
        )

    def forward(self, frame: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """
        Encode pairs

        Args:
            frame: [N, 3, H, W]
            mask: [N, H, W] probabilities

        Returns:
            [N, C, H/32, W/32]
        """
        if mask.dim() == 4:
            mask = mask.squeeze(1)
        if frame.shape[0] != mask.shape[0] or frame.shape[-2:] != mask.shape[-2:]:
            raise ValidationError(
                f"Guidance frame {tuple(frame.shape)} and mask {tuple(mask.shape)} "
                "do not match"
            )
        stacked = torch.cat([frame, mask.unsqueeze(1).to(frame.dtype)], dim=1)
        return self.encoder(stacked)[-1]


class AuxiliaryHead(nn.Module):
    """Pseudo-mask and boundary logits from the aggregated feature"""

    def __init__(self, in_channels: int, hidden_channels: int = 64):
        super().__init__()
        self.decoder = ProgressiveUpsampler(in_channels, hidden_channels, branches=2)

    def forward(self, agg: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """[N, C, h, w] -> (pseudo logits [N, H, W], boundary logits [N, H, W])"""
        pseudo, boundary = self.decoder(agg)
        return pseudo, boundary


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())
