"""
Shadow boundary-aware attention

Tokens are the aggregated feature positions plus an embedding of the boundary
probability at each position. Keys and values are weighted by the pseudo
shadow mask so attention concentrates on shadow-relevant regions.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.models.layers import area_downsample
from src.utils.exceptions import ValidationError


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # [N, n, C], row-major over the spatial grid
    spatial_shape: Tuple[int, int]

    @property
    def length(self) -> int:
        return self.spatial_shape[0] * self.spatial_shape[1]


def _check_full_resolution(
    logits: torch.Tensor, batch: int, spatial_shape: Tuple[int, int], name: str
) -> None:
    if logits.dim() != 3 or logits.shape[0] != batch:
        raise ValidationError(
            f"{name} must be [N, H, W] with N={batch}, got {tuple(logits.shape)}"
        )
    h, w = spatial_shape
    height, width = logits.shape[-2:]
    if height % h or width % w or height // h != width // w:
        raise ValidationError(
            f"{name} of size {height}x{width} is not an integer upscale of {h}x{w}"
        )


class BoundaryAwareAttention(nn.Module):
    """Single-head pre-norm attention block with boundary position embedding"""

    def __init__(self, channels: int, ffn_expansion: int = 4):
        super().__init__()
        self.channels = channels
        self.patch_embed = nn.Linear(channels, channels)
        self.boundary_embed = nn.Linear(1, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(channels, channels, bias=False)
        self.w_v = nn.Linear(channels, channels, bias=False)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_expansion * channels),
            nn.GELU(),
            nn.Linear(ffn_expansion * channels, channels),
        )

    def tokenize(self, agg: torch.Tensor, boundary_logits: torch.Tensor) -> TokenSequence:
        """
        [N, C, h, w] feature + [N, H, W] boundary logits -> tokens with E_bp added
        """
        n, c, h, w = agg.shape
        _check_full_resolution(boundary_logits, n, (h, w), "boundary_logits")
        boundary = area_downsample(torch.sigmoid(boundary_logits), (h, w))
        patches = self.patch_embed(agg.flatten(2).transpose(1, 2))
        position = self.boundary_embed(boundary.reshape(n, h * w, 1))
        return TokenSequence(tokens=patches + position, spatial_shape=(h, w))

    def mask_weights(self, tokens: TokenSequence, pseudo_logits: torch.Tensor) -> torch.Tensor:
        """Pseudo-mask probability per token, [N, n, 1]"""
        n = tokens.tokens.shape[0]
        _check_full_resolution(pseudo_logits, n, tokens.spatial_shape, "pseudo_logits")
        weights = area_downsample(torch.sigmoid(pseudo_logits), tokens.spatial_shape)
        return weights.reshape(n, -1, 1)

    def project(
        self, tokens: TokenSequence, weights: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """q from the normed tokens; k and v from the normed tokens scaled by ``weights``"""
        h = self.norm1(tokens.tokens)
        weighted = h * weights
        return self.w_q(h), self.w_k(weighted), self.w_v(weighted)

    def attend(
        self,
        tokens: TokenSequence,
        pseudo_logits: torch.Tensor,
        return_attention: bool = False,
    ):
        """
        Mask-weighted attention followed by the feed-forward block

        Returns:
            [N, C, h, w] features, plus the [N, n, n] attention when requested
        """
        q, k, v = self.project(tokens, self.mask_weights(tokens, pseudo_logits))
        attention = F.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.channels), dim=-1)
        a = tokens.tokens + attention @ v
        out = a + self.ffn(self.norm2(a))

        features = token_grid(tokens, out)
        if return_attention:
            return features, attention
        return features

    def forward(
        self,
        agg: torch.Tensor,
        boundary_logits: torch.Tensor,
        pseudo_logits: torch.Tensor,
    ) -> torch.Tensor:
        return self.attend(self.tokenize(agg, boundary_logits), pseudo_logits)


def token_grid(tokens: TokenSequence, values: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Reshape [N, n, C] tokens (or ``values``) back to [N, C, h, w]"""
    data = tokens.tokens if values is None else values
    n, _, c = data.shape
    h, w = tokens.spatial_shape
    return data.transpose(1, 2).reshape(n, c, h, w)
