"""
Mask denoiser: predicts clean mask logits from a noisy analog mask
"""
import torch
import torch.nn as nn

from src.models.diffusion import sinusoidal_embedding
from src.models.guidance import GuidanceBundle, GuidanceInjection, GuidanceMode
from src.models.layers import ProgressiveUpsampler, area_downsample
from src.utils.exceptions import ConfigurationError


class MaskDenoiser(nn.Module):
    """
    y_t embedding + timestep embedding + frame features -> guidance injection
    -> progressive upsampler with a single logit branch
    """

    def __init__(
        self,
        channels: int,
        hidden_channels: int = 64,
        time_embed_dim: int = 128,
        mode=GuidanceMode.STEE,
        yt_resolution: str = "feature",
        patch: int = 32,
    ):
        super().__init__()
        if yt_resolution not in ("feature", "full"):
            raise ConfigurationError(
                f"yt_resolution must be 'feature' or 'full', got '{yt_resolution}'"
            )
        self.yt_resolution = yt_resolution
        self.time_embed_dim = time_embed_dim
        if yt_resolution == "feature":
            self.mask_embed = nn.Conv2d(1, channels, kernel_size=1)
        else:
            self.mask_embed = nn.Conv2d(1, channels, kernel_size=patch, stride=patch)
        self.time_proj = nn.Linear(time_embed_dim, channels)
        self.injection = GuidanceInjection(channels, mode)
        self.decoder = ProgressiveUpsampler(channels, hidden_channels, branches=1)

    def embed_mask(self, y_t: torch.Tensor, size) -> torch.Tensor:
        if self.yt_resolution == "feature":
            return self.mask_embed(area_downsample(y_t, size).unsqueeze(1))
        return self.mask_embed(y_t.unsqueeze(1))

    def forward(
        self,
        y_t: torch.Tensor,
        t: torch.Tensor,
        features: torch.Tensor,
        bundle: GuidanceBundle,
    ) -> torch.Tensor:
        """
        Args:
            y_t: [N, H, W] noisy analog mask
            t: [N] integer timesteps
            features: [N, C, h, w] frame features
            bundle: guidance of the frame

        Returns:
            [N, H, W] mask logits
        """
        h = self.embed_mask(y_t.to(features.dtype), features.shape[-2:])
        time = self.time_proj(sinusoidal_embedding(t, self.time_embed_dim).to(features.dtype))
        h = h + time[:, :, None, None] + features
        h = self.injection(h, bundle)
        return self.decoder(h)[0]
