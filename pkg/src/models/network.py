"""
The composite video shadow detection network
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from config.settings import RunConfig
from src.models.denoiser import MaskDenoiser
from src.models.diffusion import NoiseSchedule, build_schedule, sample
from src.models.dsa import DualScaleAggregation
from src.models.encoders import AuxiliaryHead, GuidanceEncoder, HierarchicalEncoder
from src.models.guidance import GuidanceBundle, GuidanceMode, build_guidance
from src.models.sbaa import BoundaryAwareAttention
from src.utils import get_logger

logger = get_logger(__name__)


@dataclass
class ClipContext:
    """Everything computed once per clip before the diffusion decoder"""

    aggregated: torch.Tensor  # [B, L, C, h, w]
    pseudo_logits: torch.Tensor  # [B, L, H, W]
    boundary_logits: torch.Tensor  # [B, L, H, W]
    features: torch.Tensor  # [B, L, C, h, w], denoiser conditioning

    @property
    def feature_size(self) -> Tuple[int, int]:
        return tuple(self.features.shape[-2:])


class TBGDiff(nn.Module):
    """
    Encoder -> dual scale aggregation -> auxiliary head -> boundary-aware
    attention -> guided mask diffusion

    Submodules are named ``encoders``, ``dsa``, ``aux_head``, ``sbaa``,
    ``guidance_encoder`` and ``denoiser``; the guidance encoder only exists
    for the encoder-based guidance modes.
    """

    def __init__(self, config: RunConfig):
        super().__init__()
        model_cfg = config.model
        diffusion_cfg = config.diffusion
        channels = model_cfg.encoder_channels[-1]

        self.mode = GuidanceMode.parse(diffusion_cfg.guidance_mode)
        self.scale = diffusion_cfg.scale
        self.sample_steps = diffusion_cfg.sample_steps
        self.schedule: NoiseSchedule = build_schedule(
            diffusion_cfg.schedule, diffusion_cfg.t_train
        )

        self.encoders = HierarchicalEncoder(3, model_cfg.encoder_channels)
        self.dsa = (
            DualScaleAggregation(
                channels,
                use_short=config.dsa.use_short,
                use_long=config.dsa.use_long,
                self_tile_rescale=config.dsa.self_tile_rescale,
            )
            if model_cfg.use_dsa
            else None
        )
        self.aux_head = AuxiliaryHead(channels, model_cfg.head_channels)
        self.sbaa = (
            BoundaryAwareAttention(channels, model_cfg.ffn_expansion)
            if model_cfg.use_sbaa
            else None
        )
        self.guidance_encoder = (
            GuidanceEncoder(model_cfg.guidance_channels) if self.mode.uses_encoder else None
        )
        self.denoiser = MaskDenoiser(
            channels,
            model_cfg.head_channels,
            model_cfg.time_embed_dim,
            self.mode,
            diffusion_cfg.yt_resolution,
        )
        logger.debug(
            f"TBGDiff: mode {self.mode.value}, dsa {self.dsa is not None}, "
            f"sbaa {self.sbaa is not None}, {self.schedule.kind} schedule T={self.schedule.t_train}"
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def clip_context(self, frames: torch.Tensor) -> ClipContext:
        """[B, L, 3, H, W] frames -> per-frame conditioning for the denoiser"""
        frames = frames.to(self.dtype)
        b, length = frames.shape[:2]
        top = self.encoders.encode_frames(frames)[-1]
        aggregated = self.dsa(top) if self.dsa is not None else top

        flat = aggregated.flatten(0, 1)
        pseudo, boundary = self.aux_head(flat)
        if self.sbaa is not None:
            features = self.sbaa(flat, boundary, pseudo)
        else:
            features = flat

        return ClipContext(
            aggregated=aggregated,
            pseudo_logits=pseudo.reshape(b, length, *pseudo.shape[1:]),
            boundary_logits=boundary.reshape(b, length, *boundary.shape[1:]),
            features=features.reshape(b, length, *features.shape[1:]),
        )

    def guidance(
        self,
        frames: torch.Tensor,
        masks: Dict[int, torch.Tensor],
        center: int,
        context: ClipContext,
        cache: Optional[Dict[int, torch.Tensor]] = None,
    ) -> GuidanceBundle:
        return build_guidance(
            self.mode,
            frames.to(self.dtype),
            masks,
            center,
            encoder=self.guidance_encoder,
            feature_size=context.feature_size,
            cache=cache,
        )

    def pseudo_masks(self, context: ClipContext) -> Dict[int, torch.Tensor]:
        probabilities = torch.sigmoid(context.pseudo_logits).detach()
        return {i: probabilities[:, i] for i in range(probabilities.shape[1])}

    def predict_mask(
        self,
        y_t: torch.Tensor,
        t: torch.Tensor,
        context: ClipContext,
        center: int,
        bundle: GuidanceBundle,
    ) -> torch.Tensor:
        """Mask logits [B, H, W] of frame ``center``"""
        return self.denoiser(y_t, t, context.features[:, center], bundle)

    @torch.no_grad()
    def sample_clip(
        self,
        frames: torch.Tensor,
        seed: int,
        steps: Optional[int] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Sample masks for every frame of a batch of clips

        Frame ``c`` uses initial noise seeded ``seed + c``. With stee the frames
        are independent once pseudo masks exist; pce / pee feed each frame's
        prediction to the frames after it.

        Returns:
            (masks [B, L, H, W] uint8, probabilities [B, L, H, W])
        """
        steps = steps or self.sample_steps
        frames = frames.to(self.dtype)
        b, length, _, height, width = frames.shape
        context = self.clip_context(frames)

        if self.mode.sequential:
            guidance_masks: Dict[int, torch.Tensor] = {}
        else:
            guidance_masks = self.pseudo_masks(context)
        cache: Dict[int, torch.Tensor] = {}

        masks, probabilities = [], []
        for center in range(length):
            bundle = self.guidance(frames, guidance_masks, center, context, cache)

            def denoise_fn(y_t, t, center=center, bundle=bundle):
                return self.predict_mask(y_t, t, context, center, bundle)

            mask, prob = sample(
                denoise_fn,
                (b, height, width),
                self.schedule,
                steps=steps,
                scale=self.scale,
                seed=seed + center,
                dtype=self.dtype,
                frame_index=center,
            )
            if self.mode.sequential:
                guidance_masks[center] = mask.to(self.dtype)
            masks.append(mask)
            probabilities.append(prob)
        return torch.stack(masks, dim=1), torch.stack(probabilities, dim=1)

    def parameter_report(self) -> Dict[str, int]:
        """Parameter count per top-level module"""
        return {
            name: sum(p.numel() for p in module.parameters())
            for name, module in self.named_children()
        }
