"""
Timeline guidance: construction of guidance bundles and their injection

pce  - past masks, area-downsampled, concatenated raw
pee  - past (frame, mask) pairs through the guidance encoder
stee - past and future (frame, pseudo mask) pairs through the guidance encoder
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple

import torch
import torch.nn as nn

from src.models.encoders import GuidanceEncoder
from src.models.layers import area_downsample, conv3x3, norm
from src.utils.exceptions import ConfigurationError, SequencingError, ValidationError

PAST = "past"
FUTURE = "future"


class GuidanceMode(str, Enum):
    PCE = "pce"
    PEE = "pee"
    STEE = "stee"

    @classmethod
    def parse(cls, value) -> "GuidanceMode":
        try:
            return cls(getattr(value, "value", value))
        except ValueError as e:
            raise ConfigurationError(
                f"Unknown guidance mode '{value}' (pce, pee, stee)"
            ) from e

    @property
    def sequential(self) -> bool:
        """Whether frame t needs the prediction of earlier frames"""
        return self is not GuidanceMode.STEE

    @property
    def uses_encoder(self) -> bool:
        return self is not GuidanceMode.PCE


@dataclass
class GuidanceItem:
    direction: str
    payload: torch.Tensor  # [B, 1, h, w] (pce) or [B, C, h, w]
    source_index: int


@dataclass
class GuidanceBundle:
    mode: GuidanceMode
    items: List[GuidanceItem] = field(default_factory=list)

    def directions(self) -> List[str]:
        return [item.direction for item in self.items]

    def __len__(self) -> int:
        return len(self.items)


def guidance_sources(mode: GuidanceMode, clip_len: int, center: int) -> List[int]:
    """Clip indices contributing guidance for ``center``"""
    if mode is GuidanceMode.STEE:
        return [i for i in range(clip_len) if i != center]
    return list(range(center))


def build_guidance(
    mode,
    frames: torch.Tensor,
    masks: Mapping[int, torch.Tensor],
    center: int,
    encoder: Optional[GuidanceEncoder] = None,
    feature_size: Optional[Tuple[int, int]] = None,
    cache: Optional[Dict[int, torch.Tensor]] = None,
) -> GuidanceBundle:
    """
    Build the guidance bundle of one center frame

    Args:
        mode: pce / pee / stee
        frames: [B, L, 3, H, W] clip frames
        masks: clip index -> [B, H, W] mask probabilities (predicted, ground
            truth or pseudo masks depending on mode and phase)
        center: frame being denoised
        encoder: guidance encoder (pee / stee)
        feature_size: (h, w) of the top pyramid level; defaults to H/32, W/32
        cache: clip index -> encoded feature, filled and reused across centers

    Raises:
        SequencingError: If a mask required by the mode is missing
    """
    mode = GuidanceMode.parse(mode)
    length = frames.shape[1]
    if not 0 <= center < length:
        raise ValidationError(f"center {center} out of range for {length} frames")
    if feature_size is None:
        feature_size = (frames.shape[-2] // 32, frames.shape[-1] // 32)
    if mode.uses_encoder and encoder is None:
        raise ConfigurationError(f"Guidance mode '{mode.value}' needs a guidance encoder")

    items = []
    for index in guidance_sources(mode, length, center):
        if index not in masks:
            raise SequencingError(
                f"Guidance mode '{mode.value}' for frame {center} needs the mask "
                f"of frame {index}, which is not available yet"
            )
        mask = masks[index].detach()
        direction = PAST if index < center else FUTURE
        if mode is GuidanceMode.PCE:
            payload = area_downsample(mask.to(frames.dtype), feature_size).unsqueeze(1)
        elif cache is not None and index in cache:
            payload = cache[index]
        else:
            payload = encoder(frames[:, index], mask.to(frames.dtype))
            if cache is not None:
                cache[index] = payload
        items.append(GuidanceItem(direction=direction, payload=payload, source_index=index))
    return GuidanceBundle(mode=mode, items=items)


class GuidanceInjection(nn.Module):
    """
    Fuse pooled past / future guidance into a feature map

    concat(feature, past, future) -> two conv-norm-GELU layers -> a 3x3 conv
    zipping the channels back, added residually to the feature.
    """

    def __init__(self, channels: int, mode=GuidanceMode.STEE):
        super().__init__()
        self.channels = channels
        self.mode = GuidanceMode.parse(mode)
        self.mask_proj = (
            nn.Conv2d(1, channels, kernel_size=1) if self.mode is GuidanceMode.PCE else None
        )
        self.fuse = nn.Sequential(
            conv3x3(3 * channels, 2 * channels),
            norm(2 * channels),
            nn.GELU(),
            conv3x3(2 * channels, 2 * channels),
            norm(2 * channels),
            nn.GELU(),
        )
        self.zip = conv3x3(2 * channels, channels)

    def _payload(self, item: GuidanceItem, like: torch.Tensor) -> torch.Tensor:
        payload = item.payload
        if payload.shape[-2:] != like.shape[-2:] or payload.shape[0] != like.shape[0]:
            raise ValidationError(
                f"Guidance payload {tuple(payload.shape)} does not match feature "
                f"{tuple(like.shape)}"
            )
        if payload.shape[1] == 1 and self.mask_proj is not None:
            payload = self.mask_proj(payload)
        if payload.shape[1] != self.channels:
            raise ValidationError(
                f"Guidance payload has {payload.shape[1]} channels, expected {self.channels}"
            )
        return payload

    def pool(
        self, bundle: GuidanceBundle, like: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Mean payload per direction; a missing direction is a zero map"""
        pooled = []
        for direction in (PAST, FUTURE):
            payloads = [
                self._payload(item, like) for item in bundle.items if item.direction == direction
            ]
            if payloads:
                pooled.append(torch.stack(payloads).mean(dim=0))
            else:
                pooled.append(torch.zeros_like(like))
        return pooled[0], pooled[1]

    def forward(self, feature: torch.Tensor, bundle: GuidanceBundle) -> torch.Tensor:
        past, future = self.pool(bundle, feature)
        h = self.fuse(torch.cat([feature, past, future], dim=1))
        return feature + self.zip(h)
