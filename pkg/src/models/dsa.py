"""
Dual scale aggregation

Short-term (adjacent) frames are read with a vanilla affinity, long-term
(interval) frames with a residual affinity that is zero where the long-term
frames agree with the current one. Both readouts are fused with the current
feature by a residual block.

Affinity weights are shaped [..., M, Q]: memory positions by query positions,
normalized over the memory axis.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.ingestion.clips import TimelinePartition, partition_timeline
from src.models.layers import conv3x3, norm
from src.utils.exceptions import ValidationError

VANILLA = "vanilla"
RESIDUAL = "residual"
SELF = "self"


@dataclass
class Affinity:
    weights: torch.Tensor  # [..., N * HW_mem, HW_query]
    kind: str
    num_frames: int = 1


def l2_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Negative squared Euclidean distance over the last dimension"""
    if a.shape[-1] != b.shape[-1]:
        raise ValidationError(
            f"l2_similarity dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )
    return -((a - b) ** 2).sum(dim=-1)


def compute_affinity(
    query: torch.Tensor, keys: torch.Tensor, num_frames: int = 1
) -> Affinity:
    """
    Vanilla affinity of memory keys against query positions

    Args:
        query: [..., C, Q]
        keys: [..., C, M]

    Returns:
        Affinity with weights [..., M, Q]; every column sums to 1
    """
    if query.shape[-2] != keys.shape[-2]:
        raise ValidationError(
            f"Channel mismatch: query has {query.shape[-2]}, keys have {keys.shape[-2]}"
        )
    # -|k - q|^2 expanded
    similarity = (
        2 * keys.transpose(-2, -1) @ query
        - (keys**2).sum(dim=-2).unsqueeze(-1)
        - (query**2).sum(dim=-2).unsqueeze(-2)
    )
    similarity = similarity - similarity.amax(dim=-2, keepdim=True)
    weights = similarity.exp()
    weights = weights / weights.sum(dim=-2, keepdim=True)
    return Affinity(weights=weights, kind=VANILLA, num_frames=num_frames)


def readout(values: torch.Tensor, affinity: Affinity) -> torch.Tensor:
    """values [..., C_v, M] @ weights [..., M, Q] -> [..., C_v, Q]"""
    if values.shape[-1] != affinity.weights.shape[-2]:
        raise ValidationError(
            f"Readout mismatch: {values.shape[-1]} values for "
            f"{affinity.weights.shape[-2]} affinity rows"
        )
    return values @ affinity.weights


def _tile(x: torch.Tensor, times: int) -> torch.Tensor:
    return x.repeat(*([1] * (x.dim() - 1)), times)


def self_affinity_broadcast(
    query: torch.Tensor,
    num_frames: int,
    rescale: bool = True,
    self_keys: Optional[torch.Tensor] = None,
) -> Affinity:
    """
    Self affinity tiled ``num_frames`` times along the memory axis

    With ``rescale`` the tiled columns carry 1/N of the mass each, so columns
    still sum to 1. ``self_keys`` defaults to the query itself.
    """
    if num_frames < 1:
        raise ValidationError(f"num_frames must be >= 1, got {num_frames}")
    keys = query if self_keys is None else self_keys
    if rescale:
        # softmax over N identical copies is exactly the 1/N-scaled tiling
        weights = compute_affinity(query, _tile(keys, num_frames)).weights
    else:
        weights = compute_affinity(query, keys).weights.repeat(
            *([1] * (query.dim() - 2)), num_frames, 1
        )
    return Affinity(weights=weights, kind=SELF, num_frames=num_frames)


def residual_affinity(
    query: torch.Tensor,
    long_keys: torch.Tensor,
    self_keys: Optional[torch.Tensor] = None,
    rescale: bool = True,
) -> Affinity:
    """
    |broadcast self affinity - long-term affinity|

    Inside DualScaleAggregation the self term scores the query against the
    center frame's key (``self_keys``), not against the query itself. Query
    and key projections differ, so scoring against the query would leave a
    nonzero residual on a static clip; with the center key tiled N times the
    residual of a static clip is exactly zero.

    Args:
        query: [..., C, Q]
        long_keys: [..., C, N * Q]
        self_keys: Keys standing in for the current frame, [..., C, Q]
    """
    q = query.shape[-1]
    m = long_keys.shape[-1]
    if m == 0 or m % q:
        raise ValidationError(
            f"Long-term memory of {m} positions is not a multiple of {q} query positions"
        )
    if self_keys is not None and self_keys.shape[-1] != q:
        raise ValidationError("self_keys must have as many positions as the query")
    num_frames = m // q
    self_part = self_affinity_broadcast(query, num_frames, rescale, self_keys)
    long_part = compute_affinity(query, long_keys, num_frames)
    return Affinity(
        weights=(self_part.weights - long_part.weights).abs(),
        kind=RESIDUAL,
        num_frames=num_frames,
    )


class FusionBlock(nn.Module):
    """Residual block over concat(F, F_short, F_long) with a projected skip from F"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(3 * channels, channels)
        self.norm1 = norm(channels)
        self.conv2 = conv3x3(channels, channels)
        self.norm2 = norm(channels)
        self.skip = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(
        self, feature: torch.Tensor, short: torch.Tensor, long: torch.Tensor
    ) -> torch.Tensor:
        h = torch.cat([feature, short, long], dim=1)
        h = F.gelu(self.norm1(self.conv1(h)))
        h = self.norm2(self.conv2(h))
        return F.gelu(h + self.skip(feature))


@dataclass
class AggregationResult:
    output: torch.Tensor  # [B, C, h, w]
    short_readout: torch.Tensor
    long_readout: torch.Tensor


class DualScaleAggregation(nn.Module):
    """Aggregate short- and long-term context into the top-level feature of each frame"""

    def __init__(
        self,
        channels: int,
        use_short: bool = True,
        use_long: bool = True,
        self_tile_rescale: bool = True,
    ):
        super().__init__()
        self.key = nn.Conv2d(channels, channels, kernel_size=1)
        self.query = nn.Conv2d(channels, channels, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.fusion = FusionBlock(channels)
        self.use_short = use_short
        self.use_long = use_long
        self.self_tile_rescale = self_tile_rescale

    def _project(self, conv: nn.Conv2d, top: torch.Tensor) -> torch.Tensor:
        b, length = top.shape[:2]
        out = conv(top.flatten(0, 1))
        return out.reshape(b, length, out.shape[1], -1)  # [B, L, C, hw]

    @staticmethod
    def _gather(projected: torch.Tensor, indices: List[int]) -> torch.Tensor:
        """[B, L, C, hw] -> [B, C, len(indices) * hw], frames in index order"""
        return torch.cat([projected[:, i] for i in indices], dim=-1)

    def aggregate(
        self,
        top: torch.Tensor,
        partition: TimelinePartition,
        projections: Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = None,
    ) -> AggregationResult:
        """
        Aggregate context for one center frame

        Args:
            top: [B, L, C, h, w] top pyramid level of a clip
            partition: timeline partition of the center frame
        """
        b, length, c, h, w = top.shape
        if not all(0 <= i < length for i in partition.short_term + partition.long_term):
            raise ValidationError(f"Partition {partition} invalid for {length} frames")
        keys, queries, values = projections or (
            self._project(self.key, top),
            self._project(self.query, top),
            self._project(self.value, top),
        )
        center = partition.center
        query = queries[:, center]

        if self.use_short:
            short_aff = compute_affinity(
                query, self._gather(keys, partition.short_term), len(partition.short_term)
            )
            short = readout(self._gather(values, partition.short_term), short_aff)
        else:
            short = torch.zeros_like(query)

        if self.use_long:
            long_aff = residual_affinity(
                query,
                self._gather(keys, partition.long_term),
                self_keys=keys[:, center],
                rescale=self.self_tile_rescale,
            )
            long = readout(self._gather(values, partition.long_term), long_aff)
        else:
            long = torch.zeros_like(query)

        short = short.reshape(b, c, h, w)
        long = long.reshape(b, c, h, w)
        output = self.fusion(top[:, center], short, long)
        return AggregationResult(output=output, short_readout=short, long_readout=long)

    def forward(self, top: torch.Tensor) -> torch.Tensor:
        """[B, L, C, h, w] -> aggregated features for every center, same shape"""
        length = top.shape[1]
        projections = (
            self._project(self.key, top),
            self._project(self.query, top),
            self._project(self.value, top),
        )
        outputs = [
            self.aggregate(top, partition_timeline(length, center), projections).output
            for center in range(length)
        ]
        return torch.stack(outputs, dim=1)
